//! Pipeline stages. Each stage reads raw inputs from the configured paths and
//! earlier stages' outputs from the output directory, then writes its
//! artifacts and a manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use sdm_core::balance::{adaptive_oversample, class_weights, write_balanced_csv, ClassWeights, Origin, Oversampled};
use sdm_core::covariates::{CovariateTable, CovariateVector, Standardizer};
use sdm_core::ensemble::{ensemble_mae, optimize_weights, EnsembleWeights};
use sdm_core::featsel::{rfe, ForestConfig};
use sdm_core::fusion::{evaluate, train, write_trace_csv, FusionInput, ModelParams, TrainSample};
use sdm_core::geo::{make_grid, CellKey, Grid};
use sdm_core::metrics::{bar_chart_svg, write_eval_csv, EvalResult, Task};
use sdm_core::occurrence::{aggregate_counts, load_occurrences, read_counts_csv, split_train_test, write_counts_csv, CellSample, Country};
use sdm_core::pseudoabsence::{self, run_strategy};
use sdm_core::raster::{dominant_class, patch_file_name, resize_patch, Modality, RasterPatch};
use sdm_core::testkit::generate_world;

use crate::config::PipelineConfig;
use crate::manifest::{write_manifest, Manifest};

// Offsets from the global seed so stages draw independent streams.
const SPLIT_SEED: u64 = 5;
const FOREST_SEED: u64 = 6;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path, hint: &str) -> Result<BufReader<File>> {
    if !path.exists() {
        bail!("missing input {} ({hint})", path.display());
    }
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn out_dir(cfg: &PipelineConfig) -> Result<&Path> {
    let dir = cfg.paths.output_dir.as_path();
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn model_stem(task: Task, modality: Modality) -> String {
    format!("{task}_{modality}")
}

// ---------------------------------------------------------------- inputs

pub fn load_grid(cfg: &PipelineConfig) -> Result<Grid> {
    let path = cfg.paths.out("grid.csv");
    Grid::read_csv(open(&path, "run `sdm grid` first")?).with_context(|| format!("reading {}", path.display()))
}

pub fn load_covariates(cfg: &PipelineConfig) -> Result<CovariateTable> {
    let path = cfg.paths.covariates();
    CovariateTable::read_csv(open(&path, "set paths.covariates or run `sdm synth`")?)
        .with_context(|| format!("reading {}", path.display()))
}

fn covariates_of(cov: &CovariateTable, country: Country, key: CellKey) -> Result<CovariateVector> {
    cov.get(country, key)
        .cloned()
        .with_context(|| format!("no covariates for cell ({}, {}) in {country}", key.row, key.col))
}

fn cell_sample(grid: &Grid, key: CellKey) -> Result<sdm_core::geo::GridCell> {
    grid.cell(key)
        .copied()
        .with_context(|| format!("cell ({}, {}) is not on the grid", key.row, key.col))
}

/// Presence cells from `counts.csv` with covariates attached.
pub fn load_presences(cfg: &PipelineConfig, grid: &Grid, cov: &CovariateTable) -> Result<Vec<CellSample>> {
    let path = cfg.paths.out("counts.csv");
    let rows = read_counts_csv(open(&path, "run `sdm grid` first")?).with_context(|| format!("reading {}", path.display()))?;
    rows.into_iter()
        .map(|r| {
            let key = CellKey { row: r.row, col: r.col };
            let mut s = CellSample::presence(cell_sample(grid, key)?, r.country, r.count);
            s.covariates = covariates_of(cov, r.country, key)?;
            Ok(s)
        })
        .collect()
}

/// Pseudo-absence cells from `pseudoabsences.csv` with covariates attached.
pub fn load_pseudo_absences(cfg: &PipelineConfig, grid: &Grid, cov: &CovariateTable) -> Result<Vec<CellSample>> {
    let path = cfg.paths.out("pseudoabsences.csv");
    let rows = pseudoabsence::read_csv(open(&path, "run `sdm pseudoabs` first")?)
        .with_context(|| format!("reading {}", path.display()))?;
    // the file's country is the anchoring presence's; the sample takes the cell's own
    let owner: BTreeMap<CellKey, Country> = cov.iter().map(|((c, k), _)| (*k, *c)).collect();
    rows.into_iter()
        .map(|r| {
            let key = CellKey { row: r.row, col: r.col };
            let country = *owner
                .get(&key)
                .with_context(|| format!("no covariates for cell ({}, {})", key.row, key.col))?;
            let mut s = CellSample::pseudo_absence(cell_sample(grid, key)?, country);
            s.covariates = covariates_of(cov, country, key)?;
            Ok(s)
        })
        .collect()
}

pub fn patch_path(cfg: &PipelineConfig, country: Country, key: CellKey, modality: Modality) -> PathBuf {
    cfg.paths.patches_dir().join(patch_file_name(country, key, modality))
}

fn load_patch(cfg: &PipelineConfig, country: Country, key: CellKey, modality: Modality) -> Result<RasterPatch> {
    let path = patch_path(cfg, country, key, modality);
    if !path.exists() {
        bail!("missing input {} (no {modality} patch for cell ({}, {}))", path.display(), key.row, key.col);
    }
    RasterPatch::load(&path).with_context(|| format!("reading {}", path.display()))
}

/// Dominant landcover class of every cell with covariates, read from its `lc` patch.
pub fn landcover_map(cfg: &PipelineConfig, cov: &CovariateTable) -> Result<BTreeMap<CellKey, u8>> {
    cov.iter()
        .map(|((country, key), _)| {
            let patch = load_patch(cfg, *country, *key, Modality::Landcover)?;
            Ok((*key, dominant_class(&patch)?))
        })
        .collect()
}

/// The same seeded split every stage sees.
pub fn split(cfg: &PipelineConfig, samples: &[CellSample]) -> Result<(Vec<CellSample>, Vec<CellSample>)> {
    Ok(split_train_test(samples, 1.0 - cfg.train.test_ratio, cfg.seed.wrapping_add(SPLIT_SEED))?)
}

pub struct Balanced {
    pub train: Oversampled,
    pub test: Vec<CellSample>,
    pub weights: ClassWeights,
}

/// Split presences, then oversample and weight the training half as configured.
pub fn balance_presences(cfg: &PipelineConfig, presences: &[CellSample]) -> Result<Balanced> {
    let (tr, test) = split(cfg, presences)?;
    let train = if cfg.balance.oversample {
        adaptive_oversample(&tr, &cfg.oversample_config())?
    } else {
        Oversampled {
            origin: vec![Origin::Original; tr.len()],
            source_index: (0..tr.len()).collect(),
            samples: tr,
            warnings: Vec::new(),
        }
    };
    let weights = if cfg.balance.class_weights {
        class_weights(&train.samples)?
    } else {
        ClassWeights::uniform()
    };
    Ok(Balanced { train, test, weights })
}

// ---------------------------------------------------------------- models

/// Everything besides the parameters needed to feed a saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub task: Task,
    pub modality: Modality,
    pub patch_size: usize,
    pub covariate_names: Vec<String>,
    pub scaler: Standardizer,
}

impl ModelMeta {
    pub fn sidecar(model: &Path) -> PathBuf {
        model.with_extension("toml")
    }

    pub fn load(model: &Path) -> Result<Self> {
        let path = Self::sidecar(model);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub struct LoadedModel {
    pub params: ModelParams,
    pub meta: ModelMeta,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    if !path.exists() {
        bail!("missing model {} (run `sdm train` first)", path.display());
    }
    let params = ModelParams::load(path).with_context(|| format!("reading {}", path.display()))?;
    let meta = ModelMeta::load(path)?;
    Ok(LoadedModel { params, meta })
}

/// Encodes cells for one model, loading each patch once.
struct Encoder<'a> {
    cfg: &'a PipelineConfig,
    meta: &'a ModelMeta,
    fusion: &'a sdm_core::fusion::FusionConfig,
    cache: BTreeMap<(Country, CellKey), FusionInput>,
}

impl<'a> Encoder<'a> {
    fn new(cfg: &'a PipelineConfig, meta: &'a ModelMeta, fusion: &'a sdm_core::fusion::FusionConfig) -> Self {
        Self {
            cfg,
            meta,
            fusion,
            cache: BTreeMap::new(),
        }
    }

    fn input(&mut self, country: Country, key: CellKey, cov: &CovariateVector) -> Result<FusionInput> {
        if let Some(x) = self.cache.get(&(country, key)) {
            return Ok(x.clone());
        }
        let raw = load_patch(self.cfg, country, key, self.meta.modality)?;
        let n = self.meta.patch_size;
        let patch = resize_patch(&raw, n, n)?;
        let scaled = CovariateVector::new(self.meta.scaler.transform(&cov.values));
        let x = FusionInput::encode(self.fusion, &patch, &scaled)?;
        self.cache.insert((country, key), x.clone());
        Ok(x)
    }

    fn samples(&mut self, cells: &[CellSample]) -> Result<Vec<TrainSample>> {
        let task = self.meta.task;
        cells
            .iter()
            .map(|s| {
                Ok(TrainSample {
                    input: self.input(s.country, s.key(), &s.covariates)?,
                    target: target_of(task, s),
                    country: s.country,
                })
            })
            .collect()
    }
}

fn target_of(task: Task, s: &CellSample) -> f64 {
    match task {
        Task::Regression => s.count as f64,
        Task::Classification => s.label_presence as u8 as f64,
    }
}

/// One held-out cell: `row,col,country,target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub row: usize,
    pub col: usize,
    pub country: Country,
    pub target: f64,
}

pub fn read_test_csv(path: &Path) -> Result<Vec<TestRow>> {
    let mut rdr = csv::Reader::from_reader(open(path, "run `sdm train` first")?);
    rdr.deserialize()
        .map(|r| r.with_context(|| format!("reading {}", path.display())))
        .collect()
}

fn write_test_csv(path: &Path, task: Task, cells: &[CellSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for s in cells {
        w.serialize(TestRow {
            row: s.cell.row,
            col: s.cell.col,
            country: s.country,
            target: target_of(task, s),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuild cell samples for test rows so they can be encoded.
fn cells_for_rows(grid: &Grid, cov: &CovariateTable, rows: &[TestRow], task: Task) -> Result<Vec<CellSample>> {
    rows.iter()
        .map(|r| {
            let key = CellKey { row: r.row, col: r.col };
            let cell = cell_sample(grid, key)?;
            ensure!(r.target >= 0.0, "test row ({}, {}) has negative target {}", r.row, r.col, r.target);
            let mut s = match task {
                Task::Regression => CellSample::presence(cell, r.country, r.target.round() as u32),
                Task::Classification => {
                    let mut s = CellSample::pseudo_absence(cell, r.country);
                    s.label_presence = r.target >= 0.5;
                    s
                }
            };
            s.covariates = covariates_of(cov, r.country, key)?;
            Ok(s)
        })
        .collect()
}

// ---------------------------------------------------------------- stages

/// Generate the synthetic world into `paths.data_dir`.
pub fn synth(cfg: &PipelineConfig) -> Result<Manifest> {
    let world = generate_world(&cfg.synth, cfg.seed)?;
    let dir = cfg.paths.data_dir.as_path();
    world.write_to_dir(dir).with_context(|| format!("writing world to {}", dir.display()))?;
    log::info!(
        "synthetic world: {} cells, {} records, {} occupied",
        world.cells.len(),
        world.records.len(),
        world.cells.iter().filter(|c| c.occupied()).count()
    );
    write_manifest(dir, "synth", cfg, &["occurrences.csv", "covariates.csv", "grid.csv", "truth.csv", "patches"])
}

/// Tile the study area and count occurrence records per cell.
pub fn grid(cfg: &PipelineConfig) -> Result<Manifest> {
    let dir = out_dir(cfg)?;
    let path = cfg.paths.occurrences();
    if !path.exists() {
        bail!("missing input {} (set paths.occurrences or run `sdm synth`)", path.display());
    }
    let loaded = load_occurrences(&path)?;
    let grid = make_grid(cfg.grid_bbox(), cfg.grid_spec()?)?;
    grid.write_csv(create(&dir.join("grid.csv"))?)?;
    for r in loaded.rejected.iter().take(10) {
        log::warn!("{}: line {}: {}", path.display(), r.line, r.reason);
    }
    let agg = aggregate_counts(&loaded.records, &grid);
    if agg.outside > 0 {
        log::warn!("{} records fall outside the grid", agg.outside);
    }
    write_counts_csv(&agg.samples, create(&dir.join("counts.csv"))?)?;
    log::info!(
        "grid: {} cells, {} presence cells from {} records ({} rejected)",
        grid.len(),
        agg.samples.len(),
        loaded.records.len(),
        loaded.rejected.len()
    );
    write_manifest(dir, "grid", cfg, &["grid.csv", "counts.csv"])
}

/// Generate pseudo-absences with the configured strategy.
pub fn pseudoabs(cfg: &PipelineConfig) -> Result<Manifest> {
    let dir = out_dir(cfg)?;
    let grid = load_grid(cfg)?;
    let cov = load_covariates(cfg)?;
    let presences = load_presences(cfg, &grid, &cov)?;
    let lc = landcover_map(cfg, &cov)?;
    let sel = run_strategy(cfg.pseudoabsence.strategy, &grid, &presences, &lc, &cfg.pseudoabsence_config())?;
    pseudoabsence::write_csv(&sel.points, create(&dir.join("pseudoabsences.csv"))?)?;
    log::info!(
        "{} pseudo-absences: {} candidates, {} accepted, {} requested, {} kept",
        cfg.pseudoabsence.strategy,
        sel.candidates,
        sel.accepted,
        sel.requested,
        sel.points.len()
    );
    write_manifest(dir, "pseudoabs", cfg, &["pseudoabsences.csv"])
}

/// Split presences and write the rebalanced training set and loss weights.
pub fn balance(cfg: &PipelineConfig) -> Result<Manifest> {
    let dir = out_dir(cfg)?;
    let grid = load_grid(cfg)?;
    let cov = load_covariates(cfg)?;
    let presences = load_presences(cfg, &grid, &cov)?;
    let b = balance_presences(cfg, &presences)?;
    write_balanced_csv(&b.train, create(&dir.join("balanced.csv"))?)?;

    let mut w = csv::Writer::from_writer(create(&dir.join("class_weights.csv"))?);
    w.write_record(["country", "weight"])?;
    for (c, v) in &b.weights.weights {
        w.write_record([c.to_string(), v.to_string()])?;
    }
    w.flush()?;

    let (tr, te) = split(cfg, &presences)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("split.csv"))?);
    w.write_record(["row", "col", "country", "count", "split"])?;
    for (set, name) in [(&tr, "train"), (&te, "test")] {
        for s in set {
            w.write_record([s.cell.row.to_string(), s.cell.col.to_string(), s.country.to_string(), s.count.to_string(), name.into()])?;
        }
    }
    w.flush()?;
    log::info!(
        "balance: {} train -> {} after oversampling, {} test",
        tr.len(),
        b.train.samples.len(),
        b.test.len()
    );
    write_manifest(dir, "balance", cfg, &["balanced.csv", "class_weights.csv", "split.csv"])
}

/// Train one fusion model. Regression learns counts on presence cells;
/// classification separates presences from pseudo-absences.
pub fn train_model(cfg: &PipelineConfig, task: Task, modality: Modality) -> Result<Manifest> {
    let dir = out_dir(cfg)?;
    let grid = load_grid(cfg)?;
    let cov = load_covariates(cfg)?;
    let presences = load_presences(cfg, &grid, &cov)?;

    let (train_cells, test_cells, weights) = match task {
        Task::Regression => {
            let b = balance_presences(cfg, &presences)?;
            (b.train.samples, b.test, b.weights)
        }
        Task::Classification => {
            let mut all = presences;
            all.extend(load_pseudo_absences(cfg, &grid, &cov)?);
            let (tr, te) = split(cfg, &all)?;
            let w = if cfg.balance.class_weights {
                class_weights(&tr)?
            } else {
                ClassWeights::uniform()
            };
            (tr, te, w)
        }
    };

    let meta = ModelMeta {
        task,
        modality,
        patch_size: cfg.model.patch_size,
        covariate_names: cov.names().to_vec(),
        scaler: Standardizer::fit(train_cells.iter().map(|s| s.covariates.values.as_slice())),
    };
    let fusion = cfg.fusion_config(task, modality, cov.names().len());
    let mut enc = Encoder::new(cfg, &meta, &fusion);
    let train_set = enc.samples(&train_cells)?;
    let test_set = enc.samples(&test_cells)?;
    log::info!("training {task}/{modality}: {} train, {} test samples", train_set.len(), test_set.len());

    let params = ModelParams::init(fusion.clone())?;
    let trained = train(params, &train_set, &test_set, &cfg.train_config(weights))?;
    if let Some(last) = trained.trace.last() {
        log::info!(
            "epoch {}: train {:.4}, test {}, loss {:.5}",
            last.epoch,
            last.train_metric,
            last.test_metric.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into()),
            last.loss
        );
    }

    let stem = model_stem(task, modality);
    let model_path = dir.join(format!("model_{stem}.bin"));
    trained.params.save(&model_path)?;
    std::fs::write(ModelMeta::sidecar(&model_path), toml::to_string(&meta)?)?;
    write_trace_csv(&trained.trace, create(&dir.join(format!("trace_{stem}.csv")))?)?;
    write_test_csv(&dir.join(format!("test_{task}.csv")), task, &test_cells)?;
    let names = [
        format!("model_{stem}.bin"),
        format!("model_{stem}.toml"),
        format!("trace_{stem}.csv"),
        format!("test_{task}.csv"),
    ];
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    write_manifest(dir, &format!("train_{stem}"), cfg, &refs)
}

/// Predictions of one model on the given test rows.
fn predict_rows(cfg: &PipelineConfig, grid: &Grid, cov: &CovariateTable, model: &LoadedModel, rows: &[TestRow]) -> Result<(Vec<TrainSample>, Vec<f64>)> {
    let cells = cells_for_rows(grid, cov, rows, model.meta.task)?;
    let fusion = model.params.config().clone();
    let mut enc = Encoder::new(cfg, &model.meta, &fusion);
    let samples = enc.samples(&cells)?;
    let pred = model.params.predict_batch(&samples)?;
    Ok((samples, pred))
}

/// Predictions of the model saved at `model` for each test row.
pub fn predict_test_rows(cfg: &PipelineConfig, model: &Path, rows: &[TestRow]) -> Result<Vec<f64>> {
    let grid = load_grid(cfg)?;
    let cov = load_covariates(cfg)?;
    Ok(predict_rows(cfg, &grid, &cov, &load_model(model)?, rows)?.1)
}

/// Fit ensemble weights over the three regression models on the held-out split.
pub fn ensemble(cfg: &PipelineConfig) -> Result<Manifest> {
    let dir = out_dir(cfg)?;
    let grid = load_grid(cfg)?;
    let cov = load_covariates(cfg)?;
    let rows = read_test_csv(&dir.join("test_regression.csv"))?;
    let truth: Vec<f64> = rows.iter().map(|r| r.target).collect();
    let mut cols = Vec::new();
    for m in Modality::ALL {
        let model = load_model(&dir.join(format!("model_{}.bin", model_stem(Task::Regression, m))))?;
        cols.push(predict_rows(cfg, &grid, &cov, &model, &rows)?.1);
    }
    let preds: Vec<[f64; 3]> = (0..rows.len()).map(|i| [cols[0][i], cols[1][i], cols[2][i]]).collect();
    let opt = optimize_weights(&preds, &truth)?;
    opt.weights.write_csv(create(&dir.join("ensemble_weights.csv"))?)?;
    log::info!(
        "ensemble weights {:?}: MAE {:.4} (initial {:.4})",
        opt.weights.as_array(),
        opt.mae,
        ensemble_mae(EnsembleWeights::initial().as_array(), &preds, &truth)
    );
    write_manifest(dir, "ensemble", cfg, &["ensemble_weights.csv"])
}

/// Rank covariates by random-forest importance against `ln(1 + count)`.
pub fn rfe_stage(cfg: &PipelineConfig) -> Result<Manifest> {
    let dir = out_dir(cfg)?;
    let grid = load_grid(cfg)?;
    let cov = load_covariates(cfg)?;
    let presences = load_presences(cfg, &grid, &cov)?;
    let x: Vec<Vec<f64>> = presences.iter().map(|s| s.covariates.values.clone()).collect();
    let y: Vec<f64> = presences.iter().map(|s| (s.count as f64).ln_1p()).collect();
    let forest = ForestConfig {
        n_trees: cfg.rfe.n_trees,
        max_depth: cfg.rfe.max_depth,
        seed: cfg.seed.wrapping_add(FOREST_SEED),
        ..Default::default()
    };
    let keep = cfg.rfe.keep.min(cov.names().len());
    let res = rfe(&x, &y, cov.names(), keep, &forest)?;
    res.report.write_csv(create(&dir.join("importance.csv"))?)?;
    res.write_eliminated_csv(create(&dir.join("rfe_eliminated.csv"))?)?;
    log::info!("rfe kept {:?}", res.report.names());
    write_manifest(dir, "rfe", cfg, &["importance.csv", "rfe_eliminated.csv"])
}

pub struct EvalReport {
    pub rows: Vec<(String, EvalResult)>,
    pub manifest: Manifest,
}

/// Score saved models on a test CSV. With ensemble weights and the three
/// regression modalities present, the weighted ensemble is scored as well.
pub fn eval(cfg: &PipelineConfig, models: &[PathBuf], data: &Path, weights: Option<&Path>) -> Result<EvalReport> {
    ensure!(!models.is_empty(), "eval needs at least one --model");
    let dir = out_dir(cfg)?;
    let grid = load_grid(cfg)?;
    let cov = load_covariates(cfg)?;
    let rows = read_test_csv(data)?;
    ensure!(!rows.is_empty(), "{} has no rows", data.display());

    let mut results = Vec::new();
    let mut by_modality: BTreeMap<Modality, Vec<f64>> = BTreeMap::new();
    let mut task = None;
    for path in models {
        let model = load_model(path)?;
        if let Some(t) = task {
            ensure!(t == model.meta.task, "cannot compare {t} and {} models in one eval", model.meta.task);
        }
        task = Some(model.meta.task);
        let (samples, pred) = predict_rows(cfg, &grid, &cov, &model, &rows)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        results.push((name, evaluate(&model.params, &samples)?));
        if model.meta.task == Task::Regression {
            by_modality.insert(model.meta.modality, pred);
        }
    }
    if let Some(wpath) = weights {
        let w = EnsembleWeights::read_csv(open(wpath, "run `sdm ensemble` first")?)?;
        ensure!(
            by_modality.len() == 3,
            "ensemble evaluation needs the rgb, lc and ndvi regression models"
        );
        let cols: Vec<&Vec<f64>> = Modality::ALL.iter().map(|m| &by_modality[m]).collect();
        let wa = w.as_array();
        let pred: Vec<f64> = (0..rows.len())
            .map(|i| wa[0] * cols[0][i] + wa[1] * cols[1][i] + wa[2] * cols[2][i])
            .collect();
        let truth: Vec<f64> = rows.iter().map(|r| r.target).collect();
        results.push(("ensemble".into(), EvalResult::regression(&truth, &pred)?));
    }

    write_eval_csv(&results, create(&dir.join("eval.csv"))?)?;
    let (title, bars): (&str, Vec<(String, f64)>) = match task.unwrap_or(Task::Regression) {
        Task::Regression => ("Test MAE", results.iter().map(|(n, r)| (n.clone(), r.mae.unwrap_or(0.0))).collect()),
        Task::Classification => (
            "Test ROC AUC",
            results.iter().map(|(n, r)| (n.clone(), r.auc.or(r.accuracy).unwrap_or(0.0))).collect(),
        ),
    };
    std::fs::write(dir.join("eval.svg"), bar_chart_svg(title, &bars))?;
    let manifest = write_manifest(dir, "eval", cfg, &["eval.csv", "eval.svg"])?;
    Ok(EvalReport { rows: results, manifest })
}

/// Plain-text matrix of one band of a patch file.
pub fn dump_band(patch: &Path, band: Option<&str>) -> Result<String> {
    let p = RasterPatch::load(patch).with_context(|| format!("reading {}", patch.display()))?;
    let name = match band {
        Some(b) => b.to_string(),
        None => p.bands().first().map(|b| b.name.clone()).context("patch has no bands")?,
    };
    Ok(p.dump_band(&name)?)
}
