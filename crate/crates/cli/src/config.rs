//! Sectioned TOML pipeline configuration with `section.key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sdm_core::balance::{CountBin, OversampleConfig};
use sdm_core::fusion::{FusionConfig, ImageBranch, TabularBranch, TargetScale, TrainConfig};
use sdm_core::geo::{BoundingBox, GridSpec};
use sdm_core::metrics::Task;
use sdm_core::occurrence::Country;
use sdm_core::pseudoabsence::{PseudoAbsenceConfig, Strategy};
use sdm_core::raster::{Modality, N_LANDCOVER_CLASSES};
use sdm_core::testkit::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; every stage derives its own from it.
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub synth: WorldConfig,
    #[serde(default)]
    pub pseudoabsence: PseudoAbsenceSection,
    #[serde(default)]
    pub balance: BalanceSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub rfe: RfeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Where `synth` writes and where inputs are looked up by default.
    pub data_dir: PathBuf,
    pub occurrences: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub patches_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            occurrences: None,
            covariates: None,
            patches_dir: None,
            output_dir: "out".into(),
        }
    }
}

impl Paths {
    pub fn occurrences(&self) -> PathBuf {
        self.occurrences.clone().unwrap_or_else(|| self.data_dir.join("occurrences.csv"))
    }

    pub fn covariates(&self) -> PathBuf {
        self.covariates.clone().unwrap_or_else(|| self.data_dir.join("covariates.csv"))
    }

    pub fn patches_dir(&self) -> PathBuf {
        self.patches_dir.clone().unwrap_or_else(|| self.data_dir.join("patches"))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Study area; defaults to the synthetic world's box.
    pub bbox: Option<BoundingBox>,
    pub cell_area_km2: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            bbox: None,
            cell_area_km2: GridSpec::default().cell_area_km2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoAbsenceSection {
    pub strategy: Strategy,
    pub ratio: f64,
    pub thresholds_km: BTreeMap<Country, f64>,
}

impl Default for PseudoAbsenceSection {
    fn default() -> Self {
        let d = PseudoAbsenceConfig::default();
        Self {
            strategy: Strategy::Proposed,
            ratio: d.ratio,
            thresholds_km: d.thresholds_km,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceSection {
    pub oversample: bool,
    pub class_weights: bool,
    pub log_transform: bool,
    pub n_clusters: usize,
    pub target_per_bin: Option<usize>,
    pub count_bins: Vec<CountBin>,
}

impl Default for BalanceSection {
    fn default() -> Self {
        let d = OversampleConfig::default();
        Self {
            oversample: true,
            class_weights: true,
            log_transform: true,
            n_clusters: d.n_clusters,
            target_per_bin: d.target_per_bin,
            count_bins: d.count_bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Patches are resized to `patch_size × patch_size` before entering the network.
    pub patch_size: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub image_features: usize,
    pub tabular_hidden: Vec<usize>,
    pub tabular_features: usize,
    pub l2_lambda: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            patch_size: 8,
            conv_channels: vec![4],
            kernel: 3,
            pool: 2,
            image_features: 8,
            tabular_hidden: vec![16],
            tabular_features: 8,
            l2_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr_init: f64,
    pub lr_target: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of cells held out for testing.
    pub test_ratio: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr_init: 1e-3,
            lr_target: 3e-3,
            warmup_steps: 20,
            epochs: 20,
            batch_size: 16,
            test_ratio: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfeSection {
    pub keep: usize,
    pub n_trees: usize,
    pub max_depth: usize,
}

impl Default for RfeSection {
    fn default() -> Self {
        Self {
            keep: 5,
            n_trees: 100,
            max_depth: 8,
        }
    }
}

/// Input channels the network sees for a modality.
pub fn modality_channels(m: Modality) -> usize {
    match m {
        Modality::Rgb => 3,
        Modality::Landcover => N_LANDCOVER_CLASSES,
        Modality::Ndvi => 1,
    }
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            paths: Paths::default(),
            grid: GridSection::default(),
            synth: WorldConfig::default(),
            pseudoabsence: PseudoAbsenceSection::default(),
            balance: BalanceSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            rfe: RfeSection::default(),
        }
    }

    /// Parse TOML text, applying `key.path=value` overrides first.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let merged = toml::to_string(&table)?;
        let cfg: Self = toml::from_str(&merged).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text, overrides).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train.test_ratio > 0.0 && self.train.test_ratio < 1.0) {
            bail!("train.test_ratio must lie in (0, 1), got {}", self.train.test_ratio);
        }
        if self.model.patch_size == 0 {
            bail!("model.patch_size must be >= 1");
        }
        if self.rfe.keep == 0 {
            bail!("rfe.keep must be >= 1");
        }
        self.pseudoabsence_config().validate().context("pseudoabsence section")?;
        self.oversample_config().validate().context("balance section")?;
        self.synth.validate().context("synth section")?;
        self.train_config(Default::default()).validate().context("train section")?;
        self.grid_spec().context("grid.cell_area_km2")?;
        Ok(())
    }

    pub fn grid_bbox(&self) -> BoundingBox {
        self.grid.bbox.unwrap_or(self.synth.bbox)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        Ok(GridSpec::new(self.grid.cell_area_km2)?)
    }

    pub fn pseudoabsence_config(&self) -> PseudoAbsenceConfig {
        PseudoAbsenceConfig {
            thresholds_km: self.pseudoabsence.thresholds_km.clone(),
            ratio: self.pseudoabsence.ratio,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn oversample_config(&self) -> OversampleConfig {
        OversampleConfig {
            n_clusters: self.balance.n_clusters,
            target_per_bin: self.balance.target_per_bin,
            count_bins: self.balance.count_bins.clone(),
            seed: self.seed.wrapping_add(2),
        }
    }

    pub fn fusion_config(&self, task: Task, modality: Modality, n_covariates: usize) -> FusionConfig {
        let m = &self.model;
        FusionConfig {
            image: ImageBranch {
                in_channels: modality_channels(modality),
                height: m.patch_size,
                width: m.patch_size,
                conv_channels: m.conv_channels.clone(),
                kernel: m.kernel,
                pool: m.pool,
                out_features: m.image_features,
            },
            tabular: TabularBranch {
                in_features: n_covariates,
                hidden: m.tabular_hidden.clone(),
                out_features: m.tabular_features,
            },
            task,
            target_scale: if task == Task::Regression && !self.balance.log_transform {
                TargetScale::Raw
            } else {
                TargetScale::Log1p
            },
            l2_lambda: m.l2_lambda,
            seed: self.seed.wrapping_add(3),
        }
    }

    pub fn train_config(&self, class_weights: sdm_core::balance::ClassWeights) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr_init: t.lr_init,
            lr_target: t.lr_target,
            warmup_steps: t.warmup_steps,
            epochs: t.epochs,
            batch_size: t.batch_size,
            class_weights,
            seed: self.seed.wrapping_add(4),
            ..Default::default()
        }
    }
}

/// Set `a.b.c = value` in a TOML table; the value is parsed as TOML and falls
/// back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override `{key}`: `{p}` is not a section"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
