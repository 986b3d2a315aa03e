//! Synthetic worlds with known ground truth, and brute-force oracles.
//!
//! A world is one grid split into country bands (west to east). Each cell gets
//! standard-normal climate covariates, a landcover class from a Voronoi
//! partition, suitability `s = logistic(intercept + β·x)` and a true count
//! `~ Poisson(λ·s)`. Only surveyed cells emit occurrence records; the survey
//! probability depends on the landcover class, which is how sampling bias is
//! injected.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariates::{CovariateTable, CovariateVector, CLIMATE_FEATURES};
use crate::ensemble::ensemble_mae;
use crate::geo::{make_grid, BoundingBox, CellKey, GeoError, GeoPoint, Grid, GridCell, GridSpec};
use crate::occurrence::{aggregate_counts, write_occurrences, CellSample, Country, OccurrenceRecord};
use crate::raster::{ndvi, patch_file_name, Band, Modality, RasterPatch, LANDCOVER, N_LANDCOVER_CLASSES};

#[derive(Debug, Error)]
pub enum TestkitError {
    #[error("lattice step {0} does not divide 1")]
    Step(f64),
    #[error("invalid world config: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("writing world: {0}")]
    Write(String),
}

/// Nominal (red, green, blue, nir) reflectance per landcover class.
const CLASS_SPECTRA: [[f32; 4]; N_LANDCOVER_CLASSES] = [
    [0.05, 0.08, 0.10, 0.03],
    [0.04, 0.08, 0.04, 0.45],
    [0.08, 0.12, 0.06, 0.35],
    [0.05, 0.09, 0.06, 0.25],
    [0.10, 0.14, 0.07, 0.40],
    [0.15, 0.16, 0.10, 0.30],
    [0.25, 0.24, 0.22, 0.28],
    [0.30, 0.28, 0.25, 0.33],
    [0.80, 0.80, 0.85, 0.70],
    [0.60, 0.60, 0.60, 0.60],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub bbox: BoundingBox,
    pub cell_area_km2: f64,
    /// Country bands from west to east with their share of the columns.
    pub country_shares: Vec<(Country, f64)>,
    /// One coefficient per climate covariate.
    pub beta: Vec<f64>,
    pub intercept: f64,
    /// Standard deviation of an unobserved per-cell term added inside the
    /// logistic; it makes counts overdispersed given the observed covariates.
    pub latent_sd: f64,
    /// Poisson rate at suitability 1.
    pub lambda: f64,
    /// Number of Voronoi seeds for the landcover map.
    pub landcover_regions: usize,
    /// Landcover classes the seeds draw from (uniformly).
    pub landcover_classes: Vec<u8>,
    /// Probability that a cell of each landcover class was surveyed.
    pub visit_prob: Vec<f64>,
    pub patch_size: usize,
    /// Fraction of landcover patch pixels replaced by a random class.
    pub landcover_noise: f64,
    pub species: String,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            bbox: BoundingBox {
                min_lat: -20.0,
                min_lon: 130.0,
                max_lat: -19.0,
                max_lon: 131.5,
            },
            cell_area_km2: 30.0,
            country_shares: vec![(Country::Australia, 0.6), (Country::SouthAfrica, 0.25), (Country::CostaRica, 0.15)],
            beta: vec![1.5, -1.0, 0.8, 0.0, 0.0, 0.5, 0.0, 0.0, -0.5, 0.0],
            intercept: 0.0,
            latent_sd: 0.0,
            lambda: 20.0,
            landcover_regions: 40,
            landcover_classes: (0..N_LANDCOVER_CLASSES as u8).collect(),
            visit_prob: vec![1.0; N_LANDCOVER_CLASSES],
            patch_size: 8,
            landcover_noise: 0.1,
            species: "synthetic".into(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), TestkitError> {
        let bad = |m: String| Err(TestkitError::Config(m));
        if self.beta.len() != CLIMATE_FEATURES.len() {
            return bad(format!("beta needs {} coefficients, got {}", CLIMATE_FEATURES.len(), self.beta.len()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.country_shares.is_empty() || self.country_shares.iter().any(|(_, s)| !(*s > 0.0)) {
            return bad("country shares must be positive".into());
        }
        if self.visit_prob.len() != N_LANDCOVER_CLASSES || self.visit_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!("visit_prob needs {N_LANDCOVER_CLASSES} probabilities in [0, 1]"));
        }
        if self.landcover_classes.is_empty() || self.landcover_classes.iter().any(|&c| c as usize >= N_LANDCOVER_CLASSES) {
            return bad("landcover_classes must be non-empty class ids 0-9".into());
        }
        if self.landcover_regions == 0 || self.patch_size == 0 {
            return bad("landcover_regions and patch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.landcover_noise) {
            return bad("landcover_noise must lie in [0, 1]".into());
        }
        if !self.beta.iter().all(|b| b.is_finite()) || !self.intercept.is_finite() {
            return bad("beta and intercept must be finite".into());
        }
        if !(self.latent_sd >= 0.0 && self.latent_sd.is_finite()) {
            return bad(format!("latent_sd must be finite and >= 0, got {}", self.latent_sd));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldCell {
    pub cell: GridCell,
    pub country: Country,
    pub covariates: CovariateVector,
    pub landcover: u8,
    pub suitability: f64,
    pub true_count: u32,
    pub surveyed: bool,
}

impl WorldCell {
    pub fn occupied(&self) -> bool {
        self.true_count > 0
    }

    /// Records this cell emits.
    pub fn observed_count(&self) -> u32 {
        if self.surveyed {
            self.true_count
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub grid: Grid,
    /// Same order as `grid.cells()`.
    pub cells: Vec<WorldCell>,
    pub records: Vec<OccurrenceRecord>,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn linear_predictor(cfg: &WorldConfig, x: &[f64]) -> f64 {
    cfg.intercept + cfg.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}

/// Suitability explained by the observed covariates (the latent term at zero).
pub fn suitability(cfg: &WorldConfig, x: &[f64]) -> f64 {
    logistic(linear_predictor(cfg, x))
}

pub fn generate_world(cfg: &WorldConfig, seed: u64) -> Result<SyntheticWorld, TestkitError> {
    cfg.validate()?;
    let grid = make_grid(cfg.bbox, GridSpec::new(cfg.cell_area_km2)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let seeds: Vec<(f64, f64, u8)> = (0..cfg.landcover_regions)
        .map(|_| {
            let lat = rng.random_range(cfg.bbox.min_lat..cfg.bbox.max_lat);
            let lon = rng.random_range(cfg.bbox.min_lon..cfg.bbox.max_lon);
            let class = cfg.landcover_classes[rng.random_range(0..cfg.landcover_classes.len())];
            (lat, lon, class)
        })
        .collect();
    let total_share: f64 = cfg.country_shares.iter().map(|s| s.1).sum();
    let n_cols = grid.n_cols() as f64;

    let mut cells = Vec::with_capacity(grid.len());
    for cell in grid.cells() {
        let frac = (cell.col as f64 + 0.5) / n_cols * total_share;
        let mut acc = 0.0;
        let country = cfg
            .country_shares
            .iter()
            .find(|(_, s)| {
                acc += s;
                frac <= acc
            })
            .unwrap_or(cfg.country_shares.last().expect("validated non-empty"))
            .0;
        let c = cell.centroid;
        let landcover = seeds
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - c.lat()).powi(2) + (a.1 - c.lon()).powi(2);
                let db = (b.0 - c.lat()).powi(2) + (b.1 - c.lon()).powi(2);
                da.total_cmp(&db)
            })
            .expect("at least one seed")
            .2;
        let x: Vec<f64> = (0..cfg.beta.len()).map(|_| rng.sample(StandardNormal)).collect();
        let latent = if cfg.latent_sd > 0.0 {
            cfg.latent_sd * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let s = logistic(linear_predictor(cfg, &x) + latent);
        let rate = cfg.lambda * s;
        let true_count = if rate > 0.0 {
            Poisson::new(rate).expect("positive finite rate").sample(&mut rng) as u32
        } else {
            0
        };
        let surveyed = rng.random::<f64>() < cfg.visit_prob[landcover as usize];
        cells.push(WorldCell {
            cell: *cell,
            country,
            covariates: CovariateVector::new(x),
            landcover,
            suitability: s,
            true_count,
            surveyed,
        });
    }

    let mut records = Vec::new();
    for wc in &cells {
        let b = wc.cell.bbox;
        // stay strictly inside so edge conventions never move a record
        let (dlat, dlon) = ((b.max_lat - b.min_lat) * 1e-6, (b.max_lon - b.min_lon) * 1e-6);
        for _ in 0..wc.observed_count() {
            let lat = rng.random_range(b.min_lat + dlat..b.max_lat - dlat);
            let lon = rng.random_range(b.min_lon + dlon..b.max_lon - dlon);
            let (month, day) = (rng.random_range(1..=12), rng.random_range(1..=28));
            records.push(OccurrenceRecord {
                species: cfg.species.clone(),
                location: GeoPoint::new(lat, lon)?,
                timestamp: format!("2021-{month:02}-{day:02}"),
                country: wc.country,
            });
        }
    }
    Ok(SyntheticWorld {
        config: cfg.clone(),
        seed,
        grid,
        cells,
        records,
    })
}

impl SyntheticWorld {
    pub fn total_true_count(&self) -> u64 {
        self.cells.iter().map(|c| c.true_count as u64).sum()
    }

    pub fn total_observed_count(&self) -> u64 {
        self.cells.iter().map(|c| c.observed_count() as u64).sum()
    }

    pub fn index_of(&self, key: CellKey) -> Option<usize> {
        let i = key.row * self.grid.n_cols() + key.col;
        (self.cells.get(i)?.cell.key() == key).then_some(i)
    }

    pub fn landcover_map(&self) -> BTreeMap<CellKey, u8> {
        self.cells.iter().map(|c| (c.cell.key(), c.landcover)).collect()
    }

    pub fn covariate_table(&self) -> CovariateTable {
        let mut t = CovariateTable::climate();
        for c in &self.cells {
            t.insert(c.country, c.cell.key(), c.covariates.clone());
        }
        t
    }

    /// Presence cells as seen through the occurrence records, covariates attached.
    pub fn presences(&self) -> Vec<CellSample> {
        aggregate_counts(&self.records, &self.grid)
            .samples
            .into_iter()
            .map(|mut s| {
                let i = self.index_of(s.key()).expect("records lie inside the grid");
                s.covariates = self.cells[i].covariates.clone();
                s
            })
            .collect()
    }

    fn patch_rng(&self, index: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 * 4 + stream + 1);
        rng
    }

    /// Red, green, blue and NIR bands for a cell.
    pub fn spectral_patch(&self, index: usize) -> RasterPatch {
        let wc = &self.cells[index];
        let n = self.config.patch_size;
        let mut rng = self.patch_rng(index, 0);
        let lc = self.landcover_patch(index);
        let classes = &lc.bands()[0].pixels;
        let moisture = (0.02 * wc.covariates.values[3]) as f32;
        let names = ["red", "green", "blue", "nir"];
        let mut bands: Vec<Band> = names
            .iter()
            .map(|name| Band {
                name: name.to_string(),
                pixels: Vec::with_capacity(n * n),
            })
            .collect();
        for &class in classes {
            let spec = CLASS_SPECTRA[class as usize];
            for (b, base) in bands.iter_mut().zip(spec) {
                let noise: f64 = rng.sample(StandardNormal);
                let shift = if b.name == "nir" { moisture } else { -moisture * 0.5 };
                b.pixels.push((base + shift + 0.02 * noise as f32).clamp(0.0, 1.0));
            }
        }
        RasterPatch::new(n, n, bands).expect("generated bands are well-formed")
    }

    pub fn landcover_patch(&self, index: usize) -> RasterPatch {
        let n = self.config.patch_size;
        let mut rng = self.patch_rng(index, 1);
        let class = self.cells[index].landcover as f32;
        let pixels = (0..n * n)
            .map(|_| {
                if rng.random::<f64>() < self.config.landcover_noise {
                    rng.random_range(0..N_LANDCOVER_CLASSES) as f32
                } else {
                    class
                }
            })
            .collect();
        RasterPatch::single(LANDCOVER, n, n, pixels).expect("class ids are valid")
    }

    pub fn patch(&self, index: usize, modality: Modality) -> RasterPatch {
        match modality {
            Modality::Landcover => self.landcover_patch(index),
            Modality::Rgb => {
                let s = self.spectral_patch(index);
                let bands = s.bands().iter().filter(|b| b.name != "nir").cloned().collect();
                RasterPatch::new(s.height(), s.width(), bands).expect("subset of valid bands")
            }
            Modality::Ndvi => ndvi(&self.spectral_patch(index)).expect("spectral patch has red and nir"),
        }
    }

    /// `row,col,country,landcover,suitability,true_count,surveyed`
    pub fn write_truth_csv<W: Write>(&self, out: W) -> Result<(), TestkitError> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| TestkitError::Write(e.to_string());
        w.write_record(["row", "col", "country", "landcover", "suitability", "true_count", "surveyed"])
            .map_err(err)?;
        for c in &self.cells {
            w.write_record([
                c.cell.row.to_string(),
                c.cell.col.to_string(),
                c.country.to_string(),
                c.landcover.to_string(),
                c.suitability.to_string(),
                c.true_count.to_string(),
                (c.surveyed as u8).to_string(),
            ])
            .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `occurrences.csv`, `covariates.csv`, `grid.csv`, `truth.csv` and
    /// one patch file per cell and modality under `patches/`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<(), TestkitError> {
        let dir = dir.as_ref();
        let patches = dir.join("patches");
        std::fs::create_dir_all(&patches)?;
        let create = |name: &str| -> Result<std::io::BufWriter<std::fs::File>, TestkitError> {
            Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
        };
        let werr = |e: &dyn std::fmt::Display| TestkitError::Write(e.to_string());
        write_occurrences(&self.records, create("occurrences.csv")?).map_err(|e| werr(&e))?;
        self.covariate_table()
            .write_csv(create("covariates.csv")?)
            .map_err(|e| werr(&e))?;
        self.grid.write_csv(create("grid.csv")?)?;
        self.write_truth_csv(create("truth.csv")?)?;
        for (i, c) in self.cells.iter().enumerate() {
            for m in Modality::ALL {
                let name = patch_file_name(c.country, c.cell.key(), m);
                self.patch(i, m).save(patches.join(name)).map_err(|e| werr(&e))?;
            }
        }
        Ok(())
    }
}

/// Exhaustive search over the simplex lattice `{(i, j, m-i-j) / m}` with `m = 1/step`.
/// Returns the first lattice point (in `i`, then `j` order) reaching the minimum MAE.
pub fn oracle_simplex_grid(preds: &[[f64; 3]], truth: &[f64], step: f64) -> Result<([f64; 3], f64, usize), TestkitError> {
    let m = (1.0 / step).round();
    if !(step > 0.0) || (1.0 / step - m).abs() > 1e-9 || m < 1.0 {
        return Err(TestkitError::Step(step));
    }
    let m = m as usize;
    let mut best = ([0.0; 3], f64::INFINITY);
    let mut evaluated = 0;
    for i in 0..=m {
        for j in 0..=m - i {
            let w = [i as f64 / m as f64, j as f64 / m as f64, (m - i - j) as f64 / m as f64];
            let f = ensemble_mae(w, preds, truth);
            evaluated += 1;
            if f < best.1 {
                best = (w, f);
            }
        }
    }
    Ok((best.0, best.1, evaluated))
}
