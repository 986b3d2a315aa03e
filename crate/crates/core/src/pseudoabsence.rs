//! Pseudo-absence imputation: the distance + landcover method and the two
//! baselines it is compared against (uniform random selection and
//! distance-only selection).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_distance, CellKey, GeoPoint, Grid, GridCell};
use crate::occurrence::{CellSample, Country};

#[derive(Debug, Error)]
pub enum PseudoAbsenceError {
    #[error("no presence cells given")]
    NoPresences,
    #[error("no landcover class for cell ({}, {})", .0.row, .0.col)]
    MissingLandcover(CellKey),
    #[error("no distance threshold configured for {0}")]
    MissingThreshold(Country),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty result: none of {candidates} presence-free cells satisfied the {strategy} criteria")]
    NoneAccepted { strategy: Strategy, candidates: usize },
    #[error("pseudo-absence csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Within the country threshold of the nearest presence and sharing its landcover class.
    Proposed,
    /// Uniform over presence-free cells.
    Random,
    /// Within the country threshold only.
    Distance,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Proposed => "proposed",
            Strategy::Random => "random",
            Strategy::Distance => "distance",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = PseudoAbsenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "proposed" => Ok(Strategy::Proposed),
            "random" => Ok(Strategy::Random),
            "distance" => Ok(Strategy::Distance),
            other => Err(PseudoAbsenceError::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoAbsenceConfig {
    pub thresholds_km: BTreeMap<Country, f64>,
    /// Pseudo-absences per presence cell. `f64::INFINITY` keeps every accepted candidate.
    pub ratio: f64,
    pub seed: u64,
}

impl Default for PseudoAbsenceConfig {
    fn default() -> Self {
        Self {
            thresholds_km: BTreeMap::from([
                (Country::Australia, 10.0),
                (Country::SouthAfrica, 20.0),
                (Country::CostaRica, 28.0),
            ]),
            ratio: 1.0,
            seed: 0,
        }
    }
}

impl PseudoAbsenceConfig {
    pub fn validate(&self) -> Result<(), PseudoAbsenceError> {
        if let Some((c, t)) = self.thresholds_km.iter().find(|(_, t)| !(**t > 0.0)) {
            return Err(PseudoAbsenceError::Config(format!("threshold for {c} must be positive, got {t}")));
        }
        if !(self.ratio > 0.0) {
            return Err(PseudoAbsenceError::Config(format!("ratio must be positive, got {}", self.ratio)));
        }
        Ok(())
    }

    pub fn threshold(&self, country: Country) -> Result<f64, PseudoAbsenceError> {
        self.thresholds_km
            .get(&country)
            .copied()
            .ok_or(PseudoAbsenceError::MissingThreshold(country))
    }

    fn target_count(&self, n_presences: usize) -> usize {
        if self.ratio.is_infinite() {
            usize::MAX
        } else {
            (self.ratio * n_presences as f64).round() as usize
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoAbsencePoint {
    pub cell: GridCell,
    /// Country of the anchoring (nearest) presence cell.
    pub country: Country,
    pub anchor_presence: GeoPoint,
    pub distance_km: f64,
    pub landcover_class: u8,
    pub strategy: Strategy,
}

impl PseudoAbsencePoint {
    pub fn to_sample(&self) -> CellSample {
        CellSample::pseudo_absence(self.cell, self.country)
    }
}

/// Selected points plus the bookkeeping of how they were chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub points: Vec<PseudoAbsencePoint>,
    /// Presence-free cells considered.
    pub candidates: usize,
    /// Candidates passing the strategy's predicates, before subsampling.
    pub accepted: usize,
    /// `ratio * |presences|`, saturating for an infinite ratio.
    pub requested: usize,
    pub warning: Option<String>,
}

struct Candidate {
    cell: GridCell,
    anchor: usize,
    distance_km: f64,
}

fn nearest_presence(p: GeoPoint, presences: &[CellSample]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, s) in presences.iter().enumerate() {
        let d = haversine_distance(p, s.cell.centroid);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn landcover_of(landcover: &BTreeMap<CellKey, u8>, key: CellKey) -> Result<u8, PseudoAbsenceError> {
    landcover
        .get(&key)
        .copied()
        .ok_or(PseudoAbsenceError::MissingLandcover(key))
}

fn select(
    strategy: Strategy,
    grid: &Grid,
    presences: &[CellSample],
    landcover: &BTreeMap<CellKey, u8>,
    cfg: &PseudoAbsenceConfig,
) -> Result<Selection, PseudoAbsenceError> {
    cfg.validate()?;
    if presences.is_empty() {
        return Err(PseudoAbsenceError::NoPresences);
    }
    let occupied: BTreeSet<CellKey> = presences.iter().map(|s| s.key()).collect();
    let free: Vec<&GridCell> = grid.cells().iter().filter(|c| !occupied.contains(&c.key())).collect();

    let evaluated: Vec<Result<Option<Candidate>, PseudoAbsenceError>> = free
        .par_iter()
        .map(|cell| {
            let (anchor, distance_km) = nearest_presence(cell.centroid, presences);
            let cand = Candidate {
                cell: **cell,
                anchor,
                distance_km,
            };
            if strategy == Strategy::Random {
                return Ok(Some(cand));
            }
            let threshold = cfg.threshold(presences[anchor].country)?;
            if !(distance_km > 0.0 && distance_km <= threshold) {
                return Ok(None);
            }
            if strategy == Strategy::Proposed
                && landcover_of(landcover, cell.key())? != landcover_of(landcover, presences[anchor].key())?
            {
                return Ok(None);
            }
            Ok(Some(cand))
        })
        .collect();
    let mut accepted = Vec::new();
    for e in evaluated {
        if let Some(c) = e? {
            accepted.push(c);
        }
    }

    let requested = cfg.target_count(presences.len());
    let n_accepted = accepted.len();
    let mut warning = None;
    if accepted.is_empty() {
        if strategy != Strategy::Random {
            return Err(PseudoAbsenceError::NoneAccepted {
                strategy,
                candidates: free.len(),
            });
        }
        warning = Some("no presence-free cells in the grid".to_string());
    } else if n_accepted < requested && cfg.ratio.is_finite() {
        warning = Some(format!(
            "only {n_accepted} of {requested} requested pseudo-absences available; returning all"
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    accepted.shuffle(&mut rng);
    accepted.truncate(requested);
    accepted.sort_by_key(|c| c.cell.key());

    let points = accepted
        .into_iter()
        .map(|c| {
            Ok(PseudoAbsencePoint {
                landcover_class: landcover_of(landcover, c.cell.key())?,
                cell: c.cell,
                country: presences[c.anchor].country,
                anchor_presence: presences[c.anchor].cell.centroid,
                distance_km: c.distance_km,
                strategy,
            })
        })
        .collect::<Result<Vec<_>, PseudoAbsenceError>>()?;
    if let Some(w) = &warning {
        log::warn!("{strategy} pseudo-absences: {w}");
    }
    Ok(Selection {
        points,
        candidates: free.len(),
        accepted: n_accepted,
        requested,
        warning,
    })
}

/// Presence-free cells whose centroid lies within the country threshold of the
/// nearest presence centroid and whose dominant landcover class matches it.
pub fn generate_pseudo_absences(
    grid: &Grid,
    presences: &[CellSample],
    landcover: &BTreeMap<CellKey, u8>,
    cfg: &PseudoAbsenceConfig,
) -> Result<Selection, PseudoAbsenceError> {
    select(Strategy::Proposed, grid, presences, landcover, cfg)
}

/// Uniform sample of presence-free cells.
pub fn random_selection(
    grid: &Grid,
    presences: &[CellSample],
    landcover: &BTreeMap<CellKey, u8>,
    cfg: &PseudoAbsenceConfig,
) -> Result<Selection, PseudoAbsenceError> {
    select(Strategy::Random, grid, presences, landcover, cfg)
}

/// Presence-free cells within the country threshold, landcover ignored.
pub fn distance_criteria(
    grid: &Grid,
    presences: &[CellSample],
    landcover: &BTreeMap<CellKey, u8>,
    cfg: &PseudoAbsenceConfig,
) -> Result<Selection, PseudoAbsenceError> {
    select(Strategy::Distance, grid, presences, landcover, cfg)
}

pub fn run_strategy(
    strategy: Strategy,
    grid: &Grid,
    presences: &[CellSample],
    landcover: &BTreeMap<CellKey, u8>,
    cfg: &PseudoAbsenceConfig,
) -> Result<Selection, PseudoAbsenceError> {
    select(strategy, grid, presences, landcover, cfg)
}

/// `row,col,country,distance_km,landcover_class,strategy`
pub fn write_csv<W: Write>(points: &[PseudoAbsencePoint], out: W) -> Result<(), PseudoAbsenceError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "country", "distance_km", "landcover_class", "strategy"])?;
    for p in points {
        w.write_record([
            p.cell.row.to_string(),
            p.cell.col.to_string(),
            p.country.to_string(),
            p.distance_km.to_string(),
            p.landcover_class.to_string(),
            p.strategy.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One row of a pseudo-absence file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoAbsenceRow {
    pub row: usize,
    pub col: usize,
    pub country: Country,
    pub distance_km: f64,
    pub landcover_class: u8,
    pub strategy: Strategy,
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<PseudoAbsenceRow>, PseudoAbsenceError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{make_grid, BoundingBox, GridSpec};

    // 3x3 grid of ~5.48 km cells; neighbours are ~5.5 km apart, two cells ~11 km.
    fn setup() -> (Grid, Vec<CellSample>, BTreeMap<CellKey, u8>) {
        let side = GridSpec::default().lat_step_deg();
        let grid = make_grid(
            BoundingBox::new(0.0, 0.0, 3.0 * side, 3.0 * GridSpec::default().lon_step_deg(1.5 * side)).unwrap(),
            GridSpec::default(),
        )
        .unwrap();
        let anchor = *grid.cell(CellKey { row: 0, col: 0 }).unwrap();
        let presences = vec![CellSample::presence(anchor, Country::Australia, 3)];
        let mut lc = BTreeMap::new();
        for c in grid.cells() {
            lc.insert(c.key(), 5);
        }
        (grid, presences, lc)
    }

    fn keys(sel: &Selection) -> Vec<(usize, usize)> {
        sel.points.iter().map(|p| (p.cell.row, p.cell.col)).collect()
    }

    fn all() -> PseudoAbsenceConfig {
        PseudoAbsenceConfig {
            ratio: f64::INFINITY,
            ..Default::default()
        }
    }

    #[test]
    fn near_same_class_accepted_far_or_other_class_rejected() {
        let (grid, pres, mut lc) = setup();
        let origin = pres[0].cell.centroid;
        let d = |r, c| haversine_distance(origin, grid.cell(CellKey { row: r, col: c }).unwrap().centroid);
        assert!(d(0, 1) < 6.0 && d(0, 1) > 5.0);
        assert!(d(0, 2) > 10.0 && d(0, 2) < 15.0);
        // (1,0) is within range but carries another class
        lc.insert(CellKey { row: 1, col: 0 }, 3);

        let sel = generate_pseudo_absences(&grid, &pres, &lc, &all()).unwrap();
        assert_eq!(keys(&sel), vec![(0, 1), (1, 1)]);
        for p in &sel.points {
            assert!(p.distance_km <= 10.0);
            assert_eq!(p.landcover_class, 5);
            assert_eq!(p.anchor_presence, origin);
        }

        let dist = distance_criteria(&grid, &pres, &lc, &all()).unwrap();
        assert_eq!(keys(&dist), vec![(0, 1), (1, 0), (1, 1)]);
        assert_eq!(dist.candidates, 8);
    }

    #[test]
    fn landcover_mismatch_everywhere_is_an_explicit_empty_result() {
        let (grid, pres, mut lc) = setup();
        for c in grid.cells() {
            if c.key() != pres[0].key() {
                lc.insert(c.key(), 1);
            }
        }
        assert!(matches!(
            generate_pseudo_absences(&grid, &pres, &lc, &all()),
            Err(PseudoAbsenceError::NoneAccepted { strategy: Strategy::Proposed, candidates: 8 })
        ));
    }

    #[test]
    fn larger_country_threshold_reaches_further() {
        let (grid, mut pres, lc) = setup();
        pres[0].country = Country::SouthAfrica;
        let sel = distance_criteria(&grid, &pres, &lc, &all()).unwrap();
        // 20 km covers the whole 3x3 block
        assert_eq!(sel.points.len(), 8);
        assert!(sel.points.iter().all(|p| p.country == Country::SouthAfrica));
    }

    #[test]
    fn random_selection_counts_and_determinism() {
        let grid = make_grid(BoundingBox::new(0.0, 0.0, 0.4, 0.4).unwrap(), GridSpec::default()).unwrap();
        let pres: Vec<CellSample> = grid.cells()[..10]
            .iter()
            .map(|c| CellSample::presence(*c, Country::Australia, 1))
            .collect();
        let lc: BTreeMap<_, _> = grid.cells().iter().map(|c| (c.key(), 2u8)).collect();
        let cfg = PseudoAbsenceConfig {
            seed: 4,
            ..Default::default()
        };
        let a = random_selection(&grid, &pres, &lc, &cfg).unwrap();
        assert_eq!(a.points.len(), 10);
        assert!(a.warning.is_none());
        let b = random_selection(&grid, &pres, &lc, &cfg).unwrap();
        assert_eq!(a, b);
        let occupied: BTreeSet<_> = pres.iter().map(|s| s.key()).collect();
        assert!(a.points.iter().all(|p| !occupied.contains(&p.cell.key())));
        let other = random_selection(&grid, &pres, &lc, &PseudoAbsenceConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(keys(&a), keys(&other));
    }

    #[test]
    fn random_selection_without_free_cells_warns() {
        let grid = make_grid(BoundingBox::new(0.0, 0.0, 0.05, 0.05).unwrap(), GridSpec::default()).unwrap();
        let pres: Vec<CellSample> = grid
            .cells()
            .iter()
            .map(|c| CellSample::presence(*c, Country::CostaRica, 2))
            .collect();
        let lc: BTreeMap<_, _> = grid.cells().iter().map(|c| (c.key(), 0u8)).collect();
        let sel = random_selection(&grid, &pres, &lc, &PseudoAbsenceConfig::default()).unwrap();
        assert!(sel.points.is_empty());
        assert!(sel.warning.is_some());
    }

    #[test]
    fn subsample_respects_ratio() {
        let grid = make_grid(BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap(), GridSpec::default()).unwrap();
        let pres: Vec<CellSample> = grid
            .cells()
            .iter()
            .step_by(9)
            .map(|c| CellSample::presence(*c, Country::Australia, 1))
            .collect();
        let lc: BTreeMap<_, _> = grid.cells().iter().map(|c| (c.key(), (c.col % 2) as u8)).collect();
        let cfg = PseudoAbsenceConfig {
            ratio: 0.5,
            seed: 1,
            ..Default::default()
        };
        let sel = generate_pseudo_absences(&grid, &pres, &lc, &cfg).unwrap();
        assert!(sel.accepted > sel.requested);
        assert_eq!(sel.points.len(), (0.5 * pres.len() as f64).round() as usize);
    }

    #[test]
    fn missing_landcover_is_reported() {
        let (grid, pres, mut lc) = setup();
        lc.remove(&CellKey { row: 0, col: 1 });
        assert!(matches!(
            generate_pseudo_absences(&grid, &pres, &lc, &all()),
            Err(PseudoAbsenceError::MissingLandcover(CellKey { row: 0, col: 1 }))
        ));
        assert!(matches!(
            generate_pseudo_absences(&grid, &[], &lc, &all()),
            Err(PseudoAbsenceError::NoPresences)
        ));
    }

    #[test]
    fn csv_round_trip() {
        let (grid, pres, lc) = setup();
        let sel = distance_criteria(&grid, &pres, &lc, &all()).unwrap();
        let mut buf = Vec::new();
        write_csv(&sel.points, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("row,col,country,distance_km,landcover_class,strategy\n"));
        let rows = read_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), sel.points.len());
        assert_eq!(rows[0].strategy, Strategy::Distance);
        assert_eq!(rows[0].distance_km, sel.points[0].distance_km);
    }
}
