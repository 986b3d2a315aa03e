//! Rebalancing of skewed count data: per-country loss weights, cluster-stratified
//! oversampling of rare count ranges, and the `ln(1 + y)` target transform.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariates::Standardizer;
use crate::kmeans::{kmeans, KMeansConfig};
use crate::occurrence::{CellSample, Country};

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("no samples")]
    Empty,
    #[error("need at least {need} samples for {need} clusters, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("invalid oversampling config: {0}")]
    Config(String),
    #[error("covariate length mismatch: sample {index} has {got}, expected {expected}")]
    CovariateDim { index: usize, got: usize, expected: usize },
    #[error("log transform needs y >= 0, got {0}")]
    Negative(f64),
    #[error("balanced csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Loss multipliers per country.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: BTreeMap<Country, f64>,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self {
            weights: Country::ALL.iter().map(|c| (*c, 1.0)).collect(),
        }
    }

    /// Weight for `country`; countries never seen get 1.
    pub fn get(&self, country: Country) -> f64 {
        self.weights.get(&country).copied().unwrap_or(1.0)
    }
}

/// `weight_x = (N_total / N_x) * C` with `C` the number of countries present.
pub fn class_weights(samples: &[CellSample]) -> Result<ClassWeights, BalanceError> {
    class_weights_from_counts(samples.iter().map(|s| s.country))
}

pub fn class_weights_from_counts(countries: impl IntoIterator<Item = Country>) -> Result<ClassWeights, BalanceError> {
    let mut per: BTreeMap<Country, usize> = BTreeMap::new();
    for c in countries {
        *per.entry(c).or_default() += 1;
    }
    if per.is_empty() {
        return Err(BalanceError::Empty);
    }
    let total: usize = per.values().sum();
    let n_classes = per.len() as f64;
    Ok(ClassWeights {
        weights: per
            .into_iter()
            .map(|(c, n)| (c, total as f64 / n as f64 * n_classes))
            .collect(),
    })
}

pub fn log_transform(y: f64) -> Result<f64, BalanceError> {
    if !(y >= 0.0) {
        return Err(BalanceError::Negative(y));
    }
    Ok(y.ln_1p())
}

pub fn inverse_log_transform(z: f64) -> f64 {
    z.exp_m1()
}

/// Inclusive count range; `hi = None` is open-ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountBin {
    pub lo: u32,
    pub hi: Option<u32>,
}

impl CountBin {
    pub fn new(lo: u32, hi: Option<u32>) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, count: u32) -> bool {
        count >= self.lo && self.hi.is_none_or(|h| count <= h)
    }
}

impl fmt::Display for CountBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hi {
            Some(h) => write!(f, "{}-{}", self.lo, h),
            None => write!(f, "{}+", self.lo),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OversampleConfig {
    pub n_clusters: usize,
    /// Frequency each bin is grown toward. `None` uses the largest bin's frequency.
    pub target_per_bin: Option<usize>,
    pub count_bins: Vec<CountBin>,
    pub seed: u64,
}

impl Default for OversampleConfig {
    fn default() -> Self {
        Self {
            n_clusters: 8,
            target_per_bin: None,
            count_bins: vec![
                CountBin::new(1, Some(10)),
                CountBin::new(11, Some(40)),
                CountBin::new(41, Some(100)),
                CountBin::new(101, None),
            ],
            seed: 0,
        }
    }
}

impl OversampleConfig {
    pub fn validate(&self) -> Result<(), BalanceError> {
        let bad = |m: String| Err(BalanceError::Config(m));
        if self.n_clusters == 0 {
            return bad("n_clusters must be at least 1".into());
        }
        if self.target_per_bin == Some(0) {
            return bad("target_per_bin must be positive".into());
        }
        if self.count_bins.is_empty() {
            return bad("at least one count bin is required".into());
        }
        for (i, b) in self.count_bins.iter().enumerate() {
            if b.hi.is_some_and(|h| h < b.lo) {
                return bad(format!("bin {b} is reversed"));
            }
            if let Some(next) = self.count_bins.get(i + 1) {
                match b.hi {
                    Some(h) if h < next.lo => {}
                    _ => return bad(format!("bins {b} and {next} overlap or are out of order")),
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Original,
    Oversampled,
}

impl Origin {
    pub fn as_str(&self) -> &'static str {
        match self {
            Origin::Original => "original",
            Origin::Oversampled => "oversampled",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Oversampled {
    pub samples: Vec<CellSample>,
    pub origin: Vec<Origin>,
    /// Index into the input for every output row.
    pub source_index: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Per-bin sample counts, in bin order.
pub fn bin_frequencies(samples: &[CellSample], bins: &[CountBin]) -> Vec<usize> {
    bins.iter()
        .map(|b| samples.iter().filter(|s| b.contains(s.count)).count())
        .collect()
}

/// Grow under-populated count bins with cluster-stratified copies.
///
/// For every bin whose frequency is below the target, the bin's samples are
/// clustered on z-scored covariates and members are appended round-robin
/// across clusters, nearest-to-centroid first, until the bin reaches the
/// target or every member has been appended once.
pub fn adaptive_oversample(samples: &[CellSample], cfg: &OversampleConfig) -> Result<Oversampled, BalanceError> {
    cfg.validate()?;
    if samples.len() < cfg.n_clusters {
        return Err(BalanceError::TooFewSamples {
            need: cfg.n_clusters,
            got: samples.len(),
        });
    }
    let dim = samples[0].covariates.len();
    if let Some((index, s)) = samples.iter().enumerate().find(|(_, s)| s.covariates.len() != dim) {
        return Err(BalanceError::CovariateDim {
            index,
            got: s.covariates.len(),
            expected: dim,
        });
    }
    let scaler = Standardizer::fit(samples.iter().map(|s| s.covariates.values.as_slice()));
    let features: Vec<Vec<f64>> = samples.iter().map(|s| scaler.transform(&s.covariates.values)).collect();

    let freq = bin_frequencies(samples, &cfg.count_bins);
    let target = cfg.target_per_bin.unwrap_or_else(|| freq.iter().copied().max().unwrap_or(0));

    let mut out = Oversampled {
        samples: samples.to_vec(),
        origin: vec![Origin::Original; samples.len()],
        source_index: (0..samples.len()).collect(),
        warnings: Vec::new(),
    };

    for (bi, bin) in cfg.count_bins.iter().enumerate() {
        let n = freq[bi];
        if n == 0 || n >= target {
            continue;
        }
        let members: Vec<usize> = (0..samples.len()).filter(|&i| bin.contains(samples[i].count)).collect();
        let mut k = cfg.n_clusters;
        if k > members.len() {
            out.warnings.push(format!(
                "bin {bin}: {k} clusters requested for {} samples; using {}",
                members.len(),
                members.len()
            ));
            k = members.len();
        }
        let points: Vec<Vec<f64>> = members.iter().map(|&i| features[i].clone()).collect();
        let km = kmeans(
            &points,
            &KMeansConfig {
                k,
                seed: cfg.seed.wrapping_add(bi as u64),
                ..Default::default()
            },
        );

        // members of each cluster, nearest to its centroid first
        let mut queues: Vec<Vec<(f64, usize)>> = vec![Vec::new(); k];
        for (j, &label) in km.labels.iter().enumerate() {
            let d = crate::kmeans::sq_dist(&points[j], &km.centroids[label]);
            queues[label].push((d, members[j]));
        }
        for q in &mut queues {
            q.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }

        let mut deficit = target - n;
        let mut round = 0;
        while deficit > 0 {
            let mut took_any = false;
            for q in &queues {
                if deficit == 0 {
                    break;
                }
                if let Some(&(_, idx)) = q.get(round) {
                    out.samples.push(samples[idx].clone());
                    out.origin.push(Origin::Oversampled);
                    out.source_index.push(idx);
                    deficit -= 1;
                    took_any = true;
                }
            }
            if !took_any {
                break;
            }
            round += 1;
        }
        if deficit > 0 {
            out.warnings.push(format!(
                "bin {bin}: candidates exhausted {deficit} short of target {target}"
            ));
        }
    }
    for w in &out.warnings {
        log::warn!("oversampling: {w}");
    }
    Ok(out)
}

/// `row,col,country,count,origin`
pub fn write_balanced_csv<W: Write>(set: &Oversampled, out: W) -> Result<(), BalanceError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "country", "count", "origin"])?;
    for (s, o) in set.samples.iter().zip(&set.origin) {
        w.write_record([
            s.cell.row.to_string(),
            s.cell.col.to_string(),
            s.country.to_string(),
            s.count.to_string(),
            o.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::CovariateVector;
    use crate::geo::{make_grid, BoundingBox, GridSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn samples_with(counts: &[(u32, usize)], seed: u64) -> Vec<CellSample> {
        let grid = make_grid(BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), GridSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut cell = 0;
        for &(count, n) in counts {
            for _ in 0..n {
                let mut s = CellSample::presence(grid.cells()[cell], Country::Australia, count);
                s.covariates = CovariateVector::new((0..4).map(|_| rng.random_range(-1.0..1.0) + count as f64).collect());
                out.push(s);
                cell += 1;
            }
        }
        out
    }

    fn countries(au: usize, sa: usize, cr: usize) -> Vec<Country> {
        let mut v = vec![Country::Australia; au];
        v.extend(vec![Country::SouthAfrica; sa]);
        v.extend(vec![Country::CostaRica; cr]);
        v
    }

    #[test]
    fn class_weights_match_hand_arithmetic() {
        let w = class_weights_from_counts(countries(82, 11, 7)).unwrap();
        // 100 / n * 3
        assert!((w.get(Country::Australia) - 300.0 / 82.0).abs() < 1e-9);
        assert!((w.get(Country::Australia) - 3.658536585).abs() < 1e-9);
        assert!((w.get(Country::SouthAfrica) - 27.272727273).abs() < 1e-9);
        assert!((w.get(Country::CostaRica) - 42.857142857).abs() < 1e-9);
        assert!(w.get(Country::Australia) < w.get(Country::SouthAfrica));
    }

    #[test]
    fn class_weight_edge_cases() {
        let single = class_weights_from_counts(countries(17, 0, 0)).unwrap();
        assert_eq!(single.get(Country::Australia), 1.0);
        let equal = class_weights_from_counts(countries(10, 10, 10)).unwrap();
        for c in Country::ALL {
            // (30 / 10) * 3
            assert_eq!(equal.get(c), 9.0);
        }
        assert!(matches!(class_weights(&[]), Err(BalanceError::Empty)));
    }

    #[test]
    fn log_transform_values() {
        assert_eq!(log_transform(0.0).unwrap(), 0.0);
        assert!((log_transform(std::f64::consts::E - 1.0).unwrap() - 1.0).abs() < 1e-15);
        for y in [0.0, 1.0, 10.0, 1000.0] {
            assert!((inverse_log_transform(log_transform(y).unwrap()) - y).abs() < 1e-9);
        }
        assert!(matches!(log_transform(-1.0), Err(BalanceError::Negative(_))));
    }

    #[test]
    fn minority_bin_grows_majority_untouched() {
        let samples = samples_with(&[(5, 100), (45, 10)], 1);
        let cfg = OversampleConfig {
            n_clusters: 3,
            target_per_bin: Some(50),
            count_bins: vec![CountBin::new(1, Some(10)), CountBin::new(40, Some(50))],
            seed: 7,
        };
        let out = adaptive_oversample(&samples, &cfg).unwrap();
        let before = bin_frequencies(&samples, &cfg.count_bins);
        let after = bin_frequencies(&out.samples, &cfg.count_bins);
        assert_eq!(before, vec![100, 10]);
        assert_eq!(after[0], 100);
        // growth capped at one extra copy per member
        assert_eq!(after[1], 20);
        assert!(after[1].abs_diff(50) <= before[1].abs_diff(50));
        // output keeps the input as a prefix
        assert_eq!(&out.samples[..samples.len()], samples.as_slice());
        let mut uses: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &out.source_index {
            *uses.entry(i).or_default() += 1;
        }
        assert!(uses.values().all(|&u| u <= 2));
        assert!(out.warnings.iter().any(|w| w.contains("exhausted")));
    }

    #[test]
    fn partial_deficit_takes_nearest_to_centroid_first() {
        let samples = samples_with(&[(5, 30), (50, 12)], 2);
        let cfg = OversampleConfig {
            n_clusters: 1,
            target_per_bin: Some(15),
            count_bins: vec![CountBin::new(1, Some(10)), CountBin::new(11, None)],
            seed: 0,
        };
        let out = adaptive_oversample(&samples, &cfg).unwrap();
        assert_eq!(out.samples.len(), 45);
        // with one cluster the centroid is the bin mean
        let members: Vec<usize> = (30..42).collect();
        let scaler = Standardizer::fit(samples.iter().map(|s| s.covariates.values.as_slice()));
        let z: Vec<Vec<f64>> = members.iter().map(|&i| scaler.transform(&samples[i].covariates.values)).collect();
        let mean: Vec<f64> = (0..4).map(|d| z.iter().map(|r| r[d]).sum::<f64>() / z.len() as f64).collect();
        let mut by_dist: Vec<(f64, usize)> = members
            .iter()
            .zip(&z)
            .map(|(&i, r)| (r.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum(), i))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        let expected: Vec<usize> = by_dist[..3].iter().map(|p| p.1).collect();
        assert_eq!(&out.source_index[42..], expected.as_slice());
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let samples = samples_with(&[(3, 20), (20, 20), (60, 20)], 3);
        let out = adaptive_oversample(&samples, &OversampleConfig::default()).unwrap();
        assert_eq!(out.samples, samples);
        assert!(out.origin.iter().all(|o| *o == Origin::Original));
    }

    #[test]
    fn too_many_clusters_is_reduced_with_warning() {
        let samples = samples_with(&[(3, 40), (20, 2)], 4);
        let out = adaptive_oversample(&samples, &OversampleConfig::default()).unwrap();
        assert!(out.warnings.iter().any(|w| w.contains("using 2")));
        assert_eq!(bin_frequencies(&out.samples, &OversampleConfig::default().count_bins)[1], 4);
    }

    #[test]
    fn bad_configs_rejected() {
        let samples = samples_with(&[(3, 4)], 5);
        assert!(matches!(
            adaptive_oversample(&samples, &OversampleConfig::default()),
            Err(BalanceError::TooFewSamples { need: 8, got: 4 })
        ));
        let overlapping = OversampleConfig {
            count_bins: vec![CountBin::new(1, Some(10)), CountBin::new(5, None)],
            ..Default::default()
        };
        assert!(overlapping.validate().is_err());
    }

    #[test]
    fn balanced_csv_has_origin_column() {
        let samples = samples_with(&[(5, 10), (50, 2)], 6);
        let cfg = OversampleConfig {
            n_clusters: 1,
            ..Default::default()
        };
        let out = adaptive_oversample(&samples, &cfg).unwrap();
        let mut buf = Vec::new();
        write_balanced_csv(&out, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("row,col,country,count,origin\n"));
        assert_eq!(text.lines().filter(|l| l.ends_with("oversampled")).count(), 2);
    }

    proptest! {
        #[test]
        fn weighted_class_sizes_sum_to_total_times_c_squared(au in 1usize..200, sa in 0usize..50, cr in 0usize..50) {
            let w = class_weights_from_counts(countries(au, sa, cr)).unwrap();
            let c = w.weights.len() as f64;
            let total = (au + sa + cr) as f64;
            let sum: f64 = [(Country::Australia, au), (Country::SouthAfrica, sa), (Country::CostaRica, cr)]
                .iter()
                .filter(|(_, n)| *n > 0)
                .map(|(k, n)| *n as f64 * w.get(*k))
                .sum();
            prop_assert!((sum - total * c * c).abs() < 1e-9 * total * c * c);
        }

        #[test]
        fn oversampling_only_adds(seed in 0u64..50, a in 8usize..40, b in 1usize..20, c in 0usize..10) {
            let samples = samples_with(&[(4, a), (30, b), (70, c)], seed);
            let cfg = OversampleConfig { n_clusters: 2, seed, ..Default::default() };
            let out = adaptive_oversample(&samples, &cfg).unwrap();
            prop_assert_eq!(&out.samples[..samples.len()], samples.as_slice());
            let before = bin_frequencies(&samples, &cfg.count_bins);
            let after = bin_frequencies(&out.samples, &cfg.count_bins);
            let target = *before.iter().max().unwrap();
            for (x, y) in before.iter().zip(&after) {
                prop_assert!(y.abs_diff(target) <= x.abs_diff(target));
                prop_assert!(*y <= 2 * *x);
            }
        }
    }
}
