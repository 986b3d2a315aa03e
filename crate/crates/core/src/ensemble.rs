//! Weighted-average ensemble of three modality models and its MAE-optimal
//! weights on the probability simplex.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;

/// Starting point of the weight search.
pub const INITIAL_WEIGHTS: [f64; 3] = [0.3, 0.3, 0.4];
/// Column order of prediction matrices.
pub const MODEL_NAMES: [&str; 3] = ["rgb", "lc", "ndvi"];

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("weights must be non-negative with a positive sum, got {0:?}")]
    BadWeights([f64; 3]),
    #[error("no samples to fit ensemble weights on")]
    Empty,
    #[error("length mismatch: {0} prediction rows vs {1} truths")]
    Length(usize, usize),
    #[error("non-finite prediction or truth at row {0}")]
    NotFinite(usize),
    #[error("weights csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("weights csv: missing model `{0}`")]
    MissingModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    w: [f64; 3],
}

impl EnsembleWeights {
    /// Weights in `[0, 1]` summing to 1 within `1e-9`.
    pub fn new(w: [f64; 3]) -> Result<Self, EnsembleError> {
        let sum: f64 = w.iter().sum();
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
            return Err(EnsembleError::BadWeights(w));
        }
        Ok(Self { w })
    }

    pub fn initial() -> Self {
        Self { w: INITIAL_WEIGHTS }
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.w
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EnsembleError> {
        let mut wr = csv::Writer::from_writer(out);
        wr.write_record(["model", "weight"])?;
        for (name, w) in MODEL_NAMES.iter().zip(self.w) {
            wr.write_record([name.to_string(), w.to_string()])?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, EnsembleError> {
        let mut rdr = csv::Reader::from_reader(input);
        let mut w = [f64::NAN; 3];
        for rec in rdr.deserialize() {
            let (name, weight): (String, f64) = rec?;
            if let Some(i) = MODEL_NAMES.iter().position(|m| *m == name.trim()) {
                w[i] = weight;
            }
        }
        if let Some(i) = w.iter().position(|v| v.is_nan()) {
            return Err(EnsembleError::MissingModel(MODEL_NAMES[i].to_string()));
        }
        Self::new(w)
    }
}

/// `(w_a P_a + w_b P_b + w_c P_c) / (w_a + w_b + w_c)`.
pub fn ensemble_predict(w: [f64; 3], preds: [f64; 3]) -> Result<f64, EnsembleError> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|v| *v < 0.0 || !v.is_finite()) || sum <= 0.0 {
        return Err(EnsembleError::BadWeights(w));
    }
    Ok(w.iter().zip(preds).map(|(a, b)| a * b).sum::<f64>() / sum)
}

/// MAE of the ensemble prediction for weights already on the simplex.
pub fn ensemble_mae(w: [f64; 3], preds: &[[f64; 3]], truth: &[f64]) -> f64 {
    preds
        .iter()
        .zip(truth)
        .map(|(p, t)| (w[0] * p[0] + w[1] * p[1] + w[2] * p[2] - t).abs())
        .sum::<f64>()
        / truth.len() as f64
}

/// Euclidean projection onto `{w >= 0, sum w = 1}`.
pub fn project_to_simplex(v: [f64; 3]) -> [f64; 3] {
    let mut u = v;
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut w = v.map(|x| (x - theta).max(0.0));
    // clean up rounding so the sum is 1 to machine precision
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

#[derive(Debug, Clone)]
pub struct OptimizerSettings {
    pub initial_step: f64,
    pub max_iter: usize,
    pub min_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            initial_step: 0.05,
            max_iter: 500,
            min_step: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimized {
    pub weights: EnsembleWeights,
    pub mae: f64,
    /// Objective after each iteration, starting with the initial weights.
    pub trace: Vec<f64>,
}

fn validate(preds: &[[f64; 3]], truth: &[f64]) -> Result<(), EnsembleError> {
    if preds.len() != truth.len() {
        return Err(EnsembleError::Length(preds.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if let Some(i) = (0..truth.len()).find(|&i| !truth[i].is_finite() || preds[i].iter().any(|v| !v.is_finite())) {
        return Err(EnsembleError::NotFinite(i));
    }
    Ok(())
}

fn subgradient(w: [f64; 3], preds: &[[f64; 3]], truth: &[f64]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for (p, t) in preds.iter().zip(truth) {
        let r = w[0] * p[0] + w[1] * p[1] + w[2] * p[2] - t;
        let s = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        for k in 0..3 {
            g[k] += s * p[k];
        }
    }
    let n = truth.len() as f64;
    g.map(|x| x / n)
}

/// Minimise ensemble MAE over the simplex with projected subgradient steps,
/// starting from [`INITIAL_WEIGHTS`]. Columns are `(rgb, lc, ndvi)` predictions.
pub fn optimize_weights(preds: &[[f64; 3]], truth: &[f64]) -> Result<Optimized, EnsembleError> {
    optimize_weights_with(preds, truth, &OptimizerSettings::default())
}

pub fn optimize_weights_with(
    preds: &[[f64; 3]],
    truth: &[f64],
    settings: &OptimizerSettings,
) -> Result<Optimized, EnsembleError> {
    validate(preds, truth)?;
    let mut w = INITIAL_WEIGHTS;
    let mut best = ensemble_mae(w, preds, truth);
    let mut trace = vec![best];
    let mut step = settings.initial_step;
    for _ in 0..settings.max_iter {
        if step < settings.min_step {
            break;
        }
        let g = subgradient(w, preds, truth);
        // only the component along the simplex plane moves the iterate
        let mean = (g[0] + g[1] + g[2]) / 3.0;
        let d = g.map(|x| x - mean);
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let cand = project_to_simplex([0, 1, 2].map(|k| w[k] - step * d[k] / norm));
        let f = ensemble_mae(cand, preds, truth);
        if f < best {
            w = cand;
            best = f;
        } else {
            step *= 0.5;
        }
        trace.push(best);
    }
    // Subgradient descent stalls on the kinks of the MAE surface; finish with an
    // exact nested line minimisation and keep whichever point is better.
    let mut candidates = vec![refine_exact(preds, truth)];
    for k in 0..3 {
        let mut v = [0.0; 3];
        v[k] = 1.0;
        candidates.push(v);
    }
    for v in candidates {
        let f = ensemble_mae(v, preds, truth);
        if f < best {
            w = v;
            best = f;
        }
    }
    if trace.last() != Some(&best) {
        trace.push(best);
    }
    Ok(Optimized {
        weights: EnsembleWeights::new(w).expect("projection stays on the simplex"),
        mae: best,
        trace,
    })
}

/// For fixed `a`, minimise `sum |c_i + b d_i|` over `b in [0, 1 - a]` where
/// `w = (a, b, 1 - a - b)`. The unconstrained minimiser is the `|d|`-weighted
/// median of the breakpoints `-c_i / d_i`; convexity lets us clamp it.
fn best_b(a: f64, preds: &[[f64; 3]], truth: &[f64], scratch: &mut Vec<(f64, f64)>) -> (f64, f64) {
    let hi = (1.0 - a).max(0.0);
    scratch.clear();
    for (p, t) in preds.iter().zip(truth) {
        let c = a * (p[0] - p[2]) + p[2] - t;
        let d = p[1] - p[2];
        if d != 0.0 {
            scratch.push((-c / d, d.abs()));
        }
    }
    let b = if scratch.is_empty() {
        0.0
    } else {
        scratch.sort_by(|x, y| x.0.total_cmp(&y.0));
        let half = scratch.iter().map(|x| x.1).sum::<f64>() / 2.0;
        let mut cum = 0.0;
        let mut m = scratch[scratch.len() - 1].0;
        for &(t, wt) in scratch.iter() {
            cum += wt;
            if cum >= half {
                m = t;
                break;
            }
        }
        m.clamp(0.0, hi)
    };
    let w = [a, b, (1.0 - a - b).max(0.0)];
    (b, ensemble_mae(w, preds, truth))
}

/// Golden-section search over `a` of the (convex) partial minimum in `b`.
fn refine_exact(preds: &[[f64; 3]], truth: &[f64]) -> [f64; 3] {
    let mut scratch = Vec::with_capacity(truth.len());
    let mut g = |a: f64| best_b(a, preds, truth, &mut scratch).1;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (g(x1), g(x2));
    for _ in 0..80 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = g(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = g(x2);
        }
    }
    let mut best = (f64::INFINITY, 0.0);
    for a in [0.0, 0.5 * (lo + hi), 1.0] {
        let f = g(a);
        if f < best.0 {
            best = (f, a);
        }
    }
    let a = best.1;
    let b = best_b(a, preds, truth, &mut scratch).0;
    project_to_simplex([a, b, 1.0 - a - b])
}

/// Same as [`metrics::mae`] over ensemble predictions, for callers holding columns.
pub fn mae_for(w: EnsembleWeights, preds: &[[f64; 3]], truth: &[f64]) -> Result<f64, EnsembleError> {
    validate(preds, truth)?;
    let yhat: Vec<f64> = preds
        .iter()
        .map(|p| ensemble_predict(w.as_array(), *p))
        .collect::<Result<_, _>>()?;
    Ok(metrics::mae(truth, &yhat).expect("lengths validated"))
}
