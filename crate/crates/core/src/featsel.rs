//! Random-forest regression importances and recursive feature elimination.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatselError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("need at least one feature")]
    NoFeatures,
    #[error("row {row} has {got} features, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("{0} rows but {1} targets")]
    Length(usize, usize),
    #[error("non-finite value in row {0}")]
    NotFinite(usize),
    #[error("keep must lie in 1..={features}, got {keep}")]
    Keep { keep: usize, features: usize },
    #[error("{names} feature names for {features} features")]
    Names { names: usize, features: usize },
    #[error("report csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Draw a bootstrap sample per tree; off means every tree sees all rows.
    pub bootstrap: bool,
    /// Bootstrap sample size as a fraction of the rows.
    pub bootstrap_fraction: f64,
    /// Features tried per split; `None` means `ceil(F / 3)`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 8,
            min_samples_split: 2,
            bootstrap: true,
            bootstrap_fraction: 1.0,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    max_depth: usize,
    min_split: usize,
    mtry: usize,
    nodes: Vec<Node>,
    importance: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn sse(sum: f64, sq: f64, n: f64) -> f64 {
    (sq - sum * sum / n).max(0.0)
}

impl TreeBuilder<'_> {
    fn build(&mut self, rows: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = rows.len() as f64;
        let (sum, sq) = rows.iter().fold((0.0, 0.0), |(s, q), &r| (s + self.y[r], q + self.y[r] * self.y[r]));
        let mean = sum / n;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(mean));
        let parent_sse = sse(sum, sq, n);
        if depth >= self.max_depth || rows.len() < self.min_split || parent_sse <= 1e-12 * n.max(1.0) {
            return id;
        }
        let Some(best) = self.best_split(rows, parent_sse, rng) else {
            return id;
        };
        self.importance[best.feature] += best.gain;
        // partition in place; left holds values <= threshold
        let mut mid = 0;
        for i in 0..rows.len() {
            if self.x[rows[i]][best.feature] <= best.threshold {
                rows.swap(i, mid);
                mid += 1;
            }
        }
        let (l, r) = rows.split_at_mut(mid);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&self, rows: &[usize], parent_sse: f64, rng: &mut ChaCha8Rng) -> Option<BestSplit> {
        let n_features = self.x[0].len();
        let mut features: Vec<usize> = sample(rng, n_features, self.mtry).into_vec();
        features.sort_unstable();
        let mut best: Option<BestSplit> = None;
        let mut order: Vec<usize> = rows.to_vec();
        let (total, total_sq) = rows.iter().fold((0.0, 0.0), |(s, q), &r| (s + self.y[r], q + self.y[r] * self.y[r]));
        let n = rows.len() as f64;
        for f in features {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let (mut ls, mut lq) = (0.0, 0.0);
            for k in 0..order.len() - 1 {
                let yi = self.y[order[k]];
                ls += yi;
                lq += yi * yi;
                let (v, next) = (self.x[order[k]][f], self.x[order[k + 1]][f]);
                if v == next {
                    continue;
                }
                let nl = (k + 1) as f64;
                let child = sse(ls, lq, nl) + sse(total - ls, total_sq - lq, n - nl);
                let gain = parent_sse - child;
                if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(BestSplit {
                        feature: f,
                        threshold: 0.5 * (v + next),
                        gain,
                    });
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    trees: Vec<RegressionTree>,
    importances: Vec<f64>,
}

impl RandomForest {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    /// Total variance reduction per feature, normalised to sum to 1
    /// (all zeros when no split was ever made).
    pub fn importances(&self) -> &[f64] {
        &self.importances
    }
}

fn validate(x: &[Vec<f64>], y: &[f64]) -> Result<usize, FeatselError> {
    if x.len() != y.len() {
        return Err(FeatselError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(FeatselError::TooFewSamples(x.len()));
    }
    let f = x[0].len();
    if f == 0 {
        return Err(FeatselError::NoFeatures);
    }
    for (row, r) in x.iter().enumerate() {
        if r.len() != f {
            return Err(FeatselError::Ragged {
                row,
                got: r.len(),
                expected: f,
            });
        }
        if r.iter().any(|v| !v.is_finite()) || !y[row].is_finite() {
            return Err(FeatselError::NotFinite(row));
        }
    }
    Ok(f)
}

/// Bagged CART regression trees with variance-reduction splits.
pub fn fit_random_forest(x: &[Vec<f64>], y: &[f64], cfg: &ForestConfig) -> Result<RandomForest, FeatselError> {
    let n_features = validate(x, y)?;
    let mtry = cfg
        .max_features
        .unwrap_or_else(|| n_features.div_ceil(3))
        .clamp(1, n_features);
    let n_boot = ((cfg.bootstrap_fraction * x.len() as f64).round() as usize).max(1);

    let grown: Vec<(RegressionTree, Vec<f64>)> = (0..cfg.n_trees.max(1))
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64);
            let mut rows: Vec<usize> = if cfg.bootstrap {
                (0..n_boot).map(|_| rng.random_range(0..x.len())).collect()
            } else {
                (0..x.len()).collect()
            };
            let mut b = TreeBuilder {
                x,
                y,
                max_depth: cfg.max_depth,
                min_split: cfg.min_samples_split.max(2),
                mtry,
                nodes: Vec::new(),
                importance: vec![0.0; n_features],
            };
            b.build(&mut rows, 0, &mut rng);
            (RegressionTree { nodes: b.nodes }, b.importance)
        })
        .collect();

    let mut importances = vec![0.0; n_features];
    for (_, imp) in &grown {
        for (a, b) in importances.iter_mut().zip(imp) {
            *a += b;
        }
    }
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        importances.iter_mut().for_each(|v| *v /= total);
    }
    Ok(RandomForest {
        trees: grown.into_iter().map(|g| g.0).collect(),
        importances,
    })
}

/// Features ranked by descending importance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub ranked: Vec<(String, f64)>,
}

impl ImportanceReport {
    pub fn from_scores(names: &[String], scores: &[f64]) -> Self {
        let mut ranked: Vec<(String, f64)> = names.iter().cloned().zip(scores.iter().copied()).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        Self { ranked }
    }

    pub fn names(&self) -> Vec<&str> {
        self.ranked.iter().map(|r| r.0.as_str()).collect()
    }

    /// `rank,feature,importance`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), FeatselError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "feature", "importance"])?;
        for (i, (name, score)) in self.ranked.iter().enumerate() {
            w.write_record([(i + 1).to_string(), name.clone(), score.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfeResult {
    /// Retained features, ranked by the final fit.
    pub report: ImportanceReport,
    /// Dropped features in elimination order with their importance in that round.
    pub eliminated: Vec<(String, f64)>,
}

impl RfeResult {
    /// `round,feature,importance` for the dropped features.
    pub fn write_eliminated_csv<W: Write>(&self, out: W) -> Result<(), FeatselError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "feature", "importance"])?;
        for (i, (name, score)) in self.eliminated.iter().enumerate() {
            w.write_record([(i + 1).to_string(), name.clone(), score.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Refit and drop the least important feature until `keep` remain.
pub fn rfe(x: &[Vec<f64>], y: &[f64], names: &[String], keep: usize, cfg: &ForestConfig) -> Result<RfeResult, FeatselError> {
    let n_features = validate(x, y)?;
    if names.len() != n_features {
        return Err(FeatselError::Names {
            names: names.len(),
            features: n_features,
        });
    }
    if keep == 0 || keep > n_features {
        return Err(FeatselError::Keep {
            keep,
            features: n_features,
        });
    }
    let mut active: Vec<usize> = (0..n_features).collect();
    let mut eliminated = Vec::new();
    loop {
        let sub: Vec<Vec<f64>> = x.iter().map(|r| active.iter().map(|&j| r[j]).collect()).collect();
        let forest = fit_random_forest(&sub, y, cfg)?;
        let imp = forest.importances();
        if active.len() == keep {
            let kept: Vec<String> = active.iter().map(|&j| names[j].clone()).collect();
            return Ok(RfeResult {
                report: ImportanceReport::from_scores(&kept, imp),
                eliminated,
            });
        }
        // ties go to the later column so earlier ones survive
        let worst = (0..active.len())
            .min_by(|&a, &b| imp[a].total_cmp(&imp[b]).then(b.cmp(&a)))
            .expect("active is non-empty");
        eliminated.push((names[active[worst]].clone(), imp[worst]));
        active.remove(worst);
    }
}
