//! Evaluation metrics for count regression and presence classification.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} truths vs {1} predictions")]
    Length(usize, usize),
    #[error("ROC AUC needs both classes present")]
    SingleClass,
}

fn check(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::Length(a, b));
    }
    if a == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64, MetricError> {
    check(y.len(), yhat.len())?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Fraction of samples where `p >= threshold` agrees with the label.
pub fn accuracy(y: &[bool], p: &[f64], threshold: f64) -> Result<f64, MetricError> {
    check(y.len(), p.len())?;
    let hits = y.iter().zip(p).filter(|(&t, &s)| (s >= threshold) == t).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Mann-Whitney AUC with average ranks for ties.
pub fn roc_auc(y: &[bool], scores: &[f64]) -> Result<f64, MetricError> {
    check(y.len(), scores.len())?;
    let n_pos = y.iter().filter(|&&t| t).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        pos_rank_sum += avg * order[i..=j].iter().filter(|&&k| y[k]).count() as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "classification" | "class" => Ok(Task::Classification),
            "regression" | "reg" => Ok(Task::Regression),
            other => Err(format!("unknown task `{other}` (expected classification or regression)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: Task,
    pub mae: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub n: usize,
}

impl EvalResult {
    pub fn regression(y: &[f64], yhat: &[f64]) -> Result<Self, MetricError> {
        Ok(Self {
            task: Task::Regression,
            mae: Some(mae(y, yhat)?),
            accuracy: None,
            auc: None,
            n: y.len(),
        })
    }

    /// Accuracy at 0.5; AUC is left out when only one class is present.
    pub fn classification(y: &[bool], p: &[f64]) -> Result<Self, MetricError> {
        let auc = match roc_auc(y, p) {
            Ok(a) => Some(a),
            Err(MetricError::SingleClass) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            task: Task::Classification,
            mae: None,
            accuracy: Some(accuracy(y, p, 0.5)?),
            auc,
            n: y.len(),
        })
    }
}

/// `model,task,n,mae,accuracy,auc` with empty cells for absent metrics.
pub fn write_eval_csv<W: Write>(rows: &[(String, EvalResult)], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "task", "n", "mae", "accuracy", "auc"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            r.task.to_string(),
            r.n.to_string(),
            opt(r.mae),
            opt(r.accuracy),
            opt(r.auc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Minimal SVG bar chart, one bar per `(label, value)`.
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let (w, h, pad, base) = (120 * bars.len().max(1) + 80, 320usize, 40.0, 260.0);
    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <text x=\"{pad}\" y=\"20\" font-size=\"14\">{}</text>\n\
         <line x1=\"{pad}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"black\"/>\n",
        escape(title),
        w as f64 - pad / 2.0
    );
    for (i, (label, v)) in bars.iter().enumerate() {
        let bh = (v / max * 200.0).max(0.0);
        let x = pad + 10.0 + 120.0 * i as f64;
        s.push_str(&format!(
            "<rect x=\"{x}\" y=\"{:.2}\" width=\"80\" height=\"{bh:.2}\" fill=\"#4477aa\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{v:.4}</text>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            base - bh,
            x + 40.0,
            base - bh - 5.0,
            x + 40.0,
            base + 18.0,
            escape(label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
