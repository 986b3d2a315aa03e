//! Tabular climate covariates attached to every grid cell.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::CellKey;
use crate::occurrence::Country;

/// Monthly climate variables in their fixed column order.
pub const CLIMATE_FEATURES: [&str; 10] = [
    "tmax", "tmin", "pet", "ppt", "vap", "vpd", "soil", "ws", "q", "pdsi",
];

/// Upper bound on named features a table may carry.
pub const MAX_FEATURES: usize = 14;

#[derive(Debug, Error)]
pub enum CovariateError {
    #[error("covariate csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required covariate column `{0}`")]
    MissingColumn(String),
    #[error("too many covariate columns: {0} (max {MAX_FEATURES})")]
    TooMany(usize),
    #[error("duplicate covariate column `{0}`")]
    Duplicate(String),
    #[error("line {line}: {reason}")]
    BadRow { line: u64, reason: String },
}

/// Feature values of one cell, in the order of the owning [`CovariateTable`]'s names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateVector {
    pub values: Vec<f64>,
}

impl CovariateVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Covariates for every (country, cell) pair, with named columns.
///
/// The ten climate features always come first, in [`CLIMATE_FEATURES`] order;
/// extra columns follow in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovariateTable {
    names: Vec<String>,
    rows: BTreeMap<(Country, CellKey), CovariateVector>,
}

impl CovariateTable {
    pub fn new(names: Vec<String>) -> Result<Self, CovariateError> {
        if names.len() > MAX_FEATURES {
            return Err(CovariateError::TooMany(names.len()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(CovariateError::Duplicate(n.clone()));
            }
        }
        Ok(Self {
            names,
            rows: BTreeMap::new(),
        })
    }

    /// Table with the ten standard climate columns.
    pub fn climate() -> Self {
        Self {
            names: CLIMATE_FEATURES.iter().map(|s| s.to_string()).collect(),
            rows: BTreeMap::new(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn insert(&mut self, country: Country, key: CellKey, v: CovariateVector) {
        debug_assert_eq!(v.len(), self.names.len());
        self.rows.insert((country, key), v);
    }

    pub fn get(&self, country: Country, key: CellKey) -> Option<&CovariateVector> {
        self.rows.get(&(country, key))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(Country, CellKey), &CovariateVector)> {
        self.rows.iter()
    }

    /// CSV with header `country,row,col,<feature names>`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CovariateError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["country".to_string(), "row".into(), "col".into()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for ((country, key), v) in &self.rows {
            let mut rec = vec![country.to_string(), key.row.to_string(), key.col.to_string()];
            rec.extend(v.values.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, CovariateError> {
        let mut rdr = csv::Reader::from_reader(input);
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let col_of = |name: &str| header.iter().position(|h| h == name);
        for key in ["country", "row", "col"] {
            if col_of(key).is_none() {
                return Err(CovariateError::MissingColumn(key.into()));
            }
        }
        let mut names: Vec<String> = Vec::new();
        for f in CLIMATE_FEATURES {
            if col_of(f).is_none() {
                return Err(CovariateError::MissingColumn(f.into()));
            }
            names.push(f.to_string());
        }
        for h in &header {
            if !["country", "row", "col"].contains(&h.as_str()) && !names.contains(h) {
                names.push(h.clone());
            }
        }
        let mut table = Self::new(names)?;
        let idx: Vec<usize> = table.names.iter().map(|n| col_of(n).unwrap()).collect();
        let (ci, ri, coli) = (col_of("country").unwrap(), col_of("row").unwrap(), col_of("col").unwrap());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
            let bad = |reason: String| CovariateError::BadRow { line, reason };
            let country: Country = rec[ci].parse().map_err(|e: crate::occurrence::OccurrenceError| bad(e.to_string()))?;
            let row = rec[ri].trim().parse().map_err(|_| bad(format!("bad row `{}`", &rec[ri])))?;
            let col = rec[coli].trim().parse().map_err(|_| bad(format!("bad col `{}`", &rec[coli])))?;
            let mut values = Vec::with_capacity(idx.len());
            for (&j, name) in idx.iter().zip(&table.names) {
                let v: f64 = rec[j]
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad `{name}` value `{}`", &rec[j])))?;
                if !v.is_finite() {
                    return Err(bad(format!("non-finite `{name}`")));
                }
                values.push(v);
            }
            table.insert(country, CellKey { row, col }, CovariateVector::new(values));
        }
        Ok(table)
    }
}

/// Per-feature mean and standard deviation for z-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on rows of equal length. Zero-variance features get unit scale.
    pub fn fit<'a, I>(rows: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, x) in mean.iter_mut().zip(r.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *v += (x - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}
