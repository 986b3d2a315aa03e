//! Citizen-science sightings, per-cell counts and train/test splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariates::CovariateVector;
use crate::geo::{CellKey, GeoPoint, Grid, GridCell};
use crate::raster::{Modality, RasterPatch};

#[derive(Debug, Error)]
pub enum OccurrenceError {
    #[error("cannot open occurrence file {path}: {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },
    #[error("occurrence csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}` in occurrence header")]
    MissingColumn(&'static str),
    #[error("{rejected} of {total} rows malformed (more than half); first: {first}")]
    MostlyMalformed {
        rejected: usize,
        total: usize,
        first: String,
    },
    #[error("unknown country `{0}` (expected AU, SA or CR)")]
    UnknownCountry(String),
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    Ratio(f64),
    #[error("need at least 2 samples to split, got {0}")]
    TooFewToSplit(usize),
    #[error("line {line}: {reason}")]
    BadRow { line: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Country {
    #[serde(rename = "AU")]
    Australia,
    #[serde(rename = "SA")]
    SouthAfrica,
    #[serde(rename = "CR")]
    CostaRica,
}

impl Country {
    pub const ALL: [Country; 3] = [Country::Australia, Country::SouthAfrica, Country::CostaRica];

    pub fn code(&self) -> &'static str {
        match self {
            Country::Australia => "AU",
            Country::SouthAfrica => "SA",
            Country::CostaRica => "CR",
        }
    }
}

impl fmt::Display for Country {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Country {
    type Err = OccurrenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "AU" | "AUSTRALIA" => Ok(Country::Australia),
            "SA" | "ZA" | "SOUTH AFRICA" => Ok(Country::SouthAfrica),
            "CR" | "COSTA RICA" => Ok(Country::CostaRica),
            _ => Err(OccurrenceError::UnknownCountry(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccurrenceRecord {
    pub species: String,
    pub location: GeoPoint,
    pub timestamp: String,
    pub country: Country,
}

/// A row that failed validation, by 1-based file line.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedOccurrences {
    pub records: Vec<OccurrenceRecord>,
    pub rejected: Vec<RejectedRow>,
}

/// A grid cell with everything the models consume.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSample {
    pub cell: GridCell,
    pub count: u32,
    pub country: Country,
    pub covariates: CovariateVector,
    pub patches: BTreeMap<Modality, RasterPatch>,
    pub label_presence: bool,
}

impl CellSample {
    pub fn presence(cell: GridCell, country: Country, count: u32) -> Self {
        Self {
            cell,
            count,
            country,
            covariates: CovariateVector::default(),
            patches: BTreeMap::new(),
            label_presence: count > 0,
        }
    }

    pub fn pseudo_absence(cell: GridCell, country: Country) -> Self {
        Self {
            cell,
            count: 0,
            country,
            covariates: CovariateVector::default(),
            patches: BTreeMap::new(),
            label_presence: false,
        }
    }

    pub fn key(&self) -> CellKey {
        self.cell.key()
    }
}

fn looks_like_iso8601(ts: &str) -> bool {
    let b = ts.as_bytes();
    b.len() >= 10
        && b[..4].iter().all(u8::is_ascii_digit)
        && b[4] == b'-'
        && b[5..7].iter().all(u8::is_ascii_digit)
        && b[7] == b'-'
        && b[8..10].iter().all(u8::is_ascii_digit)
}

pub fn load_occurrences(path: impl AsRef<Path>) -> Result<LoadedOccurrences, OccurrenceError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| OccurrenceError::Open {
        path: path.display().to_string(),
        source,
    })?;
    read_occurrences(file)
}

/// Parse `species,lat,lon,timestamp,country` rows. Bad rows are collected;
/// the load fails only when more than half of them are bad.
pub fn read_occurrences<R: Read>(input: R) -> Result<LoadedOccurrences, OccurrenceError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    let col = |name: &'static str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or(OccurrenceError::MissingColumn(name))
    };
    let (si, lati, loni, ti, ci) = (
        col("species")?,
        col("lat")?,
        col("lon")?,
        col("timestamp")?,
        col("country")?,
    );

    let mut out = LoadedOccurrences::default();
    let mut total = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        total += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(RejectedRow {
                    line: i as u64 + 2,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = rec.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
        let parsed = (|| -> Result<OccurrenceRecord, String> {
            let field = |j: usize| rec.get(j).map(str::trim).ok_or_else(|| format!("missing field {j}"));
            let lat: f64 = field(lati)?.parse().map_err(|_| format!("bad lat `{}`", field(lati).unwrap_or("")))?;
            let lon: f64 = field(loni)?.parse().map_err(|_| format!("bad lon `{}`", field(loni).unwrap_or("")))?;
            let location = GeoPoint::new(lat, lon).map_err(|e| e.to_string())?;
            let timestamp = field(ti)?.to_string();
            if !looks_like_iso8601(&timestamp) {
                return Err(format!("bad timestamp `{timestamp}`"));
            }
            let country: Country = field(ci)?.parse().map_err(|e: OccurrenceError| e.to_string())?;
            Ok(OccurrenceRecord {
                species: field(si)?.to_string(),
                location,
                timestamp,
                country,
            })
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err(reason) => out.rejected.push(RejectedRow { line, reason }),
        }
    }
    if total > 0 && out.rejected.len() * 2 > total {
        let first = &out.rejected[0];
        return Err(OccurrenceError::MostlyMalformed {
            rejected: out.rejected.len(),
            total,
            first: format!("line {}: {}", first.line, first.reason),
        });
    }
    Ok(out)
}

pub fn write_occurrences<W: Write>(records: &[OccurrenceRecord], out: W) -> Result<(), OccurrenceError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["species", "lat", "lon", "timestamp", "country"])?;
    for r in records {
        w.write_record([
            r.species.clone(),
            r.location.lat().to_string(),
            r.location.lon().to_string(),
            r.timestamp.clone(),
            r.country.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct Aggregation {
    /// Cells with at least one record, in row-major order.
    pub samples: Vec<CellSample>,
    /// Records that fell outside the grid.
    pub outside: usize,
}

impl Aggregation {
    pub fn total_count(&self) -> usize {
        self.samples.iter().map(|s| s.count as usize).sum::<usize>() + self.outside
    }
}

#[derive(Default)]
struct Tally {
    counts: BTreeMap<CellKey, BTreeMap<Country, u32>>,
    outside: usize,
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        for (k, per) in other.counts {
            let slot = self.counts.entry(k).or_default();
            for (c, n) in per {
                *slot.entry(c).or_default() += n;
            }
        }
        self.outside += other.outside;
        self
    }
}

/// Count the records falling in each cell.
///
/// A cell's country is the most frequent country among its records
/// (ties go to the first in `Country::ALL` order).
pub fn aggregate_counts(records: &[OccurrenceRecord], grid: &Grid) -> Aggregation {
    let tally = records
        .par_chunks(4096)
        .map(|chunk| {
            let mut t = Tally::default();
            for r in chunk {
                match grid.cell_containing(r.location) {
                    Some(cell) => *t.counts.entry(cell.key()).or_default().entry(r.country).or_default() += 1,
                    None => t.outside += 1,
                }
            }
            t
        })
        .reduce(Tally::default, Tally::merge);

    let samples = tally
        .counts
        .into_iter()
        .map(|(key, per)| {
            let count = per.values().sum();
            let country = per
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(c, _)| *c)
                .expect("tallied cells have records");
            let cell = *grid.cell(key).expect("key came from the grid");
            CellSample::presence(cell, country, count)
        })
        .collect();
    Aggregation {
        samples,
        outside: tally.outside,
    }
}

/// Aggregated counts as `row,col,country,count`.
pub fn write_counts_csv<W: Write>(samples: &[CellSample], out: W) -> Result<(), OccurrenceError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "country", "count"])?;
    for s in samples {
        w.write_record([
            s.cell.row.to_string(),
            s.cell.col.to_string(),
            s.country.to_string(),
            s.count.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One row of an aggregated-counts file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub row: usize,
    pub col: usize,
    pub country: Country,
    pub count: u32,
}

pub fn read_counts_csv<R: Read>(input: R) -> Result<Vec<CountRow>, OccurrenceError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Seeded uniform shuffle, then the first `round(ratio * n)` items train.
pub fn split_train_test<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), OccurrenceError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(OccurrenceError::Ratio(ratio));
    }
    if items.len() < 2 {
        return Err(OccurrenceError::TooFewToSplit(items.len()));
    }
    let (train_idx, test_idx) = split_indices(items.len(), ratio, seed);
    Ok((
        train_idx.iter().map(|&i| items[i].clone()).collect(),
        test_idx.iter().map(|&i| items[i].clone()).collect(),
    ))
}

/// Index form of [`split_train_test`]; both halves come back sorted.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * n as f64).round() as usize;
    let mut test = idx.split_off(n_train.min(n));
    idx.sort_unstable();
    test.sort_unstable();
    (idx, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{make_grid, BoundingBox, GridSpec};
    use rand::Rng;

    fn grid() -> Grid {
        make_grid(BoundingBox::new(-30.0, 150.0, -29.8, 150.3).unwrap(), GridSpec::default()).unwrap()
    }

    fn rec(lat: f64, lon: f64, country: Country) -> OccurrenceRecord {
        OccurrenceRecord {
            species: "Litoria".into(),
            location: GeoPoint::new(lat, lon).unwrap(),
            timestamp: "2021-03-04T10:00:00Z".into(),
            country,
        }
    }

    #[test]
    fn loads_valid_rows() {
        let csv = "species,lat,lon,timestamp,country\n\
                   Litoria aurea,-33.1,151.2,2020-01-02,AU\n\
                   Amietia,-33.9,18.4,2020-02-03T04:05:06Z,SA\n\
                   Agalychnis,10.0,-84.0,2019-12-31,CR\n";
        let got = read_occurrences(csv.as_bytes()).unwrap();
        assert_eq!(got.records.len(), 3);
        assert!(got.rejected.is_empty());
        assert_eq!(got.records[2].country, Country::CostaRica);
    }

    #[test]
    fn out_of_range_row_is_rejected_with_its_line() {
        let csv = "species,lat,lon,timestamp,country\n\
                   a,-33.1,151.2,2020-01-02,AU\n\
                   b,91,151.2,2020-01-02,AU\n\
                   c,-33.1,151.3,2020-01-02,AU\n";
        let got = read_occurrences(csv.as_bytes()).unwrap();
        assert_eq!(got.records.len(), 2);
        assert_eq!(got.rejected.len(), 1);
        assert_eq!(got.rejected[0].line, 3);
        assert!(got.rejected[0].reason.contains("latitude"));
    }

    #[test]
    fn header_only_is_empty_and_mostly_bad_is_fatal() {
        let got = read_occurrences("species,lat,lon,timestamp,country\n".as_bytes()).unwrap();
        assert!(got.records.is_empty());

        let csv = "species,lat,lon,timestamp,country\n\
                   a,x,1,2020-01-02,AU\nb,1,1,yesterday,AU\nc,1,1,2020-01-02,AU\n";
        assert!(matches!(
            read_occurrences(csv.as_bytes()),
            Err(OccurrenceError::MostlyMalformed { rejected: 2, total: 3, .. })
        ));
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(matches!(
            load_occurrences("/definitely/not/here.csv"),
            Err(OccurrenceError::Open { .. })
        ));
    }

    #[test]
    fn five_records_in_one_cell() {
        let g = grid();
        let c = g.cells()[7].centroid;
        let recs: Vec<_> = (0..5).map(|_| rec(c.lat(), c.lon(), Country::Australia)).collect();
        let agg = aggregate_counts(&recs, &g);
        assert_eq!(agg.samples.len(), 1);
        assert_eq!(agg.samples[0].count, 5);
        assert_eq!(agg.samples[0].key(), g.cells()[7].key());
        assert!(agg.samples[0].label_presence);
        assert!(aggregate_counts(&[], &g).samples.is_empty());
    }

    #[test]
    fn counts_are_conserved() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // some records deliberately outside the box
        let recs: Vec<_> = (0..100)
            .map(|_| rec(rng.random_range(-30.05..-29.75), rng.random_range(149.95..150.35), Country::Australia))
            .collect();
        let agg = aggregate_counts(&recs, &g);
        let outside_oracle = recs.iter().filter(|r| !g.bbox().contains(r.location)).count();
        assert_eq!(agg.outside, outside_oracle);
        assert_eq!(agg.total_count(), 100);
    }

    #[test]
    fn parallel_aggregation_matches_sequential_tally() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let recs: Vec<_> = (0..20_000)
            .map(|_| rec(rng.random_range(-30.0..-29.8), rng.random_range(150.0..150.3), Country::SouthAfrica))
            .collect();
        let agg = aggregate_counts(&recs, &g);
        let mut seq: BTreeMap<CellKey, u32> = BTreeMap::new();
        for r in &recs {
            *seq.entry(g.cell_containing(r.location).unwrap().key()).or_default() += 1;
        }
        let got: BTreeMap<CellKey, u32> = agg.samples.iter().map(|s| (s.key(), s.count)).collect();
        assert_eq!(got, seq);
    }

    #[test]
    fn split_sizes_and_partition() {
        let items: Vec<u32> = (0..10).collect();
        let (tr, te) = split_train_test(&items, 0.8, 42).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let (tr2, te2) = split_train_test(&items, 0.8, 42).unwrap();
        assert_eq!((&tr, &te), (&tr2, &te2));
        let mut all: Vec<u32> = tr.iter().chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert!(split_train_test(&items[..1], 0.8, 1).is_err());
        assert!(split_train_test(&items, 1.0, 1).is_err());
    }

    #[test]
    fn counts_csv_round_trip() {
        let g = grid();
        let s = CellSample::presence(g.cells()[3], Country::CostaRica, 4);
        let mut buf = Vec::new();
        write_counts_csv(std::slice::from_ref(&s), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().next(), Some("row,col,country,count"));
        let rows = read_counts_csv(buf.as_slice()).unwrap();
        assert_eq!(rows[0], CountRow { row: s.cell.row, col: s.cell.col, country: Country::CostaRica, count: 4 });
    }
}
