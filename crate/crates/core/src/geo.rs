//! Coordinates, great-circle distance and the square-cell partition of a study area.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used for every distance in the crate.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Kilometres per degree of latitude used for grid step conversion.
pub const KM_PER_DEGREE: f64 = 111.195;

/// Default cell area of the study-area grid.
pub const DEFAULT_CELL_AREA_KM2: f64 = 30.0;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("degenerate bounding box: min ({min_lat}, {min_lon}) must be strictly below max ({max_lat}, {max_lon})")]
    DegenerateBox {
        min_lat: f64,
        min_lon: f64,
        max_lat: f64,
        max_lon: f64,
    },
    #[error("cell area must be positive and finite, got {0}")]
    CellArea(f64),
    #[error("grid csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("grid csv holds no cells")]
    EmptyGrid,
    #[error("grid csv is not a complete row-major tiling: {0}")]
    BrokenTiling(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    // rounding can push h a hair above 1 for antipodes
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, GeoError> {
        GeoPoint::new(min_lat, min_lon)?;
        GeoPoint::new(max_lat, max_lon)?;
        if !(min_lat < max_lat && min_lon < max_lon) {
            return Err(GeoError::DegenerateBox {
                min_lat,
                min_lon,
                max_lat,
                max_lon,
            });
        }
        Ok(Self {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        })
    }

    /// Closed containment test.
    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat) && (self.min_lon..=self.max_lon).contains(&p.lon)
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: 0.5 * (self.min_lat + self.max_lat),
            lon: 0.5 * (self.min_lon + self.max_lon),
        }
    }

    /// Approximate area from the local-cosine degree conversion.
    pub fn area_km2(&self) -> f64 {
        let mid = self.center().lat.to_radians();
        let h = (self.max_lat - self.min_lat) * KM_PER_DEGREE;
        let w = (self.max_lon - self.min_lon) * KM_PER_DEGREE * mid.cos();
        h * w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cell_area_km2: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            cell_area_km2: DEFAULT_CELL_AREA_KM2,
        }
    }
}

impl GridSpec {
    pub fn new(cell_area_km2: f64) -> Result<Self, GeoError> {
        if !(cell_area_km2.is_finite() && cell_area_km2 > 0.0) {
            return Err(GeoError::CellArea(cell_area_km2));
        }
        Ok(Self { cell_area_km2 })
    }

    /// Cells are square, so the side is the square root of the area.
    pub fn cell_side_km(&self) -> f64 {
        self.cell_area_km2.sqrt()
    }

    pub fn lat_step_deg(&self) -> f64 {
        self.cell_side_km() / KM_PER_DEGREE
    }

    pub fn lon_step_deg(&self, mid_lat: f64) -> f64 {
        self.cell_side_km() / (KM_PER_DEGREE * mid_lat.to_radians().cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub bbox: BoundingBox,
    pub centroid: GeoPoint,
}

impl GridCell {
    pub fn key(&self) -> CellKey {
        CellKey {
            row: self.row,
            col: self.col,
        }
    }
}

/// Row/column address of a cell within one grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub row: usize,
    pub col: usize,
}

/// Row-major tiling of a bounding box. Row 0 sits at the southern edge,
/// column 0 at the western edge. The last row and column are clipped to the box.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    bbox: BoundingBox,
    lat_edges: Vec<f64>,
    lon_edges: Vec<f64>,
    cells: Vec<GridCell>,
}

fn axis_edges(min: f64, max: f64, step: f64) -> Vec<f64> {
    // slack keeps an exact multiple of the step from spilling into an extra sliver
    let n = (((max - min) / step) - 1e-9).ceil().max(1.0) as usize;
    let mut edges: Vec<f64> = (0..n).map(|i| min + i as f64 * step).collect();
    edges.push(max);
    edges
}

/// Partition `bbox` into square cells of the given area.
pub fn make_grid(bbox: BoundingBox, spec: GridSpec) -> Result<Grid, GeoError> {
    let bbox = BoundingBox::new(bbox.min_lat, bbox.min_lon, bbox.max_lat, bbox.max_lon)?;
    let spec = GridSpec::new(spec.cell_area_km2)?;
    let mid_lat = bbox.center().lat;
    let lat_edges = axis_edges(bbox.min_lat, bbox.max_lat, spec.lat_step_deg());
    let lon_edges = axis_edges(bbox.min_lon, bbox.max_lon, spec.lon_step_deg(mid_lat));
    Ok(Grid::from_edges(bbox, lat_edges, lon_edges))
}

impl Grid {
    fn from_edges(bbox: BoundingBox, lat_edges: Vec<f64>, lon_edges: Vec<f64>) -> Self {
        let mut cells = Vec::with_capacity((lat_edges.len() - 1) * (lon_edges.len() - 1));
        for (row, lat) in lat_edges.windows(2).enumerate() {
            for (col, lon) in lon_edges.windows(2).enumerate() {
                let cell_box = BoundingBox {
                    min_lat: lat[0],
                    min_lon: lon[0],
                    max_lat: lat[1],
                    max_lon: lon[1],
                };
                cells.push(GridCell {
                    row,
                    col,
                    bbox: cell_box,
                    centroid: cell_box.center(),
                });
            }
        }
        Self {
            bbox,
            lat_edges,
            lon_edges,
            cells,
        }
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    pub fn n_rows(&self) -> usize {
        self.lat_edges.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.lon_edges.len() - 1
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[GridCell] {
        &self.cells
    }

    pub fn cell(&self, key: CellKey) -> Option<&GridCell> {
        if key.row < self.n_rows() && key.col < self.n_cols() {
            Some(&self.cells[key.row * self.n_cols() + key.col])
        } else {
            None
        }
    }

    /// The unique cell holding `p`. Cell edges are lower-inclusive and
    /// upper-exclusive except along the northern and eastern grid boundary.
    pub fn cell_containing(&self, p: GeoPoint) -> Option<&GridCell> {
        if !self.bbox.contains(p) {
            return None;
        }
        let row = interval_index(&self.lat_edges, p.lat);
        let col = interval_index(&self.lon_edges, p.lon);
        self.cell(CellKey { row, col })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), GeoError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "row",
            "col",
            "min_lat",
            "min_lon",
            "max_lat",
            "max_lon",
            "centroid_lat",
            "centroid_lon",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.row.to_string(),
                c.col.to_string(),
                c.bbox.min_lat.to_string(),
                c.bbox.min_lon.to_string(),
                c.bbox.max_lat.to_string(),
                c.bbox.max_lon.to_string(),
                c.centroid.lat.to_string(),
                c.centroid.lon.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Rebuild a grid from its CSV export.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, GeoError> {
        #[derive(Deserialize)]
        struct Row {
            row: usize,
            col: usize,
            min_lat: f64,
            min_lon: f64,
            max_lat: f64,
            max_lon: f64,
        }
        let mut rdr = csv::Reader::from_reader(input);
        let mut rows: Vec<Row> = Vec::new();
        for rec in rdr.deserialize() {
            rows.push(rec?);
        }
        if rows.is_empty() {
            return Err(GeoError::EmptyGrid);
        }
        rows.sort_by_key(|r| (r.row, r.col));
        let n_rows = rows.last().map(|r| r.row + 1).unwrap_or(0);
        let n_cols = rows.iter().map(|r| r.col + 1).max().unwrap_or(0);
        if rows.len() != n_rows * n_cols {
            return Err(GeoError::BrokenTiling(format!(
                "{} cells for a {n_rows}x{n_cols} grid",
                rows.len()
            )));
        }
        let mut lat_edges: Vec<f64> = (0..n_rows).map(|r| rows[r * n_cols].min_lat).collect();
        lat_edges.push(rows[(n_rows - 1) * n_cols].max_lat);
        let mut lon_edges: Vec<f64> = rows[..n_cols].iter().map(|r| r.min_lon).collect();
        lon_edges.push(rows[n_cols - 1].max_lon);
        for (i, r) in rows.iter().enumerate() {
            let (er, ec) = (i / n_cols, i % n_cols);
            if r.row != er
                || r.col != ec
                || r.min_lat != lat_edges[er]
                || r.max_lat != lat_edges[er + 1]
                || r.min_lon != lon_edges[ec]
                || r.max_lon != lon_edges[ec + 1]
            {
                return Err(GeoError::BrokenTiling(format!("cell ({}, {})", r.row, r.col)));
            }
        }
        let bbox = BoundingBox::new(lat_edges[0], lon_edges[0], lat_edges[n_rows], lon_edges[n_cols])?;
        Ok(Self::from_edges(bbox, lat_edges, lon_edges))
    }
}

/// Index of the half-open interval `[edges[i], edges[i+1])` holding `x`;
/// the final interval is closed.
fn interval_index(edges: &[f64], x: f64) -> usize {
    let n = edges.len() - 1;
    // number of interior edges <= x
    edges[1..n].partition_point(|&e| e <= x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn haversine_identity_and_equator_degree() {
        assert_eq!(haversine_distance(pt(0.0, 0.0), pt(0.0, 0.0)), 0.0);
        // R * pi / 180
        let d = haversine_distance(pt(0.0, 0.0), pt(0.0, 1.0));
        assert!((d - 111.195).abs() < 0.01, "{d}");
    }

    #[test]
    fn haversine_antipodes_is_half_circumference() {
        let d = haversine_distance(pt(0.0, 0.0), pt(0.0, 180.0));
        assert!((d - std::f64::consts::PI * EARTH_RADIUS_KM).abs() < 1e-6);
    }

    #[test]
    fn rejects_out_of_range_points() {
        assert!(matches!(GeoPoint::new(91.0, 0.0), Err(GeoError::Latitude(_))));
        assert!(matches!(GeoPoint::new(0.0, -180.5), Err(GeoError::Longitude(_))));
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn degenerate_box_is_an_error() {
        assert!(BoundingBox::new(1.0, 1.0, 1.0, 2.0).is_err());
        let spec = GridSpec::default();
        let flat = BoundingBox {
            min_lat: 0.0,
            min_lon: 0.0,
            max_lat: 0.0,
            max_lon: 1.0,
        };
        assert!(make_grid(flat, spec).is_err());
        assert!(GridSpec::new(0.0).is_err());
    }

    #[test]
    fn exact_two_by_three_tiling() {
        let spec = GridSpec::new(25.0).unwrap();
        let dlat = spec.lat_step_deg();
        // mid latitude 0 keeps the cosine at exactly 1
        let dlon = spec.lon_step_deg(0.0);
        let bbox = BoundingBox::new(-dlat, 0.0, dlat, 3.0 * dlon).unwrap();
        let grid = make_grid(bbox, spec).unwrap();
        assert_eq!((grid.n_rows(), grid.n_cols()), (2, 3));
        assert_eq!(grid.len(), 6);
    }

    #[test]
    fn one_degree_square_at_equator() {
        let bbox = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let grid = make_grid(bbox, GridSpec::default()).unwrap();
        // ceil(111.195 / 5.477) on both axes
        assert_eq!(grid.n_rows(), 21);
        assert_eq!(grid.n_cols(), 21);
        assert_eq!(grid.len(), 441);
    }

    #[test]
    fn centroids_map_back_to_their_cell() {
        let bbox = BoundingBox::new(-30.0, 150.0, -29.5, 150.7).unwrap();
        let grid = make_grid(bbox, GridSpec::default()).unwrap();
        for c in grid.cells() {
            assert!(c.bbox.contains(c.centroid));
            assert_eq!(grid.cell_containing(c.centroid).unwrap().key(), c.key());
        }
        assert!(grid.cell_containing(pt(-31.0, 150.2)).is_none());
        assert!(grid.cell_containing(pt(-29.7, 151.0)).is_none());
    }

    #[test]
    fn shared_edge_goes_to_upper_cell() {
        let bbox = BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let grid = make_grid(bbox, GridSpec::default()).unwrap();
        let k = grid.cell(CellKey { row: 2, col: 3 }).unwrap();
        let above = grid.cell(CellKey { row: 3, col: 3 }).unwrap();
        let right = grid.cell(CellKey { row: 2, col: 4 }).unwrap();
        let on_top_edge = pt(k.bbox.max_lat, k.centroid.lon);
        let on_right_edge = pt(k.centroid.lat, k.bbox.max_lon);
        // both candidate boxes touch the point; the lower-inclusive rule picks the next one
        assert!(k.bbox.contains(on_top_edge) && above.bbox.contains(on_top_edge));
        assert_eq!(grid.cell_containing(on_top_edge).unwrap().key(), above.key());
        assert_eq!(grid.cell_containing(on_right_edge).unwrap().key(), right.key());
        // the outer boundary stays inside the grid
        let corner = pt(0.5, 0.5);
        let last = grid.cell_containing(corner).unwrap();
        assert_eq!((last.row, last.col), (grid.n_rows() - 1, grid.n_cols() - 1));
    }

    #[test]
    fn equatorial_cell_area_matches_spec() {
        let bbox = BoundingBox::new(-0.5, 10.0, 0.5, 11.0).unwrap();
        let grid = make_grid(bbox, GridSpec::default()).unwrap();
        let full = &grid.cells()[0];
        let rel = (full.bbox.area_km2() - 30.0).abs() / 30.0;
        assert!(rel < 0.01, "{rel}");
    }

    #[test]
    fn csv_round_trip() {
        let bbox = BoundingBox::new(-34.2, 18.3, -33.9, 18.8).unwrap();
        let grid = make_grid(bbox, GridSpec::default()).unwrap();
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with("row,col,min_lat,min_lon,max_lat,max_lon,centroid_lat,centroid_lon\n"));
        let back = Grid::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, grid);
    }

    proptest! {
        #[test]
        fn haversine_is_a_symmetric_bounded_distance(
            a in (-90.0f64..=90.0, -180.0f64..=180.0),
            b in (-90.0f64..=90.0, -180.0f64..=180.0),
        ) {
            let (a, b) = (pt(a.0, a.1), pt(b.0, b.1));
            let d = haversine_distance(a, b);
            prop_assert!(d >= 0.0);
            prop_assert!((d - haversine_distance(b, a)).abs() < 1e-9);
            prop_assert!(d <= std::f64::consts::PI * EARTH_RADIUS_KM + 1e-9);
            prop_assert_eq!(haversine_distance(a, a), 0.0);
        }

        #[test]
        fn every_point_has_exactly_one_cell(
            lat0 in -60.0f64..60.0, lon0 in -170.0f64..170.0,
            dlat in 0.05f64..0.6, dlon in 0.05f64..0.6,
            u in 0.0f64..=1.0, v in 0.0f64..=1.0,
        ) {
            let bbox = BoundingBox::new(lat0, lon0, lat0 + dlat, lon0 + dlon).unwrap();
            let grid = make_grid(bbox, GridSpec::default()).unwrap();
            let p = pt(lat0 + u * dlat, lon0 + v * dlon);
            let hits: Vec<_> = grid.cells().iter().filter(|c| {
                let b = c.bbox;
                let lat_ok = p.lat() >= b.min_lat && (p.lat() < b.max_lat || (c.row + 1 == grid.n_rows() && p.lat() <= b.max_lat));
                let lon_ok = p.lon() >= b.min_lon && (p.lon() < b.max_lon || (c.col + 1 == grid.n_cols() && p.lon() <= b.max_lon));
                lat_ok && lon_ok
            }).collect();
            prop_assert_eq!(hits.len(), 1);
            prop_assert_eq!(grid.cell_containing(p).unwrap().key(), hits[0].key());
        }
    }
}
