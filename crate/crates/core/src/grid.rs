//! Uniform metric grid over a service area.
//!
//! Positions are projected with a local equirectangular approximation
//! anchored at the grid's mean latitude. Cells are half-open in both axes
//! (`[low, high)`), indexed row-major from the south-west corner.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters (IUGG).
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Distance classes closer than this are merged.
pub const CLASS_MERGE_TOL_M: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("cannot build a grid from an empty point set")]
    EmptyPoints,
    #[error("coordinate ({lat}, {lon}) is outside [-90,90]x[-180,180]")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("cell width must be positive, got {0}")]
    InvalidWidth(f64),
    #[error("grid dimensions must be positive (rows={rows}, cols={cols})")]
    InvalidShape { rows: usize, cols: usize },
    #[error("coordinate ({lat}, {lon}) lies outside the grid box")]
    OutOfBounds { lat: f64, lon: f64 },
}

/// A geographic coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }

    /// Great-circle distance in meters.
    pub fn haversine_m(&self, other: &LatLon) -> f64 {
        let (p1, p2) = (self.lat.to_radians(), other.lat.to_radians());
        let dp = p2 - p1;
        let dl = (other.lon - self.lon).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_M * a.sqrt().asin()
    }
}

/// Row-major cell index, zero based: `index = row * cols + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex(pub u32);

impl CellIndex {
    #[inline]
    pub fn get(self) -> usize {
        self.0 as usize
    }

    /// One-based identifier used in exported tables.
    pub fn id(self) -> u32 {
        self.0 + 1
    }
}

impl From<usize> for CellIndex {
    fn from(v: usize) -> Self {
        CellIndex(v as u32)
    }
}

/// Grid geometry. Serializes to the self-contained description embedded in
/// every result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_width: f64,
    pub rows: usize,
    pub cols: usize,
    pub meters_per_deg_lat: f64,
    pub meters_per_deg_lon: f64,
}

fn meters_per_degree(mean_lat: f64) -> (f64, f64) {
    let per_deg = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    (per_deg, per_deg * mean_lat.to_radians().cos())
}

impl GridSpec {
    /// A grid with a fixed origin and shape. The projection is anchored at
    /// the latitude of the grid's middle row.
    pub fn new(
        origin: LatLon,
        cell_width: f64,
        rows: usize,
        cols: usize,
    ) -> Result<Self, GridError> {
        if !origin.is_valid() {
            return Err(GridError::InvalidCoordinate {
                lat: origin.lat,
                lon: origin.lon,
            });
        }
        if !(cell_width > 0.0 && cell_width.is_finite()) {
            return Err(GridError::InvalidWidth(cell_width));
        }
        if rows == 0 || cols == 0 {
            return Err(GridError::InvalidShape { rows, cols });
        }
        let (mlat, _) = meters_per_degree(origin.lat);
        let mid_lat = origin.lat + rows as f64 * cell_width / 2.0 / mlat;
        let (meters_per_deg_lat, meters_per_deg_lon) = meters_per_degree(mid_lat);
        Ok(Self {
            origin_lat: origin.lat,
            origin_lon: origin.lon,
            cell_width,
            rows,
            cols,
            meters_per_deg_lat,
            meters_per_deg_lon,
        })
    }

    /// Smallest grid covering `points` plus `padding` meters on every side.
    pub fn build(points: &[LatLon], cell_width: f64, padding: f64) -> Result<Self, GridError> {
        if points.is_empty() {
            return Err(GridError::EmptyPoints);
        }
        if !(cell_width > 0.0 && cell_width.is_finite()) {
            return Err(GridError::InvalidWidth(cell_width));
        }
        let padding = padding.max(0.0);
        let mut min = LatLon::new(f64::INFINITY, f64::INFINITY);
        let mut max = LatLon::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            if !p.is_valid() {
                return Err(GridError::InvalidCoordinate { lat: p.lat, lon: p.lon });
            }
            min.lat = min.lat.min(p.lat);
            min.lon = min.lon.min(p.lon);
            max.lat = max.lat.max(p.lat);
            max.lon = max.lon.max(p.lon);
        }
        let mean_lat = (min.lat + max.lat) / 2.0;
        let (mlat, mlon) = meters_per_degree(mean_lat);
        let height = (max.lat - min.lat) * mlat + 2.0 * padding;
        let width = (max.lon - min.lon) * mlon + 2.0 * padding;
        // floor + 1 keeps the maximum point strictly inside a half-open cell.
        let rows = (height / cell_width).floor() as usize + 1;
        let cols = (width / cell_width).floor() as usize + 1;
        Ok(Self {
            origin_lat: min.lat - padding / mlat,
            origin_lon: min.lon - padding / mlon,
            cell_width,
            rows,
            cols,
            meters_per_deg_lat: mlat,
            meters_per_deg_lon: mlon,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Local planar offset (east, north) in meters from the origin.
    pub fn project(&self, p: LatLon) -> (f64, f64) {
        (
            (p.lon - self.origin_lon) * self.meters_per_deg_lon,
            (p.lat - self.origin_lat) * self.meters_per_deg_lat,
        )
    }

    pub fn unproject(&self, east: f64, north: f64) -> LatLon {
        LatLon::new(
            self.origin_lat + north / self.meters_per_deg_lat,
            self.origin_lon + east / self.meters_per_deg_lon,
        )
    }

    pub fn locate(&self, p: LatLon) -> Result<CellIndex, GridError> {
        let (x, y) = self.project(p);
        self.locate_planar(x, y)
            .ok_or(GridError::OutOfBounds { lat: p.lat, lon: p.lon })
    }

    /// Cell containing a planar offset from the origin.
    pub fn locate_planar(&self, east: f64, north: f64) -> Option<CellIndex> {
        let col = (east / self.cell_width).floor();
        let row = (north / self.cell_width).floor();
        if !(col >= 0.0 && row >= 0.0 && (col as usize) < self.cols && (row as usize) < self.rows)
        {
            return None;
        }
        Some(self.index(row as usize, col as usize))
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> CellIndex {
        debug_assert!(row < self.rows && col < self.cols);
        CellIndex((row * self.cols + col) as u32)
    }

    #[inline]
    pub fn row_col(&self, cell: CellIndex) -> (usize, usize) {
        (cell.get() / self.cols, cell.get() % self.cols)
    }

    pub fn center(&self, cell: CellIndex) -> LatLon {
        let (row, col) = self.row_col(cell);
        self.unproject(
            (col as f64 + 0.5) * self.cell_width,
            (row as f64 + 0.5) * self.cell_width,
        )
    }

    /// Planar center-to-center distance between two cells in meters.
    pub fn center_distance(&self, a: CellIndex, b: CellIndex) -> f64 {
        let (ra, ca) = self.row_col(a);
        let (rb, cb) = self.row_col(b);
        let dr = ra as f64 - rb as f64;
        let dc = ca as f64 - cb as f64;
        self.cell_width * (dr * dr + dc * dc).sqrt()
    }

    /// South-west and north-east corners of a cell.
    pub fn cell_bounds(&self, cell: CellIndex) -> (LatLon, LatLon) {
        let (row, col) = self.row_col(cell);
        let w = self.cell_width;
        (
            self.unproject(col as f64 * w, row as f64 * w),
            self.unproject((col + 1) as f64 * w, (row + 1) as f64 * w),
        )
    }

    pub fn area_km2(&self) -> f64 {
        self.cell_count() as f64 * self.cell_width * self.cell_width / 1e6
    }

    pub fn cells(&self) -> impl Iterator<Item = CellIndex> {
        (0..self.cell_count()).map(CellIndex::from)
    }
}

/// Center-to-center distance classes up to `dist_max`, with per-cell
/// neighbor lists grouped by class.
#[derive(Debug, Clone)]
pub struct DistanceClassTable {
    classes: Vec<f64>,
    dist_max: f64,
    cells: usize,
    // CSR layout: for cell i, class l the members are
    // entries[starts[i * (L + 1) + l] .. starts[i * (L + 1) + l + 1]]
    starts: Vec<u32>,
    entries: Vec<u32>,
}

impl DistanceClassTable {
    pub fn build(spec: &GridSpec, dist_max: f64) -> Self {
        let dist_max = dist_max.max(0.0);
        let w = spec.cell_width;
        let reach_r = ((dist_max / w).floor() as i64).min(spec.rows as i64);
        let reach_c = ((dist_max / w).floor() as i64).min(spec.cols as i64);

        // Offsets with distance strictly below dist_max; the own cell is always class 0.
        let mut offsets: Vec<(i64, i64, f64)> = Vec::new();
        for dr in -reach_r..=reach_r {
            for dc in -reach_c..=reach_c {
                let d = w * ((dr * dr + dc * dc) as f64).sqrt();
                if (dr == 0 && dc == 0) || d < dist_max - CLASS_MERGE_TOL_M {
                    offsets.push((dr, dc, d));
                }
            }
        }
        offsets.sort_by(|a, b| a.2.total_cmp(&b.2));

        let mut classes: Vec<f64> = Vec::new();
        let mut offset_class: Vec<(i64, i64, usize)> = Vec::with_capacity(offsets.len());
        for &(dr, dc, d) in &offsets {
            match classes.last() {
                Some(&last) if d - last <= CLASS_MERGE_TOL_M => {}
                _ => classes.push(d),
            }
            offset_class.push((dr, dc, classes.len() - 1));
        }

        let l = classes.len();
        let m = spec.cell_count();
        let mut starts = Vec::with_capacity(m * (l + 1) + 1);
        let mut entries = Vec::new();
        for cell in 0..m {
            let (row, col) = ((cell / spec.cols) as i64, (cell % spec.cols) as i64);
            let mut cursor = 0;
            for class in 0..l {
                starts.push(entries.len() as u32);
                while cursor < offset_class.len() && offset_class[cursor].2 == class {
                    let (dr, dc, _) = offset_class[cursor];
                    let (r, c) = (row + dr, col + dc);
                    if r >= 0 && c >= 0 && (r as usize) < spec.rows && (c as usize) < spec.cols {
                        entries.push((r as usize * spec.cols + c as usize) as u32);
                    }
                    cursor += 1;
                }
            }
            starts.push(entries.len() as u32);
        }

        Self {
            classes,
            dist_max,
            cells: m,
            starts,
            entries,
        }
    }

    /// Distinct center-to-center distances, `classes()[0] == 0`.
    pub fn classes(&self) -> &[f64] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn dist_max(&self) -> f64 {
        self.dist_max
    }

    pub fn cell_count(&self) -> usize {
        self.cells
    }

    /// Class boundaries: the distinct distances followed by `dist_max`.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut b = self.classes.clone();
        b.push(self.dist_max);
        b
    }

    /// Cells exactly `classes()[class]` away from `cell`.
    pub fn neighbors(&self, cell: CellIndex, class: usize) -> &[u32] {
        let base = cell.get() * (self.class_count() + 1);
        let lo = self.starts[base + class] as usize;
        let hi = self.starts[base + class + 1] as usize;
        &self.entries[lo..hi]
    }

    /// Every cell within reach of `cell`, with its class index, nearest first.
    pub fn within_reach(&self, cell: CellIndex) -> impl Iterator<Item = (CellIndex, usize)> + '_ {
        (0..self.class_count()).flat_map(move |class| {
            self.neighbors(cell, class)
                .iter()
                .map(move |&c| (CellIndex(c), class))
        })
    }

    pub fn reach_size(&self, cell: CellIndex) -> usize {
        let base = cell.get() * (self.class_count() + 1);
        (self.starts[base + self.class_count()] - self.starts[base]) as usize
    }

    /// Same class layout and grid size.
    pub fn compatible_with(&self, other: &DistanceClassTable) -> bool {
        self.cells == other.cells
            && self.classes.len() == other.classes.len()
            && self
                .classes
                .iter()
                .zip(&other.classes)
                .all(|(a, b)| (a - b).abs() <= CLASS_MERGE_TOL_M)
    }
}
