//! Result archive: one manifest line followed by a table with one row per
//! (period, cell).
//!
//! ```text
//! #manifest {"format":"demand-archive",...}
//! period,cell,row,col,center_lat,center_lon,mu_em,mu_naive,alpha,trip_rate,avail_frac,category
//! 0,1,0,0,41.80180,-71.40240,0.5,0.5,1,0.5,1,ok
//! ```
//!
//! Cells are numbered from 1 in row-major order. Masked estimates are
//! empty fields. Floats use the shortest representation that reads back
//! to the same value, so parsing and rewriting an archive is lossless.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::availability::PeriodScheme;
use crate::em::{EmConfig, EmDiagnostics};
use crate::grid::{CellIndex, GridSpec};
use crate::ingest::IngestReport;

pub const FORMAT: &str = "demand-archive";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_PREFIX: &str = "#manifest ";
pub const COLUMNS: [&str; 12] = [
    "period",
    "cell",
    "row",
    "col",
    "center_lat",
    "center_lon",
    "mu_em",
    "mu_naive",
    "alpha",
    "trip_rate",
    "avail_frac",
    "category",
];
/// Estimated demand at least this multiple of the observed trip rate is
/// flagged as low service.
pub const LOW_SERVICE_RATIO: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum ArchiveError {
    #[error("archive does not start with a manifest line")]
    MissingManifest,
    #[error("manifest is not valid: {0}")]
    BadManifest(String),
    #[error("unsupported archive format {format:?} version {version}")]
    UnsupportedFormat { format: String, version: u32 },
    #[error("table header must be {expected:?}, found {found:?}")]
    BadHeader { expected: String, found: String },
    #[error("line {line}: {message}")]
    BadRow { line: usize, message: String },
    #[error("archive has {found} rows, manifest describes {expected}")]
    Incomplete { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceLevel {
    Ok,
    LowService,
    InsufficientData,
}

impl ServiceLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            ServiceLevel::Ok => "ok",
            ServiceLevel::LowService => "low_service",
            ServiceLevel::InsufficientData => "insufficient_data",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(ServiceLevel::Ok),
            "low_service" => Some(ServiceLevel::LowService),
            "insufficient_data" => Some(ServiceLevel::InsufficientData),
            _ => None,
        }
    }

    /// A cell needs `alpha >= floor` to be rated at all; it is low service
    /// when its positive estimated demand is at least twice its trip rate.
    pub fn classify(alpha: f64, mu: Option<f64>, trip_rate: f64, alpha_floor: f64) -> Self {
        match mu {
            Some(mu) if alpha >= alpha_floor => {
                if mu > 0.0 && mu >= LOW_SERVICE_RATIO * trip_rate {
                    ServiceLevel::LowService
                } else {
                    ServiceLevel::Ok
                }
            }
            _ => ServiceLevel::InsufficientData,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceSummary {
    pub p0: f64,
    pub sigma: f64,
    pub dist_max: f64,
    pub boundaries: Vec<f64>,
    pub class_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    pub converged: bool,
    pub final_change: f64,
    /// `null` marks a non-finite value.
    pub log_likelihood: Vec<Option<f64>>,
    pub fallback_trips: usize,
    pub unassignable_trips: usize,
    pub estimable_cells: usize,
    pub trips: usize,
}

impl RunSummary {
    pub fn from_diagnostics(d: &EmDiagnostics, estimable_cells: usize, trips: usize) -> Self {
        Self {
            iterations: d.iterations,
            converged: d.converged,
            final_change: if d.final_change.is_finite() { d.final_change } else { 0.0 },
            log_likelihood: d.log_likelihood.iter().map(|v| v.is_finite().then_some(*v)).collect(),
            fallback_trips: d.fallback_trips,
            unassignable_trips: d.unassignable_trips,
            estimable_cells,
            trips,
        }
    }

    pub fn final_log_likelihood(&self) -> Option<f64> {
        self.log_likelihood.last().copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub generator: String,
    pub grid: GridSpec,
    pub periods: PeriodScheme,
    pub days: usize,
    pub origin_date: Option<String>,
    pub choice: ChoiceSummary,
    pub em: EmConfig,
    pub run: RunSummary,
    pub input: Option<InputSummary>,
    pub ingest: Option<IngestReport>,
    /// Every parameter the run was started with.
    pub parameters: serde_json::Value,
    pub seed: u64,
    pub aggregation: String,
}

pub const AGGREGATION_NOTE: &str =
    "window layers average estimable-period rates, trip rates, alpha and availability; categories are computed from those means";

impl Manifest {
    pub fn check_format(&self) -> Result<(), ArchiveError> {
        if self.format != FORMAT || self.version != FORMAT_VERSION {
            return Err(ArchiveError::UnsupportedFormat {
                format: self.format.clone(),
                version: self.version,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRow {
    pub period: usize,
    /// One-based, row-major.
    pub cell: u32,
    pub row: usize,
    pub col: usize,
    pub center_lat: f64,
    pub center_lon: f64,
    pub mu_em: Option<f64>,
    pub mu_naive: Option<f64>,
    pub alpha: f64,
    pub trip_rate: f64,
    pub avail_frac: f64,
    pub category: ServiceLevel,
}

impl ArchiveRow {
    pub fn cell_index(&self) -> CellIndex {
        CellIndex(self.cell - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub manifest: Manifest,
    pub rows: Vec<ArchiveRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Archive {
    pub fn row(&self, period: usize, cell: CellIndex) -> &ArchiveRow {
        &self.rows[period * self.manifest.grid.cell_count() + cell.get()]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(96 * (self.rows.len() + 4));
        out.push_str(MANIFEST_PREFIX);
        out.push_str(&serde_json::to_string(&self.manifest).expect("manifest serializes"));
        out.push('\n');
        out.push_str(&COLUMNS.join(","));
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.period,
                r.cell,
                r.row,
                r.col,
                r.center_lat,
                r.center_lon,
                opt(r.mu_em),
                opt(r.mu_naive),
                r.alpha,
                r.trip_rate,
                r.avail_frac,
                r.category.as_str()
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ArchiveError> {
        let mut lines = text.lines();
        let first = lines.next().ok_or(ArchiveError::MissingManifest)?;
        let json = first.strip_prefix(MANIFEST_PREFIX).ok_or(ArchiveError::MissingManifest)?;
        let manifest: Manifest = serde_json::from_str(json).map_err(|e| ArchiveError::BadManifest(e.to_string()))?;
        manifest.check_format()?;

        let header = lines.next().unwrap_or("");
        let expected = COLUMNS.join(",");
        if header.trim_end() != expected {
            return Err(ArchiveError::BadHeader {
                expected,
                found: header.to_string(),
            });
        }
        let cells = manifest.grid.cell_count();
        let total = manifest.periods.count * cells;
        let mut rows = Vec::with_capacity(total);
        for (k, line) in lines.enumerate() {
            let line_no = k + 3;
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| ArchiveError::BadRow { line: line_no, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != COLUMNS.len() {
                return Err(bad(format!("expected {} fields, found {}", COLUMNS.len(), f.len())));
            }
            let float = |i: usize| f[i].parse::<f64>().map_err(|_| bad(format!("{} is not a number", COLUMNS[i])));
            let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad(format!("{} is not an integer", COLUMNS[i])));
            let optional = |i: usize| if f[i].is_empty() { Ok(None) } else { float(i).map(Some) };
            let row = ArchiveRow {
                period: int(0)?,
                cell: int(1)? as u32,
                row: int(2)?,
                col: int(3)?,
                center_lat: float(4)?,
                center_lon: float(5)?,
                mu_em: optional(6)?,
                mu_naive: optional(7)?,
                alpha: float(8)?,
                trip_rate: float(9)?,
                avail_frac: float(10)?,
                category: ServiceLevel::parse(f[11]).ok_or_else(|| bad(format!("unknown category {:?}", f[11])))?,
            };
            let k = rows.len();
            if row.period != k / cells || row.cell as usize != k % cells + 1 {
                return Err(bad(format!(
                    "expected period {} cell {}, found period {} cell {}",
                    k / cells,
                    k % cells + 1,
                    row.period,
                    row.cell
                )));
            }
            rows.push(row);
        }
        if rows.len() != total {
            return Err(ArchiveError::Incomplete {
                expected: total,
                found: rows.len(),
            });
        }
        Ok(Self { manifest, rows })
    }
}

/// Which periods a layer request covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSelection {
    Period { period: usize },
    Aggregate,
    /// Time-of-day window in seconds; covers the periods lying inside it.
    Window { start: f64, end: f64 },
}

impl LayerSelection {
    /// Accepts `N`, `aggregate`, or `HH:MM-HH:MM`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("aggregate") || s.eq_ignore_ascii_case("all") {
            return Some(LayerSelection::Aggregate);
        }
        if let Ok(period) = s.parse::<usize>() {
            return Some(LayerSelection::Period { period });
        }
        let (a, b) = s.split_once('-')?;
        Some(LayerSelection::Window {
            start: parse_clock(a)?,
            end: parse_clock(b)?,
        })
    }
}

/// `HH:MM` to seconds after midnight; `24:00` is allowed.
pub fn parse_clock(s: &str) -> Option<f64> {
    let (h, m) = s.trim().split_once(':')?;
    let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
    if m >= 60 || h > 24 || (h == 24 && m > 0) {
        return None;
    }
    Some((h * 3600 + m * 60) as f64)
}

#[derive(Debug, Error, PartialEq)]
pub enum LayerError {
    #[error("period {period} does not exist; there are {periods}")]
    InvalidPeriod { period: usize, periods: usize },
    #[error("window covers no whole period")]
    EmptyWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCell {
    pub cell: u32,
    pub row: usize,
    pub col: usize,
    pub center_lat: f64,
    pub center_lon: f64,
    pub demand: Option<f64>,
    pub availability: f64,
    pub trip_rate: f64,
    pub alpha: f64,
    pub service_level: ServiceLevel,
}

/// The four map layers for one selection of periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSet {
    pub selection: LayerSelection,
    pub periods: Vec<usize>,
    pub grid: GridSpec,
    pub cells: Vec<LayerCell>,
}

pub fn layers(archive: &Archive, selection: LayerSelection) -> Result<LayerSet, LayerError> {
    let m = &archive.manifest;
    let count = m.periods.count;
    let periods: Vec<usize> = match selection {
        LayerSelection::Period { period } if period < count => vec![period],
        LayerSelection::Period { period } => return Err(LayerError::InvalidPeriod { period, periods: count }),
        LayerSelection::Aggregate => (0..count).collect(),
        LayerSelection::Window { start, end } => (0..count)
            .filter(|&h| {
                let (a, b) = m.periods.bounds(h);
                a >= start - 1e-9 && b <= end + 1e-9
            })
            .collect(),
    };
    if periods.is_empty() {
        return Err(LayerError::EmptyWindow);
    }
    let n = periods.len() as f64;
    let cells = m
        .grid
        .cells()
        .map(|cell| {
            let rows: Vec<&ArchiveRow> = periods.iter().map(|&h| archive.row(h, cell)).collect();
            let first = rows[0];
            let estimable: Vec<f64> = rows.iter().filter_map(|r| r.mu_em).collect();
            let demand = (!estimable.is_empty()).then(|| estimable.iter().sum::<f64>() / estimable.len() as f64);
            let availability = rows.iter().map(|r| r.avail_frac).sum::<f64>() / n;
            let trip_rate = rows.iter().map(|r| r.trip_rate).sum::<f64>() / n;
            let alpha = rows.iter().map(|r| r.alpha).sum::<f64>() / n;
            let service_level = if rows.len() == 1 {
                first.category
            } else {
                ServiceLevel::classify(alpha, demand, trip_rate, m.em.alpha_floor)
            };
            LayerCell {
                cell: first.cell,
                row: first.row,
                col: first.col,
                center_lat: first.center_lat,
                center_lon: first.center_lon,
                demand,
                availability,
                trip_rate,
                alpha,
                service_level,
            }
        })
        .collect();
    Ok(LayerSet {
        selection,
        periods,
        grid: m.grid.clone(),
        cells,
    })
}
