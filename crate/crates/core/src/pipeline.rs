//! Trip file in, result archive out.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::info;

use crate::archive::{
    parse_clock, Archive, ArchiveRow, ChoiceSummary, InputSummary, Manifest, RunSummary, ServiceLevel,
    AGGREGATION_NOTE, FORMAT, FORMAT_VERSION,
};
use crate::availability::{AvailabilityTimeline, PeriodScheme, TimelineError, DAY_SECONDS};
use crate::choice::ThresholdDistribution;
use crate::em::{EmConfig, InitMode};
use crate::grid::{DistanceClassTable, GridError, GridSpec, LatLon};
use crate::ingest::{
    bin_trips, derive_availability, parse_trips, perfect_rebalance, trip_events, Field, Horizon, IngestError,
    IngestReport, SchemaConfig,
};
use crate::model::{ModelError, ModelInputs, PreparedModel};

pub const GENERATOR: &str = concat!("demand-core ", env!("CARGO_PKG_VERSION"));
const SIGMA_SOLVE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum PeriodSpec {
    /// One period per hour of the service window.
    Hourly,
    /// This many equal periods over the service window.
    Count(usize),
}

impl fmt::Display for PeriodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeriodSpec::Hourly => f.write_str("hourly"),
            PeriodSpec::Count(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for PeriodSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("hourly") {
            return Ok(PeriodSpec::Hourly);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(PeriodSpec::Count(n)),
            _ => Err(format!("expected \"hourly\" or a positive period count, got {s:?}")),
        }
    }
}

impl From<PeriodSpec> for String {
    fn from(p: PeriodSpec) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for PeriodSpec {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

/// Parses `uniform`, `trips`, or `gamma=G`.
pub fn parse_init(s: &str) -> Result<InitMode, String> {
    match s {
        "uniform" => Ok(InitMode::Uniform),
        "trips" | "trip" => Ok(InitMode::Trips),
        _ => {
            let g = s
                .strip_prefix("gamma=")
                .and_then(|g| g.parse::<f64>().ok())
                .ok_or_else(|| format!("expected uniform, trips or gamma=G, got {s:?}"))?;
            Ok(InitMode::GammaBlend(g))
        }
    }
}

pub fn init_label(m: InitMode) -> String {
    match m {
        InitMode::Uniform => "uniform".into(),
        InitMode::Trips => "trips".into(),
        InitMode::GammaBlend(g) => format!("gamma={g}"),
    }
}

mod init_string {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &InitMode, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&init_label(*m))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<InitMode, D::Error> {
        let s = String::deserialize(d)?;
        parse_init(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RebalanceMode {
    /// Follow vehicles when every trip has a vehicle id, else rebalance.
    Auto,
    Perfect,
    Derive,
}

impl FromStr for RebalanceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(RebalanceMode::Auto),
            "perfect" => Ok(RebalanceMode::Perfect),
            "derive" => Ok(RebalanceMode::Derive),
            _ => Err(format!("expected auto, perfect or derive, got {s:?}")),
        }
    }
}

/// Everything that controls one estimation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateParams {
    pub cell_width: f64,
    pub p0: f64,
    pub dist_max: f64,
    pub periods: PeriodSpec,
    /// `HH:MM-HH:MM`; the whole day when absent.
    pub service_hours: Option<String>,
    #[serde(with = "init_string")]
    pub init: InitMode,
    pub tol: f64,
    pub max_iters: usize,
    pub alpha_floor: f64,
    pub rebalance: RebalanceMode,
    /// Hours after midnight at which a rebalancing day starts.
    pub day_boundary_hours: f64,
    pub utc_offset_minutes: i32,
    pub delimiter: char,
    pub columns: std::collections::BTreeMap<Field, String>,
    pub seed: u64,
}

impl Default for EstimateParams {
    fn default() -> Self {
        Self {
            cell_width: 400.0,
            p0: 0.7,
            dist_max: 1000.0,
            periods: PeriodSpec::Hourly,
            service_hours: None,
            init: InitMode::Uniform,
            tol: crate::em::DEFAULT_TOL,
            max_iters: crate::em::DEFAULT_MAX_ITERS,
            alpha_floor: crate::em::DEFAULT_ALPHA_FLOOR,
            rebalance: RebalanceMode::Auto,
            day_boundary_hours: 0.0,
            utc_offset_minutes: 0,
            delimiter: ',',
            columns: Default::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl EstimateParams {
    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            init: self.init,
            tol: self.tol,
            max_iters: self.max_iters,
            alpha_floor: self.alpha_floor,
        }
    }

    pub fn schema(&self) -> SchemaConfig {
        SchemaConfig {
            delimiter: self.delimiter,
            utc_offset_minutes: self.utc_offset_minutes,
            columns: self.columns.clone(),
            bounds: None,
        }
    }

    /// Service window in seconds after midnight.
    pub fn window(&self) -> Result<(f64, f64), String> {
        match &self.service_hours {
            None => Ok((0.0, DAY_SECONDS)),
            Some(s) => {
                let (a, b) = s.split_once('-').ok_or_else(|| format!("expected HH:MM-HH:MM, got {s:?}"))?;
                let (a, b) = (
                    parse_clock(a).ok_or_else(|| format!("bad start time {a:?}"))?,
                    parse_clock(b).ok_or_else(|| format!("bad end time {b:?}"))?,
                );
                if b <= a {
                    return Err("service hours must end after they start".into());
                }
                Ok((a, b))
            }
        }
    }

    pub fn period_scheme(&self) -> Result<PeriodScheme, String> {
        let (start, end) = self.window()?;
        let count = match self.periods {
            PeriodSpec::Hourly => {
                let hours = (end - start) / 3600.0;
                if (hours - hours.round()).abs() > 1e-9 {
                    return Err("hourly periods need a service window of whole hours".into());
                }
                hours.round() as usize
            }
            PeriodSpec::Count(n) => n,
        };
        PeriodScheme::over_window(start, end, count).map_err(|e| e.to_string())
    }

    /// All field problems at once.
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errors = Vec::new();
        let mut bad = |field: &str, message: String| {
            errors.push(FieldError {
                field: field.into(),
                message,
            })
        };
        if !(self.cell_width > 0.0 && self.cell_width.is_finite()) {
            bad("cell_width", format!("must be a positive number of meters, got {}", self.cell_width));
        }
        if !(self.dist_max >= 0.0 && self.dist_max.is_finite()) {
            bad("dist_max", format!("must be a non-negative number of meters, got {}", self.dist_max));
        }
        if !(self.p0 > 0.0 && self.p0 <= 1.0) {
            bad("p0", format!("must lie in (0, 1], got {}", self.p0));
        } else if self.cell_width > 0.0 && self.dist_max >= 0.0 && self.cell_width.is_finite() {
            if let Err(e) = self.choice_probe() {
                bad("p0", e);
            }
        }
        if !(self.tol > 0.0) {
            bad("tol", format!("must be positive, got {}", self.tol));
        }
        if self.max_iters == 0 {
            bad("max_iters", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha_floor) {
            bad("alpha_floor", format!("must lie in [0, 1], got {}", self.alpha_floor));
        }
        if !(0.0..=1.0).contains(&self.init.gamma()) {
            bad("init", format!("gamma must lie in [0, 1], got {}", self.init.gamma()));
        }
        if let Err(e) = self.period_scheme() {
            bad(if self.service_hours.is_some() { "service_hours" } else { "periods" }, e);
        }
        if !(0.0..24.0).contains(&self.day_boundary_hours) {
            bad("day_boundary_hours", format!("must lie in [0, 24), got {}", self.day_boundary_hours));
        }
        if self.utc_offset_minutes.abs() > 18 * 60 {
            bad("utc_offset_minutes", format!("must lie within +-1080, got {}", self.utc_offset_minutes));
        }
        if !self.delimiter.is_ascii() {
            bad("delimiter", "must be a single ASCII character".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Checks that `p0` is reachable for this cell width and reach, on a
    /// grid just large enough to contain every distance class.
    fn choice_probe(&self) -> Result<(), String> {
        let span = (self.dist_max / self.cell_width).ceil() as usize * 2 + 1;
        let grid = GridSpec::new(LatLon::new(0.0, 0.0), self.cell_width, span, span).map_err(|e| e.to_string())?;
        let table = DistanceClassTable::build(&grid, self.dist_max);
        ThresholdDistribution::from_p0(self.p0, &table, SIGMA_SOLVE_TOL)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Parsing,
    Availability,
    ChoiceProbabilities,
    Estimating,
    Writing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Progress {
    Stage { stage: Stage },
    Iteration { iteration: usize, change: f64 },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid parameters: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidParams(Vec<FieldError>),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("no usable trips: {} rows read, {} dropped", .0.rows_read, .0.dropped_total())]
    NoTrips(Box<IngestReport>),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct RunOutput {
    pub archive: Archive,
    pub report: IngestReport,
}

/// A trip file turned into a model ready for estimation.
pub struct PreparedRun {
    pub inputs: ModelInputs,
    pub model: PreparedModel,
    pub horizon: Horizon,
    pub report: IngestReport,
}

/// Parses trips, reconstructs availability and computes the choice and
/// censoring probabilities.
pub fn prepare(input: &[u8], params: &EstimateParams, mut progress: impl FnMut(Progress)) -> Result<PreparedRun, PipelineError> {
    params.validate().map_err(PipelineError::InvalidParams)?;
    let periods = params.period_scheme().expect("validated");

    progress(Progress::Stage { stage: Stage::Parsing });
    let (raw, mut report) = parse_trips(input, &params.schema())?;
    let Some(horizon) = Horizon::from_trips(&raw) else {
        return Err(PipelineError::NoTrips(Box::new(report)));
    };
    let points: Vec<LatLon> = raw.iter().flat_map(|t| [t.start, t.end]).collect();
    let grid = GridSpec::build(&points, params.cell_width, params.cell_width)?;
    let binned = bin_trips(&raw, &grid, &horizon)?;

    progress(Progress::Stage { stage: Stage::Availability });
    let derive = match params.rebalance {
        RebalanceMode::Derive => true,
        RebalanceMode::Perfect => false,
        RebalanceMode::Auto => binned.iter().all(|t| t.vehicle_id.is_some()),
    };
    let events = if derive {
        let d = derive_availability(&binned)?;
        report.inserted_moves = d.inserted_moves;
        d.events
    } else {
        perfect_rebalance(&binned, params.day_boundary_hours * 3600.0)
    };
    let timeline = AvailabilityTimeline::build(events, &grid, horizon.days, periods)?;
    let (trips, out_of_hours) = trip_events(&binned, &periods);
    report.exclude_out_of_hours(out_of_hours);
    if out_of_hours > 0 {
        info!(out_of_hours, "trips outside the service window are not estimated");
    }

    progress(Progress::Stage { stage: Stage::ChoiceProbabilities });
    let table = DistanceClassTable::build(&grid, params.dist_max);
    let choice = ThresholdDistribution::from_p0(params.p0, &table, SIGMA_SOLVE_TOL).map_err(ModelError::from)?;
    let inputs = ModelInputs {
        grid,
        table,
        choice,
        timeline,
        trips,
    };
    let model = inputs.prepare()?;
    Ok(PreparedRun {
        inputs,
        model,
        horizon,
        report,
    })
}

/// Parses trips, reconstructs availability, runs EM and the naive
/// estimator, and assembles the archive.
pub fn run(input: &[u8], params: &EstimateParams, mut progress: impl FnMut(Progress)) -> Result<RunOutput, PipelineError> {
    let PreparedRun {
        inputs,
        model: prepared,
        horizon,
        report,
    } = prepare(input, params, &mut progress)?;
    let periods = *inputs.timeline.periods();

    progress(Progress::Stage { stage: Stage::Estimating });
    let est = prepared.estimate(params.em_config(), |iteration, change| {
        progress(Progress::Iteration { iteration, change })
    })?;

    progress(Progress::Stage { stage: Stage::Writing });
    let grid = &inputs.grid;
    let m = grid.cell_count();
    let trip_rates = prepared.problem.trip_rates();
    let alpha = &prepared.problem.alpha;
    let mut rows = Vec::with_capacity(periods.count * m);
    for h in 0..periods.count {
        for cell in grid.cells() {
            let i = cell.get();
            let center = grid.center(cell);
            let (row, col) = grid.row_col(cell);
            let mu_em = est.em.rates.get(h, i);
            let a = alpha.get(h, i);
            let trip_rate = trip_rates[h * m + i];
            rows.push(ArchiveRow {
                period: h,
                cell: cell.id(),
                row,
                col,
                center_lat: center.lat,
                center_lon: center.lon,
                mu_em,
                mu_naive: est.naive.get(h, i),
                alpha: a,
                trip_rate,
                avail_frac: prepared.profile.availability_fraction(h, i),
                category: ServiceLevel::classify(a, mu_em, trip_rate, params.alpha_floor),
            });
        }
    }
    let estimable = est.em.rates.estimable.iter().filter(|&&e| e).count();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        generator: GENERATOR.into(),
        grid: grid.clone(),
        periods,
        days: horizon.days,
        origin_date: Some(horizon.origin.to_string()),
        choice: ChoiceSummary {
            p0: inputs.choice.p0,
            sigma: inputs.choice.sigma,
            dist_max: inputs.choice.dist_max,
            boundaries: inputs.choice.boundaries.clone(),
            class_probs: inputs.choice.class_probs.clone(),
        },
        em: params.em_config(),
        run: RunSummary::from_diagnostics(&est.em.diagnostics, estimable, inputs.trips.len()),
        input: Some(InputSummary {
            sha256: sha256_hex(input),
            bytes: input.len(),
        }),
        ingest: Some(report.clone()),
        parameters: serde_json::to_value(params).expect("parameters serialize"),
        seed: params.seed,
        aggregation: AGGREGATION_NOTE.into(),
    };
    Ok(RunOutput {
        archive: Archive { manifest, rows },
        report,
    })
}
