use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use demand_core::em::EmConfig;
use demand_core::ingest::Field;
use demand_core::pipeline::{parse_init, EstimateParams, PeriodSpec, RebalanceMode};
use demand_core::simulation::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "demand", version, about = "Estimate latent micromobility demand from trips and vehicle availability")]
pub struct Cli {
    /// Cap on worker threads for the estimation engine.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Root for run outputs and the service workspace.
    #[arg(long, global = true, env = "DEMAND_WORKSPACE", default_value = "demand-workspace")]
    pub workspace: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate demand from a trip file and write a result archive.
    Estimate(EstimateArgs),
    /// Run the simulated-city experiment and print the error table.
    Experiment(ExperimentArgs),
    /// Compare EM results across blended initializations.
    Sensitivity(SensitivityArgs),
    /// Summarize a result archive.
    Inspect(InspectArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Trip file (CSV).
    #[arg(long)]
    pub trips: Option<PathBuf>,
    /// JSON parameter file; flags given here override it.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Grid cell width in meters [default: 400]
    #[arg(long)]
    pub cell_width: Option<f64>,
    /// Probability that a user only walks within their own cell [default: 0.7]
    #[arg(long)]
    pub p0: Option<f64>,
    /// Maximum walking distance in meters [default: 1000]
    #[arg(long)]
    pub max_dist: Option<f64>,
    /// `hourly` or a number of equal periods [default: hourly]
    #[arg(long)]
    pub periods: Option<String>,
    /// Service window, HH:MM-HH:MM [default: whole day]
    #[arg(long)]
    pub service_hours: Option<String>,
    /// auto, perfect or derive [default: auto]
    #[arg(long)]
    pub rebalance: Option<String>,
    /// Hour after midnight at which a rebalancing day starts [default: 0]
    #[arg(long)]
    pub day_boundary_hours: Option<f64>,
    /// Offset applied to timestamps without one, in minutes [default: 0]
    #[arg(long, allow_hyphen_values = true)]
    pub utc_offset_minutes: Option<i32>,
    /// Field delimiter [default: ,]
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Column for a field, FIELD=HEADER, e.g. start_time=started_at
    #[arg(long = "column", value_name = "FIELD=HEADER")]
    pub columns: Vec<String>,
    /// Recorded in the manifest [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EmArgs {
    /// Convergence tolerance on the max-abs rate change [default: 1e-6]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Iteration cap [default: 1000]
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Cells with censoring probability below this are not estimated [default: 0.01]
    #[arg(long)]
    pub alpha_floor: Option<f64>,
}

impl EmArgs {
    pub fn apply(&self, cfg: &mut EmConfig) -> Result<(), String> {
        if let Some(v) = self.tol {
            cfg.tol = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.alpha_floor {
            cfg.alpha_floor = v;
        }
        cfg.validate().map_err(|e| e.to_string())
    }
}

impl DatasetArgs {
    /// Defaults, then the parameter file, then flags.
    pub fn params(&self, em: &EmArgs, init: Option<&str>) -> Result<EstimateParams, String> {
        let mut p = match &self.params {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => EstimateParams::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag.clone() {
                    p.$field = v;
                }
            )*};
        }
        set!(cell_width => cell_width, p0 => p0, max_dist => dist_max, day_boundary_hours => day_boundary_hours,
             utc_offset_minutes => utc_offset_minutes, delimiter => delimiter, seed => seed);
        if let Some(s) = &self.periods {
            p.periods = s.parse::<PeriodSpec>()?;
        }
        if let Some(s) = &self.service_hours {
            p.service_hours = Some(s.clone());
        }
        if let Some(s) = &self.rebalance {
            p.rebalance = s.parse::<RebalanceMode>()?;
        }
        for c in &self.columns {
            let (field, header) = c.split_once('=').ok_or_else(|| format!("--column expects FIELD=HEADER, got {c:?}"))?;
            let field: Field = serde_json::from_value(serde_json::Value::String(field.trim().to_string()))
                .map_err(|_| format!("unknown field {field:?} in --column"))?;
            p.columns.insert(field, header.trim().to_string());
        }
        if let Some(s) = init {
            p.init = parse_init(s)?;
        }
        let mut cfg = p.em_config();
        em.apply(&mut cfg)?;
        (p.tol, p.max_iters, p.alpha_floor) = (cfg.tol, cfg.max_iters, cfg.alpha_floor);
        Ok(p)
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[command(flatten)]
    pub em: EmArgs,
    /// EM start: uniform, trips or gamma=G [default: uniform]
    #[arg(long)]
    pub init: Option<String>,
    /// Output directory for archive.csv and manifest.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Comma-separated availability probabilities
    #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    pub p_list: String,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 30)]
    pub days: usize,
    #[arg(long, default_value_t = 0.7)]
    pub p0: f64,
    #[arg(long, default_value_t = ExperimentConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = 400.0)]
    pub cell_width: f64,
    #[arg(long, default_value_t = 1000.0)]
    pub max_dist: f64,
    #[command(flatten)]
    pub em: EmArgs,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ExperimentArgs {
    pub fn config(&self) -> Result<ExperimentConfig, String> {
        let p_values = self
            .p_list
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| format!("bad probability {s:?} in --p-list")))
            .collect::<Result<Vec<_>, _>>()?;
        let mut cfg = ExperimentConfig {
            cell_width: self.cell_width,
            days: self.days,
            replications: self.reps,
            p_values,
            p0: self.p0,
            dist_max: self.max_dist,
            seed: self.seed,
            ..Default::default()
        };
        self.em.apply(&mut cfg.em)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Fixture {
    TwoPoint,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    /// START:END:STEP or a comma-separated list
    #[arg(long, default_value = "0:1:0.1")]
    pub gammas: String,
    #[arg(long, value_enum)]
    pub fixture: Option<Fixture>,
    /// Days simulated for the fixture
    #[arg(long, default_value_t = 50)]
    pub fixture_days: usize,
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[command(flatten)]
    pub em: EmArgs,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// `0:1:0.1` or `0,0.5,1`; every value must lie in [0, 1].
pub fn parse_gammas(s: &str) -> Result<Vec<f64>, String> {
    let bad = || format!("expected START:END:STEP or a comma list, got {s:?}");
    let values: Vec<f64> = if s.contains(':') {
        let parts: Vec<f64> = s
            .split(':')
            .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let [start, end, step] = parts[..] else { return Err(bad()) };
        if !(step > 0.0) || end < start {
            return Err(bad());
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        // round away accumulated float noise so 0.1 steps print cleanly
        (0..=n).map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12).collect()
    } else {
        s.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if values.is_empty() || values.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(format!("gammas must lie in [0, 1], got {s:?}"));
    }
    Ok(values)
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Result archive
    pub archive: PathBuf,
    /// N, aggregate or HH:MM-HH:MM
    #[arg(long, default_value = "aggregate")]
    pub period: String,
    /// Rows in the top-demand listing
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Print the layer set as JSON instead
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Service workspace [default: WORKSPACE/service]
    #[arg(long = "service-dir")]
    pub workspace: Option<PathBuf>,
    /// Jobs executed concurrently
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}
