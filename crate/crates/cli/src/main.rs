mod args;
mod run_dir;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use demand_core::archive::{layers, Archive, LayerSelection, ServiceLevel};
use demand_core::em::EmConfig;
use demand_core::pipeline::{self, sha256_hex, PipelineError, Progress};
use demand_core::simulation::{layout_grid, run_experiment, sensitivity_study, two_point_fixture};
use serde_json::json;

use args::{Cli, Command, EstimateArgs, ExperimentArgs, Fixture, InspectArgs, SensitivityArgs, ServeArgs};
use run_dir::{InputRecord, RunDir};

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn report(&self, extra: serde_json::Value) -> String {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        let mut doc = json!({ "error": kind, "message": message });
        if let (Some(obj), serde_json::Value::Object(more)) = (doc.as_object_mut(), extra) {
            obj.extend(more);
        }
        doc.to_string()
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("input file {} does not exist", path.display())));
    }
    fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))
}

fn pipeline_error(e: PipelineError) -> (CliError, serde_json::Value) {
    match e {
        PipelineError::InvalidParams(fields) => {
            let extra = json!({ "fields": fields });
            (CliError::Usage("invalid parameters".into()), extra)
        }
        PipelineError::NoTrips(report) => {
            let extra = json!({ "ingest": report });
            (CliError::Runtime(PipelineError::NoTrips(report).to_string()), extra)
        }
        other => (runtime(other), json!({})),
    }
}

fn estimate(args: &EstimateArgs, cli: &Cli) -> Result<(), (CliError, serde_json::Value)> {
    let plain = |e: CliError| (e, json!({}));
    let params = args.dataset.params(&args.em, args.init.as_deref()).map_err(|e| plain(CliError::Usage(e)))?;
    let path = args.dataset.trips.as_deref().ok_or_else(|| plain(CliError::Usage("--trips is required".into())))?;
    let input = read_input(path).map_err(plain)?;
    if let Err(fields) = params.validate() {
        return Err((CliError::Usage("invalid parameters".into()), json!({ "fields": fields })));
    }
    let dir = RunDir::create(cli, "estimate", args.out.as_deref()).map_err(plain)?;

    let mut last_stage = None;
    let out = pipeline::run(&input, &params, |p| {
        if let Progress::Stage { stage } = p {
            if last_stage != Some(stage) {
                eprintln!("stage: {stage:?}");
                last_stage = Some(stage);
            }
        }
    })
    .map_err(pipeline_error)?;

    let archive_path = dir.write("archive.csv", out.archive.to_text().as_bytes()).map_err(plain)?;
    let input_record = InputRecord {
        path: path.display().to_string(),
        sha256: sha256_hex(&input),
        bytes: input.len(),
    };
    dir.write_manifest(cli, serde_json::to_value(&params).expect("params serialize"), params.seed, Some(input_record))
        .map_err(plain)?;

    let m = &out.archive.manifest;
    let r = &m.run;
    println!("trips kept       {} of {} rows", out.report.rows_kept, out.report.rows_read);
    println!("grid             {} x {} cells of {} m", m.grid.rows, m.grid.cols, m.grid.cell_width);
    println!("periods          {} over {} days", m.periods.count, m.days);
    println!("cells estimable  {} of {}", r.estimable_cells, m.grid.cell_count() * m.periods.count);
    println!("iterations       {} (converged: {})", r.iterations, r.converged);
    match r.final_log_likelihood() {
        Some(ll) => println!("log-likelihood   {ll:.6}"),
        None => println!("log-likelihood   n/a"),
    }
    let flagged = out.archive.rows.iter().filter(|row| row.category == ServiceLevel::LowService).count();
    println!("low-service rows {flagged}");
    println!("archive          {}", archive_path.display());
    Ok(())
}

fn experiment(args: &ExperimentArgs, cli: &Cli) -> Result<()> {
    let cfg = args.config().map_err(CliError::Usage)?;
    cfg.validate().map_err(CliError::Usage)?;
    let dir = RunDir::create(cli, "experiment", args.out.as_deref())?;
    let report = run_experiment(&cfg).map_err(runtime)?;

    println!("{}", layout_grid(cfg.cell_width).render());
    print!("{}", report.table());
    let t = &report.trends;
    for b in &t.border_dominance {
        println!("border max error EM < naive at p={:.1}: {}/{}", b.p, b.em_wins, b.replications);
    }
    let verdict = |ok: bool| if ok { "pass" } else { "fail" };
    println!("trend border dominance (>= 7 of 10): {}", verdict(t.border_dominance_ok));
    println!("trend EM mean error non-increasing: {}", verdict(t.em_non_increasing));
    println!("trend naive mean error non-increasing: {}", verdict(t.naive_non_increasing));
    match (t.zero_availability_none_max, t.zero_availability_ok) {
        (Some((naive, em)), Some(ok)) => {
            println!("trend p=0 no-demand max error naive={naive:.3} em={em:.3}: {}", verdict(ok))
        }
        _ => println!("trend p=0 no-demand pattern: not evaluated (p=0 not in list)"),
    }

    dir.write("summary.csv", report.to_csv().as_bytes())?;
    let full = serde_json::to_vec_pretty(&report).expect("report serializes");
    dir.write("report.json", &full)?;
    let flags = serde_json::to_value(&cfg).expect("config serializes");
    dir.write_manifest(cli, flags, cfg.seed, None)?;
    println!("written to {}", dir.path().display());
    Ok(())
}

fn sensitivity(args: &SensitivityArgs, cli: &Cli) -> Result<(), (CliError, serde_json::Value)> {
    let plain = |e: CliError| (e, json!({}));
    let gammas = args::parse_gammas(&args.gammas).map_err(|e| plain(CliError::Usage(e)))?;
    let mut base = EmConfig::default();
    args.em.apply(&mut base).map_err(|e| plain(CliError::Usage(e)))?;

    let (model, flags, seed, input) = match (args.fixture, args.dataset.trips.as_deref()) {
        (Some(_), Some(_)) => return Err(plain(CliError::Usage("use either --fixture or --trips".into()))),
        (None, None) => return Err(plain(CliError::Usage("one of --fixture or --trips is required".into()))),
        (Some(Fixture::TwoPoint), None) => {
            let model = two_point_fixture(args.fixture_days).prepare().map_err(|e| plain(runtime(e)))?;
            let flags = json!({ "fixture": "two-point", "days": args.fixture_days, "em": base });
            (model, flags, 0, None)
        }
        (None, Some(path)) => {
            let params = args.dataset.params(&args.em, None).map_err(|e| plain(CliError::Usage(e)))?;
            let bytes = read_input(path).map_err(plain)?;
            let prepared = pipeline::prepare(&bytes, &params, |_| {}).map_err(pipeline_error)?;
            let record = InputRecord {
                path: path.display().to_string(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len(),
            };
            let flags = serde_json::to_value(&params).expect("params serialize");
            (prepared.model, flags, params.seed, Some(record))
        }
    };
    let dir = RunDir::create(cli, "sensitivity", args.out.as_deref()).map_err(plain)?;
    let rows = sensitivity_study(&model, &gammas, base).map_err(|e| plain(runtime(e)))?;

    println!("{:>6} {:>12} {:>12} {:>12} {:>6} {:>9}", "gamma", "largest", "p99", "median", "iters", "converged");
    let mut csv = String::from("gamma,largest,p99,median,iterations,converged\n");
    for r in &rows {
        println!(
            "{:>6.2} {:>12.6} {:>12.6} {:>12.6} {:>6} {:>9}",
            r.gamma, r.largest, r.p99, r.median, r.iterations, r.converged
        );
        csv += &format!("{},{},{},{},{},{}\n", r.gamma, r.largest, r.p99, r.median, r.iterations, r.converged);
    }
    dir.write("sensitivity.csv", csv.as_bytes()).map_err(plain)?;
    let mut flags = flags;
    flags["gammas"] = json!(gammas);
    dir.write_manifest(cli, flags, seed, input).map_err(plain)?;
    println!("written to {}", dir.path().display());
    Ok(())
}

fn inspect(args: &InspectArgs) -> Result<()> {
    let text = String::from_utf8(read_input(&args.archive)?).map_err(|_| runtime("archive is not UTF-8 text"))?;
    let archive = Archive::parse(&text).map_err(runtime)?;
    let selection = LayerSelection::parse(&args.period)
        .ok_or_else(|| CliError::Usage(format!("expected N, aggregate or HH:MM-HH:MM, got {:?}", args.period)))?;
    let set = layers(&archive, selection).map_err(|e| CliError::Usage(e.to_string()))?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&set).expect("layers serialize"));
        return Ok(());
    }

    let m = &archive.manifest;
    println!("format           {} v{} ({})", m.format, m.version, m.generator);
    println!("grid             {} x {} cells of {} m", m.grid.rows, m.grid.cols, m.grid.cell_width);
    println!("periods          {} of {} s from {} s", m.periods.count, m.periods.length, m.periods.start);
    println!("days             {}", m.days);
    println!("p0 / dist_max    {:.4} / {} m", m.choice.p0, m.choice.dist_max);
    println!("iterations       {} (converged: {})", m.run.iterations, m.run.converged);
    if let Some(input) = &m.input {
        println!("input sha256     {}", input.sha256);
    }
    println!("selection        periods {:?}", set.periods);
    for level in [ServiceLevel::Ok, ServiceLevel::LowService, ServiceLevel::InsufficientData] {
        let n = set.cells.iter().filter(|c| c.service_level == level).count();
        println!("{:<18} {n}", level.as_str());
    }
    let mut ranked: Vec<_> = set.cells.iter().filter(|c| c.demand.is_some()).collect();
    ranked.sort_by(|a, b| b.demand.partial_cmp(&a.demand).expect("finite demand"));
    println!("\n{:>6} {:>4} {:>4} {:>10} {:>10} {:>8} {:>8}  level", "cell", "row", "col", "demand", "trips", "avail", "alpha");
    for c in ranked.iter().take(args.top) {
        println!(
            "{:>6} {:>4} {:>4} {:>10.4} {:>10.4} {:>8.4} {:>8.4}  {}",
            c.cell,
            c.row,
            c.col,
            c.demand.unwrap_or(0.0),
            c.trip_rate,
            c.availability,
            c.alpha,
            c.service_level.as_str()
        );
    }
    Ok(())
}

fn serve(args: &ServeArgs, cli: &Cli) -> Result<()> {
    let workspace = args.workspace.clone().unwrap_or_else(|| cli.workspace.join("service"));
    let mut config = demand_service::ServiceConfig::new(workspace);
    config.workers = args.workers;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)?;
    rt.block_on(demand_service::serve(config, args.addr)).map_err(runtime)
}

fn dispatch(cli: &Cli) -> Result<(), (CliError, serde_json::Value)> {
    let plain = |e: CliError| (e, json!({}));
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| plain(runtime(e)))?;
    }
    match &cli.command {
        Command::Estimate(a) => estimate(a, cli),
        Command::Experiment(a) => experiment(a, cli).map_err(plain),
        Command::Sensitivity(a) => sensitivity(a, cli),
        Command::Inspect(a) => inspect(a).map_err(plain),
        Command::Serve(a) => serve(a, cli).map_err(plain),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.report(json!({})));
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("DEMAND_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((e, extra)) => {
            eprintln!("{}", e.report(extra));
            ExitCode::from(e.exit_code())
        }
    }
}
