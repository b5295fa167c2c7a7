//! Synthetic experiments: a 12x12 grid with clustered demand and random
//! daily stocking, plus the initialization-sensitivity study.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::availability::{AvailabilityEvent, AvailabilityTimeline, EventSource, PeriodScheme, DAY_SECONDS};
use crate::choice::ThresholdDistribution;
use crate::em::{EmConfig, InitMode, TripEvent};
use crate::grid::{CellIndex, DistanceClassTable, GridSpec, LatLon};
use crate::model::{ModelError, ModelInputs, PreparedModel};

pub const LAYOUT_ROWS: usize = 12;
pub const LAYOUT_COLS: usize = 12;
const CLUSTER_CENTERS: [(usize, usize); 3] = [(2, 2), (2, 9), (8, 5)];
const ISOLATED: [(usize, usize); 5] = [(0, 6), (5, 11), (6, 0), (10, 1), (11, 10)];
const ORIGIN: LatLon = LatLon {
    lat: 41.80,
    lon: -71.44,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    ClusterCenter,
    Border,
    Isolated,
    None,
}

impl CellKind {
    pub const ALL: [CellKind; 4] = [CellKind::ClusterCenter, CellKind::Border, CellKind::Isolated, CellKind::None];

    pub fn true_rate(self) -> f64 {
        match self {
            CellKind::ClusterCenter => 10.0,
            CellKind::Border => 5.0,
            CellKind::Isolated => 2.0,
            CellKind::None => 0.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CellKind::ClusterCenter => "cluster_center",
            CellKind::Border => "border",
            CellKind::Isolated => "isolated",
            CellKind::None => "none",
        }
    }

    fn glyph(self) -> char {
        match self {
            CellKind::ClusterCenter => 'C',
            CellKind::Border => 'b',
            CellKind::Isolated => 'i',
            CellKind::None => '.',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub grid: GridSpec,
    pub kinds: Vec<CellKind>,
}

impl Layout {
    pub fn kind(&self, cell: CellIndex) -> CellKind {
        self.kinds[cell.get()]
    }

    pub fn true_rates(&self) -> Vec<f64> {
        self.kinds.iter().map(|k| k.true_rate()).collect()
    }

    /// One character per cell, north row first.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in (0..self.grid.rows).rev() {
            let line: String = (0..self.grid.cols)
                .map(|c| self.kind(self.grid.index(r, c)).glyph())
                .collect();
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Three cluster centers with their 8-neighbor borders and five isolated
/// cells, all further than 1000 m from any center.
pub fn layout_grid(cell_width: f64) -> Layout {
    let grid = GridSpec::new(ORIGIN, cell_width, LAYOUT_ROWS, LAYOUT_COLS).expect("fixed layout grid");
    let mut kinds = vec![CellKind::None; grid.cell_count()];
    for &(r, c) in &CLUSTER_CENTERS {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (rr, cc) = ((r as i64 + dr) as usize, (c as i64 + dc) as usize);
                kinds[grid.index(rr, cc).get()] = CellKind::Border;
            }
        }
    }
    for &(r, c) in &CLUSTER_CENTERS {
        kinds[grid.index(r, c).get()] = CellKind::ClusterCenter;
    }
    for &(r, c) in &ISOLATED {
        kinds[grid.index(r, c).get()] = CellKind::Isolated;
    }
    Layout { grid, kinds }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub cell_width: f64,
    pub days: usize,
    pub replications: usize,
    pub p_values: Vec<f64>,
    pub p0: f64,
    pub dist_max: f64,
    pub seed: u64,
    /// Vehicles placed in a stocked cell; pickups never deplete it.
    pub stock: u32,
    pub em: EmConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cell_width: 400.0,
            days: 30,
            replications: 10,
            p_values: (0..=10).map(|i| i as f64 / 10.0).collect(),
            p0: 0.7,
            dist_max: 1000.0,
            seed: 20_240_601,
            stock: 1000,
            em: EmConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.days == 0 || self.replications == 0 {
            return Err("days and replications must be positive".into());
        }
        if self.p_values.is_empty() || self.p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err("availability probabilities must lie in [0, 1]".into());
        }
        if self.stock == 0 {
            return Err("stock must be positive".into());
        }
        self.em.validate().map_err(|e| e.to_string())
    }
}

/// Random inputs of one replication. None of them depend on the
/// availability probability, so every p sees the same users.
#[derive(Debug, Clone)]
pub struct ReplicationDraws {
    /// Per (day, cell); a non-center cell is stocked on a day iff its
    /// uniform is below p.
    pub stock_uniforms: Vec<f64>,
    pub arrivals: Vec<Arrival>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub day: usize,
    pub cell: CellIndex,
    /// Seconds into the simulated period.
    pub offset: f64,
    pub threshold_u: f64,
    pub tie_u: f64,
}

pub const PERIOD_SECONDS: f64 = 3600.0;

pub fn draw_replication(layout: &Layout, days: usize, seed: u64, replication: usize) -> ReplicationDraws {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication as u64);
    let m = layout.grid.cell_count();
    let stock_uniforms = (0..days * m).map(|_| rng.random::<f64>()).collect();
    let mut arrivals = Vec::new();
    for day in 0..days {
        for (c, kind) in layout.kinds.iter().enumerate() {
            let rate = kind.true_rate();
            if rate <= 0.0 {
                continue;
            }
            let n = Poisson::new(rate).expect("positive rate").sample(&mut rng) as usize;
            for _ in 0..n {
                arrivals.push(Arrival {
                    day,
                    cell: CellIndex::from(c),
                    offset: rng.random::<f64>() * PERIOD_SECONDS,
                    threshold_u: rng.random(),
                    tie_u: rng.random(),
                });
            }
        }
    }
    ReplicationDraws {
        stock_uniforms,
        arrivals,
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedDay {
    pub trips: Vec<TripEvent>,
    pub events: Vec<AvailabilityEvent>,
    pub lost_users: usize,
}

/// Stocks cells for availability level `p` and lets each arrival take a
/// vehicle in its nearest stocked class, if that class is within its
/// threshold.
pub fn simulate_days(
    layout: &Layout,
    table: &DistanceClassTable,
    choice: &ThresholdDistribution,
    draws: &ReplicationDraws,
    days: usize,
    p: f64,
    stock: u32,
) -> SimulatedDay {
    let m = layout.grid.cell_count();
    let stocked: Vec<bool> = (0..days * m)
        .map(|k| layout.kinds[k % m] == CellKind::ClusterCenter || draws.stock_uniforms[k] < p)
        .collect();

    let mut events = Vec::new();
    for day in 0..days {
        let start = day as f64 * DAY_SECONDS;
        for c in 0..m {
            if stocked[day * m + c] {
                let cell = CellIndex::from(c);
                events.push(AvailabilityEvent::new(start, cell, stock as i32, EventSource::RebalanceAdd));
                events.push(AvailabilityEvent::new(
                    start + PERIOD_SECONDS,
                    cell,
                    -(stock as i32),
                    EventSource::RebalanceRemove,
                ));
            }
        }
    }

    let mut trips = Vec::new();
    let mut lost_users = 0;
    let mut candidates = Vec::new();
    for a in &draws.arrivals {
        let reach = choice.class_for_uniform(a.threshold_u);
        let row = &stocked[a.day * m..(a.day + 1) * m];
        let mut pickup = None;
        for class in 0..=reach {
            candidates.clear();
            candidates.extend(
                table
                    .neighbors(a.cell, class)
                    .iter()
                    .copied()
                    .filter(|&j| row[j as usize]),
            );
            if !candidates.is_empty() {
                // equal stock everywhere, so uniform over bikes is uniform over cells
                let k = ((a.tie_u * candidates.len() as f64) as usize).min(candidates.len() - 1);
                pickup = Some(CellIndex(candidates[k]));
                break;
            }
        }
        match pickup {
            Some(cell) => trips.push(TripEvent {
                time: a.day as f64 * DAY_SECONDS + a.offset,
                period: 0,
                cell,
            }),
            None => lost_users += 1,
        }
    }
    SimulatedDay {
        trips,
        events,
        lost_users,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Em,
    Naive,
    Realized,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Em, Algorithm::Naive, Algorithm::Realized];

    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Em => "EM",
            Algorithm::Naive => "Naive",
            Algorithm::Realized => "Realized",
        }
    }
}

/// Absolute per-cell errors of one replication at one availability level.
/// Masked estimates count as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub p: f64,
    pub replication: usize,
    pub trips: usize,
    pub lost_users: usize,
    pub em_iterations: usize,
    pub em_converged: bool,
    pub em_errors: Vec<f64>,
    pub naive_errors: Vec<f64>,
    pub realized_errors: Vec<f64>,
}

impl ReplicationResult {
    pub fn errors(&self, algorithm: Algorithm) -> &[f64] {
        match algorithm {
            Algorithm::Em => &self.em_errors,
            Algorithm::Naive => &self.naive_errors,
            Algorithm::Realized => &self.realized_errors,
        }
    }

    fn max_over(&self, algorithm: Algorithm, kinds: &[CellKind], kind: CellKind) -> f64 {
        self.errors(algorithm)
            .iter()
            .zip(kinds)
            .filter(|(_, &k)| k == kind)
            .map(|(e, _)| *e)
            .fold(0.0, f64::max)
    }
}

pub fn run_replication(
    cfg: &ExperimentConfig,
    layout: &Layout,
    table: &DistanceClassTable,
    choice: &ThresholdDistribution,
    draws: &ReplicationDraws,
    p: f64,
    replication: usize,
) -> Result<ReplicationResult, ModelError> {
    let sim = simulate_days(layout, table, choice, draws, cfg.days, p, cfg.stock);
    let periods = PeriodScheme::new(0.0, PERIOD_SECONDS, 1)?;
    let timeline = AvailabilityTimeline::build(sim.events, &layout.grid, cfg.days, periods)?;
    let inputs = ModelInputs {
        grid: layout.grid.clone(),
        table: table.clone(),
        choice: choice.clone(),
        timeline,
        trips: sim.trips,
    };
    let prepared = inputs.prepare()?;
    let est = prepared.estimate(cfg.em, |_, _| {})?;

    let m = layout.grid.cell_count();
    let k = cfg.days as f64;
    let mut arrivals = vec![0.0; m];
    for a in &draws.arrivals {
        arrivals[a.cell.get()] += 1.0;
    }
    let truth = layout.true_rates();
    let err = |f: &dyn Fn(usize) -> f64| (0..m).map(|i| (f(i) - truth[i]).abs()).collect::<Vec<_>>();
    Ok(ReplicationResult {
        p,
        replication,
        trips: inputs.trips.len(),
        lost_users: sim.lost_users,
        em_iterations: est.em.diagnostics.iterations,
        em_converged: est.em.diagnostics.converged,
        em_errors: err(&|i| est.em.rates.value_or_zero(0, i)),
        naive_errors: err(&|i| est.naive.value_or_zero(0, i)),
        realized_errors: err(&|i| arrivals[i] / k),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    All,
    Kind(CellKind),
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::All,
        Category::Kind(CellKind::ClusterCenter),
        Category::Kind(CellKind::Border),
        Category::Kind(CellKind::Isolated),
        Category::Kind(CellKind::None),
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::All => "all",
            Category::Kind(k) => k.label(),
        }
    }

    fn contains(self, kind: CellKind) -> bool {
        match self {
            Category::All => true,
            Category::Kind(k) => k == kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub algorithm: Algorithm,
    pub category: Category,
    pub p: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BorderDominance {
    pub p: f64,
    /// Replications where EM's border max error is below naive's.
    pub em_wins: usize,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub border_dominance: Vec<BorderDominance>,
    pub border_dominance_ok: bool,
    /// Mean absolute error over all cells and replications, per p.
    pub em_mean_error: Vec<(f64, f64)>,
    pub naive_mean_error: Vec<(f64, f64)>,
    pub em_non_increasing: bool,
    pub naive_non_increasing: bool,
    /// `(naive, em)` max error on no-demand cells at p = 0.
    pub zero_availability_none_max: Option<(f64, f64)>,
    pub zero_availability_ok: Option<bool>,
}

impl TrendReport {
    pub fn all_ok(&self) -> bool {
        self.border_dominance_ok
            && self.em_non_increasing
            && self.naive_non_increasing
            && self.zero_availability_ok.unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub sigma: f64,
    pub layout: Layout,
    pub replications: Vec<ReplicationResult>,
    pub summary: Vec<ErrorRow>,
    pub trends: TrendReport,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ModelError> {
    cfg.validate().map_err(crate::em::EmError::InvalidConfig)?;
    let layout = layout_grid(cfg.cell_width);
    let table = DistanceClassTable::build(&layout.grid, cfg.dist_max);
    let choice = ThresholdDistribution::from_p0(cfg.p0, &table, 1e-10)?;
    let draws: Vec<ReplicationDraws> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| draw_replication(&layout, cfg.days, cfg.seed, r))
        .collect();

    let jobs: Vec<(f64, usize)> = cfg
        .p_values
        .iter()
        .flat_map(|&p| (0..cfg.replications).map(move |r| (p, r)))
        .collect();
    let replications = jobs
        .par_iter()
        .map(|&(p, r)| run_replication(cfg, &layout, &table, &choice, &draws[r], p, r))
        .collect::<Result<Vec<_>, _>>()?;

    let summary = summarize(&layout.kinds, &cfg.p_values, &replications);
    let trends = evaluate_trends(&layout.kinds, &cfg.p_values, &replications);
    Ok(ExperimentReport {
        config: cfg.clone(),
        sigma: choice.sigma,
        layout,
        replications,
        summary,
        trends,
    })
}

/// Pools cells and replications per (algorithm, category, p).
pub fn summarize(kinds: &[CellKind], p_values: &[f64], results: &[ReplicationResult]) -> Vec<ErrorRow> {
    let mut rows = Vec::new();
    for algorithm in Algorithm::ALL {
        for category in Category::ALL {
            for &p in p_values {
                let mut pooled: Vec<f64> = results
                    .iter()
                    .filter(|r| r.p == p)
                    .flat_map(|r| {
                        r.errors(algorithm)
                            .iter()
                            .zip(kinds)
                            .filter(|(_, k)| category.contains(**k))
                            .map(|(e, _)| *e)
                    })
                    .collect();
                let n = pooled.len().max(1) as f64;
                let mean = pooled.iter().sum::<f64>() / n;
                let max = pooled.iter().copied().fold(0.0, f64::max);
                rows.push(ErrorRow {
                    algorithm,
                    category,
                    p,
                    median: median(&mut pooled),
                    max,
                    mean,
                });
            }
        }
    }
    rows
}

pub fn evaluate_trends(kinds: &[CellKind], p_values: &[f64], results: &[ReplicationResult]) -> TrendReport {
    let at = |p: f64| results.iter().filter(move |r| r.p == p);
    let mut ps: Vec<f64> = p_values.to_vec();
    ps.sort_by(f64::total_cmp);
    ps.dedup();

    let border_dominance: Vec<BorderDominance> = ps
        .iter()
        .filter(|&&p| (0.05..=0.55).contains(&p))
        .map(|&p| {
            let reps: Vec<&ReplicationResult> = at(p).collect();
            let em_wins = reps
                .iter()
                .filter(|r| {
                    r.max_over(Algorithm::Em, kinds, CellKind::Border)
                        < r.max_over(Algorithm::Naive, kinds, CellKind::Border)
                })
                .count();
            BorderDominance {
                p,
                em_wins,
                replications: reps.len(),
            }
        })
        .collect();
    let border_dominance_ok = border_dominance.iter().all(|b| 10 * b.em_wins >= 7 * b.replications);

    let mean_error = |algorithm: Algorithm| -> Vec<(f64, f64)> {
        ps.iter()
            .map(|&p| {
                let (sum, n) = at(p).fold((0.0, 0usize), |(s, n), r| {
                    (s + r.errors(algorithm).iter().sum::<f64>(), n + r.errors(algorithm).len())
                });
                (p, sum / n.max(1) as f64)
            })
            .collect()
    };
    let non_increasing = |v: &[(f64, f64)]| v.windows(2).all(|w| w[1].1 <= w[0].1);
    let em_mean_error = mean_error(Algorithm::Em);
    let naive_mean_error = mean_error(Algorithm::Naive);

    let zero_availability_none_max = ps.iter().any(|&p| p == 0.0).then(|| {
        let max = |a| at(0.0).map(|r| r.max_over(a, kinds, CellKind::None)).fold(0.0, f64::max);
        (max(Algorithm::Naive), max(Algorithm::Em))
    });
    TrendReport {
        border_dominance,
        border_dominance_ok,
        em_non_increasing: non_increasing(&em_mean_error),
        naive_non_increasing: non_increasing(&naive_mean_error),
        em_mean_error,
        naive_mean_error,
        zero_availability_ok: zero_availability_none_max.map(|(naive, em)| naive == 0.0 && em > 0.0),
        zero_availability_none_max,
    }
}

impl ExperimentReport {
    pub fn row(&self, algorithm: Algorithm, category: Category, p: f64) -> Option<&ErrorRow> {
        self.summary
            .iter()
            .find(|r| r.algorithm == algorithm && r.category == category && r.p == p)
    }

    /// Median and max error per category and algorithm, one column per p.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16}{:<8}{:<10}", "category", "measure", "algorithm");
        for p in &self.config.p_values {
            let _ = write!(out, "{:>7.1}", p);
        }
        out.push('\n');
        for category in Category::ALL {
            for (measure, pick) in [("median", 0), ("max", 1)] {
                for algorithm in Algorithm::ALL {
                    let _ = write!(out, "{:<16}{:<8}{:<10}", category.label(), measure, algorithm.label());
                    for &p in &self.config.p_values {
                        let v = self
                            .row(algorithm, category, p)
                            .map(|r| if pick == 0 { r.median } else { r.max })
                            .unwrap_or(f64::NAN);
                        let _ = write!(out, "{:>7.2}", v);
                    }
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("algorithm,category,p,median,max,mean\n");
        for r in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.algorithm.label(),
                r.category.label(),
                r.p,
                r.median,
                r.max,
                r.mean
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub gamma: f64,
    pub largest: f64,
    pub p99: f64,
    pub median: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs EM once per gamma-blended initialization and compares each result
/// with the trip-rate initialization over estimable cells.
pub fn sensitivity_study(
    model: &PreparedModel,
    gammas: &[f64],
    base: EmConfig,
) -> Result<Vec<SensitivityRow>, ModelError> {
    let run = |gamma: f64| {
        let cfg = EmConfig {
            init: InitMode::GammaBlend(gamma),
            ..base
        };
        crate::em::run_em(&model.problem, cfg)
    };
    let reference = run(0.0)?;
    let results = gammas
        .par_iter()
        .map(|&g| if g == 0.0 { Ok(reference.clone()) } else { run(g) })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(gammas
        .iter()
        .zip(results)
        .map(|(&gamma, r)| {
            let mut diffs: Vec<f64> = reference
                .rates
                .values
                .iter()
                .zip(&r.rates.values)
                .zip(&reference.rates.estimable)
                .filter(|(_, &e)| e)
                .map(|((a, b), _)| (a - b).abs())
                .collect();
            diffs.sort_by(f64::total_cmp);
            let largest = diffs.last().copied().unwrap_or(0.0);
            let p99 = nearest_rank(&diffs, 0.99);
            SensitivityRow {
                gamma,
                largest,
                p99,
                median: median(&mut diffs),
                iterations: r.diagnostics.iterations,
                converged: r.diagnostics.converged,
            }
        })
        .collect())
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Fixture for the sensitivity study: a 7x8 grid with two active cells two
/// columns apart, one permanently parked vehicle in each, and ten
/// instantaneous round trips per hour from each for `days` days.
pub fn two_point_fixture(days: usize) -> ModelInputs {
    let grid = GridSpec::new(ORIGIN, 400.0, 7, 8).expect("fixture grid");
    let table = DistanceClassTable::build(&grid, 1000.0);
    let choice = ThresholdDistribution::from_p0(0.7, &table, 1e-10).expect("feasible p0");
    let active = [grid.index(3, 3), grid.index(3, 5)];
    let events = active
        .iter()
        .map(|&c| AvailabilityEvent::new(0.0, c, 1, EventSource::TripEnd))
        .collect();
    let periods = PeriodScheme::hourly();
    let timeline = AvailabilityTimeline::build(events, &grid, days, periods).expect("valid fixture");
    let mut trips = Vec::new();
    for day in 0..days {
        for h in 0..periods.count {
            for q in 0..10 {
                for &cell in &active {
                    trips.push(TripEvent {
                        time: day as f64 * DAY_SECONDS + h as f64 * 3600.0 + (q as f64 + 0.5) * 360.0,
                        period: h,
                        cell,
                    });
                }
            }
        }
    }
    ModelInputs {
        grid,
        table,
        choice,
        timeline,
        trips,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_structure() {
        let layout = layout_grid(400.0);
        let count = |k| layout.kinds.iter().filter(|&&x| x == k).count();
        assert_eq!(count(CellKind::ClusterCenter), 3);
        assert_eq!(count(CellKind::Border), 24);
        assert_eq!(count(CellKind::Isolated), 5);
        let centers: Vec<CellIndex> = layout.grid.cells().filter(|&c| layout.kind(c) == CellKind::ClusterCenter).collect();
        for cell in layout.grid.cells() {
            let (r, c) = layout.grid.row_col(cell);
            match layout.kind(cell) {
                CellKind::Border => assert!(centers.iter().any(|&z| {
                    let (zr, zc) = layout.grid.row_col(z);
                    r.abs_diff(zr) <= 1 && c.abs_diff(zc) <= 1
                })),
                CellKind::Isolated => {
                    for &z in &centers {
                        assert!(layout.grid.center_distance(cell, z) > 1000.0);
                    }
                }
                _ => {}
            }
        }
        assert_eq!(
            CellKind::ALL.map(|k| k.true_rate()),
            [10.0, 5.0, 2.0, 0.0]
        );
        assert_eq!(layout.render().lines().count(), 12);
    }

    fn setup() -> (Layout, DistanceClassTable, ThresholdDistribution) {
        let layout = layout_grid(400.0);
        let table = DistanceClassTable::build(&layout.grid, 1000.0);
        let choice = ThresholdDistribution::from_p0(0.7, &table, 1e-10).unwrap();
        (layout, table, choice)
    }

    #[test]
    fn full_availability_every_arrival_rides_from_home() {
        let (layout, table, choice) = setup();
        let draws = draw_replication(&layout, 30, 7, 0);
        let sim = simulate_days(&layout, &table, &choice, &draws, 30, 1.0, 1000);
        assert_eq!(sim.trips.len(), draws.arrivals.len());
        assert_eq!(sim.lost_users, 0);
        for (t, a) in sim.trips.iter().zip(&draws.arrivals) {
            assert_eq!(t.cell, a.cell);
        }
        // Poisson mean: 30 days of 3*10 + 24*5 + 5*2 = 160 per day
        let mean = 30.0 * 160.0;
        assert!((draws.arrivals.len() as f64 - mean).abs() < 3.0 * mean.sqrt());
    }

    #[test]
    fn zero_availability_trips_only_near_clusters() {
        let (layout, table, choice) = setup();
        let draws = draw_replication(&layout, 30, 7, 0);
        let sim = simulate_days(&layout, &table, &choice, &draws, 30, 0.0, 1000);
        for t in &sim.trips {
            assert_eq!(layout.kind(t.cell), CellKind::ClusterCenter);
        }
        let centers: Vec<CellIndex> = layout.grid.cells().filter(|&c| layout.kind(c) == CellKind::ClusterCenter).collect();
        let served = sim.trips.len() + sim.lost_users;
        assert_eq!(served, draws.arrivals.len());
        // every isolated user is lost
        for a in &draws.arrivals {
            let near = centers.iter().any(|&z| layout.grid.center_distance(a.cell, z) < 1000.0);
            if !near {
                assert_eq!(layout.kind(a.cell), CellKind::Isolated);
            }
        }
    }

    #[test]
    fn replication_is_deterministic() {
        let (layout, table, choice) = setup();
        let cfg = ExperimentConfig::default();
        let draws = draw_replication(&layout, 30, 11, 3);
        let a = run_replication(&cfg, &layout, &table, &choice, &draws, 0.3, 3).unwrap();
        let again = draw_replication(&layout, 30, 11, 3);
        let b = run_replication(&cfg, &layout, &table, &choice, &again, 0.3, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_availability_em_matches_naive() {
        let (layout, table, choice) = setup();
        let cfg = ExperimentConfig::default();
        let draws = draw_replication(&layout, 30, 5, 0);
        let r = run_replication(&cfg, &layout, &table, &choice, &draws, 1.0, 0).unwrap();
        for (a, b) in r.em_errors.iter().zip(&r.naive_errors) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(r.naive_errors, r.realized_errors);
    }

    #[test]
    fn median_and_percentile() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        let v: Vec<f64> = (1..=100).map(|x| x as f64).collect();
        assert_eq!(nearest_rank(&v, 0.99), 99.0);
        assert_eq!(nearest_rank(&v, 1.0), 100.0);
    }

    #[test]
    fn sensitivity_reference_row_is_zero_and_rich_availability_is_flat() {
        let fixture = two_point_fixture(5);
        let prepared = fixture.prepare().unwrap();
        let rows = sensitivity_study(&prepared, &[0.0, 0.5], EmConfig::default()).unwrap();
        assert_eq!((rows[0].largest, rows[0].p99, rows[0].median), (0.0, 0.0, 0.0));

        // every cell stocked all day: each trip's only candidate is its own cell
        let (layout, table, choice) = setup();
        let draws = draw_replication(&layout, 5, 1, 0);
        let sim = simulate_days(&layout, &table, &choice, &draws, 5, 1.0, 1000);
        let periods = PeriodScheme::new(0.0, PERIOD_SECONDS, 1).unwrap();
        let timeline = AvailabilityTimeline::build(sim.events, &layout.grid, 5, periods).unwrap();
        let inputs = ModelInputs {
            grid: layout.grid.clone(),
            table,
            choice,
            timeline,
            trips: sim.trips,
        };
        let prepared = inputs.prepare().unwrap();
        let rows = sensitivity_study(&prepared, &[0.0, 0.3, 1.0], EmConfig::default()).unwrap();
        for r in rows {
            assert_eq!(r.median, 0.0);
            assert!(r.largest < 1e-6);
        }
    }
}
