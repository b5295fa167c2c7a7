//! Expectation-maximization for censored Poisson arrival rates.
//!
//! Each observed trip is a draw from a mixture over origin cells: a user
//! arriving in cell `i` would have picked the trip's vehicle with probability
//! `pi[x][i]`. The E-step splits every trip over its candidate origins in
//! proportion to `pi * mu`; the M-step sets each rate to the expected number
//! of attributed trips per day divided by the probability `alpha` that an
//! arrival in that cell finds a vehicle at all.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::availability::{split_time, AlphaMatrix, AvailabilityTimeline, NearestBikeProfile, Occupancy};
use crate::choice::ChoiceModel;
use crate::grid::{CellIndex, DistanceClassTable};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 1000;
pub const DEFAULT_ALPHA_FLOOR: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmError {
    #[error("trip #{trip} departs cell {cell} at t={time}, but no vehicle is available there")]
    EmptyPickupCell { trip: usize, cell: u32, time: f64 },
    #[error("trip #{trip} has period {period}, but only {periods} periods exist")]
    PeriodOutOfRange { trip: usize, period: usize, periods: usize },
    #[error("trip #{trip} at t={time} is outside the {days}-day horizon")]
    TripOutsideHorizon { trip: usize, time: f64, days: usize },
    #[error("invalid EM configuration: {0}")]
    InvalidConfig(String),
}

/// One observed trip: start time, period, pickup cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripEvent {
    pub time: f64,
    pub period: usize,
    pub cell: CellIndex,
}

/// Sparse choice probabilities of one trip over candidate origin cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PiVector {
    pub entries: Vec<(CellIndex, f64)>,
}

impl PiVector {
    pub fn get(&self, cell: CellIndex) -> f64 {
        self.entries
            .binary_search_by_key(&cell, |e| e.0)
            .map(|k| self.entries[k].1)
            .unwrap_or(0.0)
    }
}

/// Choice probabilities for a trip picking up in `pickup`, given the
/// occupancy just before its start.
pub fn pi_from_occupancy(
    pickup: CellIndex,
    occupancy: &Occupancy<'_>,
    model: &(impl ChoiceModel + ?Sized),
) -> Option<PiVector> {
    let here = occupancy.count(pickup);
    if here <= 0 {
        return None;
    }
    let survival = model.survival();
    let mut entries: Vec<(CellIndex, f64)> = occupancy
        .table()
        .within_reach(pickup)
        .filter_map(|(origin, class)| {
            // the pickup cell is `class` away from `origin`; it is only
            // considered when that class is the nearest nonempty one
            if occupancy.nearest(origin) != Some(class) {
                return None;
            }
            let nearest_bikes = occupancy.class_bikes(origin, class);
            let p = survival[class] * here as f64 / nearest_bikes as f64;
            (p > 0.0).then_some((origin, p))
        })
        .collect();
    entries.sort_by_key(|e| e.0);
    Some(PiVector { entries })
}

/// Choice probabilities of one trip against an explicit count snapshot.
pub fn pi_vector(
    trip: &TripEvent,
    snapshot: &[u32],
    table: &DistanceClassTable,
    model: &(impl ChoiceModel + ?Sized),
) -> Result<PiVector, EmError> {
    let occupancy = Occupancy::new(table, snapshot);
    pi_from_occupancy(trip.cell, &occupancy, model).ok_or(EmError::EmptyPickupCell {
        trip: 0,
        cell: trip.cell.0,
        time: trip.time,
    })
}

/// Choice probabilities for every trip, from one replay sweep per day.
pub fn compute_pi(
    timeline: &AvailabilityTimeline,
    table: &DistanceClassTable,
    model: &(impl ChoiceModel + Sync + ?Sized),
    trips: &[TripEvent],
) -> Result<Vec<PiVector>, EmError> {
    let days = timeline.days();
    let mut by_day: Vec<Vec<usize>> = vec![Vec::new(); days];
    for (x, trip) in trips.iter().enumerate() {
        let (day, _) = split_time(trip.time);
        if trip.time < 0.0 || day >= days {
            return Err(EmError::TripOutsideHorizon {
                trip: x,
                time: trip.time,
                days,
            });
        }
        by_day[day].push(x);
    }
    for list in &mut by_day {
        list.sort_by(|&a, &b| trips[a].time.total_cmp(&trips[b].time).then(a.cmp(&b)));
    }

    let per_day: Vec<Result<Vec<(usize, PiVector)>, EmError>> = by_day
        .par_iter()
        .enumerate()
        .map(|(day, list)| {
            if list.is_empty() {
                return Ok(Vec::new());
            }
            let mut replay = timeline.replay_day(day, table);
            let mut out = Vec::with_capacity(list.len());
            for &x in list {
                let trip = &trips[x];
                replay.advance_to_pickup(trip.time);
                let pi = pi_from_occupancy(trip.cell, replay.occupancy(), model).ok_or(
                    EmError::EmptyPickupCell {
                        trip: x,
                        cell: trip.cell.0,
                        time: trip.time,
                    },
                )?;
                out.push((x, pi));
            }
            Ok(out)
        })
        .collect();

    let mut pis = vec![PiVector::default(); trips.len()];
    for day in per_day {
        for (x, pi) in day? {
            pis[x] = pi;
        }
    }
    Ok(pis)
}

/// Estimated arrivals per period per cell per day. Cells whose `alpha` is
/// below the floor carry no estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMatrix {
    pub periods: usize,
    pub cells: usize,
    pub values: Vec<f64>,
    pub estimable: Vec<bool>,
}

impl RateMatrix {
    pub fn zeros(periods: usize, cells: usize) -> Self {
        Self {
            periods,
            cells,
            values: vec![0.0; periods * cells],
            estimable: vec![true; periods * cells],
        }
    }

    pub fn get(&self, h: usize, cell: usize) -> Option<f64> {
        let k = h * self.cells + cell;
        self.estimable[k].then(|| self.values[k])
    }

    /// Masked entries read as zero.
    pub fn value_or_zero(&self, h: usize, cell: usize) -> f64 {
        self.get(h, cell).unwrap_or(0.0)
    }

    pub fn max_abs_diff(&self, other: &RateMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .zip(&self.estimable)
            .filter(|(_, &e)| e)
            .map(|((a, b), _)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "gamma", rename_all = "snake_case")]
pub enum InitMode {
    /// Same rate in every estimable cell, scaled to the period's trip count.
    Uniform,
    /// Observed trip rate of each cell.
    Trips,
    /// `gamma * uniform + (1 - gamma) * trips`.
    GammaBlend(f64),
}

impl InitMode {
    pub fn gamma(&self) -> f64 {
        match *self {
            InitMode::Uniform => 1.0,
            InitMode::Trips => 0.0,
            InitMode::GammaBlend(g) => g,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub init: InitMode,
    pub tol: f64,
    pub max_iters: usize,
    pub alpha_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            init: InitMode::Uniform,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            alpha_floor: DEFAULT_ALPHA_FLOOR,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), EmError> {
        if !(self.tol > 0.0) {
            return Err(EmError::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        let g = self.init.gamma();
        if !(0.0..=1.0).contains(&g) {
            return Err(EmError::InvalidConfig(format!("gamma must lie in [0, 1], got {g}")));
        }
        if !(0.0..=1.0).contains(&self.alpha_floor) {
            return Err(EmError::InvalidConfig(format!(
                "alpha floor must lie in [0, 1], got {}",
                self.alpha_floor
            )));
        }
        Ok(())
    }
}

/// Everything the EM iteration needs: trips, their choice probabilities,
/// and the censoring probabilities.
#[derive(Debug, Clone)]
pub struct EmProblem {
    pub trips: Vec<TripEvent>,
    pub pi: Vec<PiVector>,
    pub alpha: AlphaMatrix,
    pub days: usize,
}

impl EmProblem {
    pub fn new(trips: Vec<TripEvent>, pi: Vec<PiVector>, alpha: AlphaMatrix, days: usize) -> Result<Self, EmError> {
        assert_eq!(trips.len(), pi.len(), "one choice vector per trip");
        for (x, t) in trips.iter().enumerate() {
            if t.period >= alpha.periods {
                return Err(EmError::PeriodOutOfRange {
                    trip: x,
                    period: t.period,
                    periods: alpha.periods,
                });
            }
        }
        Ok(Self { trips, pi, alpha, days })
    }

    pub fn periods(&self) -> usize {
        self.alpha.periods
    }

    pub fn cells(&self) -> usize {
        self.alpha.cells
    }

    pub fn estimable_mask(&self, alpha_floor: f64) -> Vec<bool> {
        self.alpha.values.iter().map(|&a| a >= alpha_floor && a > 0.0).collect()
    }

    /// Observed trips per day in each (period, cell).
    pub fn trip_rates(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.periods() * self.cells()];
        for t in &self.trips {
            counts[t.period * self.cells() + t.cell.get()] += 1.0;
        }
        let k = self.days as f64;
        counts.iter_mut().for_each(|c| *c /= k);
        counts
    }
}

/// Membership weights of every trip over its candidate origin cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipWeights {
    pub weights: Vec<Vec<(CellIndex, f64)>>,
    /// Trips whose candidates all had zero rate; weighted by `pi` alone.
    pub fallback_trips: usize,
    /// Trips with no estimable candidate cell; they carry no weight.
    pub unassignable_trips: usize,
}

/// Attributes each trip to candidate origins in proportion to `pi * mu`.
pub fn e_step(problem: &EmProblem, rates: &RateMatrix) -> MembershipWeights {
    let m = problem.cells();
    let mut fallback_trips = 0;
    let mut unassignable_trips = 0;
    let weights = problem
        .trips
        .iter()
        .zip(&problem.pi)
        .map(|(trip, pi)| {
            let base = trip.period * m;
            let candidates: Vec<(CellIndex, f64, f64)> = pi
                .entries
                .iter()
                .filter(|(c, _)| rates.estimable[base + c.get()])
                .map(|&(c, p)| (c, p, rates.values[base + c.get()]))
                .collect();
            if candidates.is_empty() {
                unassignable_trips += 1;
                return Vec::new();
            }
            let denom: f64 = candidates.iter().map(|(_, p, mu)| p * mu).sum();
            if denom > 0.0 {
                candidates.iter().map(|&(c, p, mu)| (c, p * mu / denom)).collect()
            } else {
                fallback_trips += 1;
                let total: f64 = candidates.iter().map(|(_, p, _)| p).sum();
                candidates.iter().map(|&(c, p, _)| (c, p / total)).collect()
            }
        })
        .collect();
    MembershipWeights {
        weights,
        fallback_trips,
        unassignable_trips,
    }
}

/// Rate update: attributed trips per day divided by `alpha`.
pub fn m_step(problem: &EmProblem, weights: &MembershipWeights, alpha_floor: f64) -> RateMatrix {
    let (h_count, m) = (problem.periods(), problem.cells());
    let mut sums = vec![0.0; h_count * m];
    for (trip, w) in problem.trips.iter().zip(&weights.weights) {
        for &(c, v) in w {
            sums[trip.period * m + c.get()] += v;
        }
    }
    let estimable = problem.estimable_mask(alpha_floor);
    let k = problem.days as f64;
    let values = sums
        .iter()
        .zip(&problem.alpha.values)
        .zip(&estimable)
        .map(|((s, a), &e)| if e { s / k / a } else { 0.0 })
        .collect();
    RateMatrix {
        periods: h_count,
        cells: m,
        values,
        estimable,
    }
}

/// Observed-data log-likelihood up to a constant:
/// `sum_x log(sum_i pi[x][i] mu[h_x][i]) - k sum_{h,i} alpha[h][i] mu[h][i]`
/// over estimable cells. Trips with no estimable candidate are skipped; a
/// trip whose candidates all have zero rate makes the value `-inf`.
pub fn log_likelihood(problem: &EmProblem, rates: &RateMatrix) -> f64 {
    let m = problem.cells();
    let mut ll = 0.0;
    for (trip, pi) in problem.trips.iter().zip(&problem.pi) {
        let base = trip.period * m;
        let mut any = false;
        let mut s = 0.0;
        for &(c, p) in &pi.entries {
            if rates.estimable[base + c.get()] {
                any = true;
                s += p * rates.values[base + c.get()];
            }
        }
        if any {
            if s <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += s.ln();
        }
    }
    let k = problem.days as f64;
    let exposure: f64 = rates
        .values
        .iter()
        .zip(&problem.alpha.values)
        .zip(&rates.estimable)
        .filter(|(_, &e)| e)
        .map(|((mu, a), _)| a * mu)
        .sum();
    ll - k * exposure
}

/// Choice probabilities of one period's trips restricted to estimable
/// cells, in compressed rows.
#[derive(Debug, Clone, Default)]
struct PeriodRows {
    offsets: Vec<usize>,
    cells: Vec<u32>,
    probs: Vec<f64>,
    assignable: usize,
    unassignable: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood of the initial rates and of every iterate.
    pub log_likelihood: Vec<f64>,
    /// Trip-iterations that hit the zero-denominator fallback.
    pub fallback_trips: usize,
    pub unassignable_trips: usize,
    /// Trips carrying weight in each period.
    pub assignable_by_period: Vec<usize>,
    pub final_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmResult {
    pub rates: RateMatrix,
    pub diagnostics: EmDiagnostics,
}

/// Stateful EM run. `step` performs one E-step and one M-step.
pub struct EmEngine<'a> {
    problem: &'a EmProblem,
    config: EmConfig,
    rows: Vec<PeriodRows>,
    rates: RateMatrix,
    diagnostics: EmDiagnostics,
}

impl<'a> EmEngine<'a> {
    pub fn new(problem: &'a EmProblem, config: EmConfig) -> Result<Self, EmError> {
        config.validate()?;
        let (h_count, m) = (problem.periods(), problem.cells());
        let estimable = problem.estimable_mask(config.alpha_floor);

        let mut by_period: Vec<Vec<usize>> = vec![Vec::new(); h_count];
        for (x, trip) in problem.trips.iter().enumerate() {
            by_period[trip.period].push(x);
        }
        let rows: Vec<PeriodRows> = by_period
            .iter()
            .enumerate()
            .map(|(h, list)| {
                let mut r = PeriodRows {
                    offsets: vec![0],
                    ..Default::default()
                };
                for &x in list {
                    let before = r.cells.len();
                    for &(c, p) in &problem.pi[x].entries {
                        if estimable[h * m + c.get()] {
                            r.cells.push(c.0);
                            r.probs.push(p);
                        }
                    }
                    if r.cells.len() > before {
                        r.offsets.push(r.cells.len());
                        r.assignable += 1;
                    } else {
                        r.unassignable += 1;
                    }
                }
                r
            })
            .collect();

        let k = problem.days as f64;
        let trip_rates = problem.trip_rates();
        let gamma = config.init.gamma();
        let mut values = vec![0.0; h_count * m];
        for h in 0..h_count {
            let n_est = (0..m).filter(|&i| estimable[h * m + i]).count();
            let uniform = if n_est > 0 {
                rows[h].assignable as f64 / (k * n_est as f64)
            } else {
                0.0
            };
            for i in 0..m {
                let idx = h * m + i;
                if estimable[idx] {
                    values[idx] = gamma * uniform + (1.0 - gamma) * trip_rates[idx];
                }
            }
        }

        let unassignable = rows.iter().map(|r| r.unassignable).sum();
        if problem.trips.is_empty() {
            warn!("no trips to estimate from; all estimable rates are zero");
        }
        if unassignable > 0 {
            warn!(unassignable, "trips without an estimable origin cell carry no weight");
        }
        let diagnostics = EmDiagnostics {
            unassignable_trips: unassignable,
            assignable_by_period: rows.iter().map(|r| r.assignable).collect(),
            final_change: f64::INFINITY,
            ..Default::default()
        };
        Ok(Self {
            problem,
            config,
            rows,
            rates: RateMatrix {
                periods: h_count,
                cells: m,
                values,
                estimable,
            },
            diagnostics,
        })
    }

    pub fn rates(&self) -> &RateMatrix {
        &self.rates
    }

    pub fn diagnostics(&self) -> &EmDiagnostics {
        &self.diagnostics
    }

    /// One EM iteration. Returns the max-abs rate change and the
    /// log-likelihood of the rates before the update.
    pub fn step(&mut self) -> (f64, f64) {
        let m = self.problem.cells();
        let k = self.problem.days as f64;
        let alpha = &self.problem.alpha.values;
        let estimable = &self.rates.estimable;
        let current = &self.rates.values;

        let results: Vec<(Vec<f64>, f64, usize)> = self
            .rows
            .par_iter()
            .enumerate()
            .map(|(h, rows)| {
                let mu = &current[h * m..(h + 1) * m];
                let mut sums = vec![0.0; m];
                let mut ll = 0.0;
                let mut fallback = 0;
                let mut degenerate = false;
                for w in rows.offsets.windows(2) {
                    let (cells, probs) = (&rows.cells[w[0]..w[1]], &rows.probs[w[0]..w[1]]);
                    let denom: f64 = cells.iter().zip(probs).map(|(&c, p)| p * mu[c as usize]).sum();
                    if denom > 0.0 {
                        ll += denom.ln();
                        for (&c, p) in cells.iter().zip(probs) {
                            sums[c as usize] += p * mu[c as usize] / denom;
                        }
                    } else {
                        degenerate = true;
                        fallback += 1;
                        let total: f64 = probs.iter().sum();
                        for (&c, p) in cells.iter().zip(probs) {
                            sums[c as usize] += p / total;
                        }
                    }
                }
                let mut next = vec![0.0; m];
                for i in 0..m {
                    let idx = h * m + i;
                    if estimable[idx] {
                        ll -= k * alpha[idx] * mu[i];
                        next[i] = sums[i] / k / alpha[idx];
                    }
                }
                if degenerate {
                    ll = f64::NEG_INFINITY;
                }
                (next, ll, fallback)
            })
            .collect();

        let mut change: f64 = 0.0;
        let mut ll = 0.0;
        for (h, (next, period_ll, fallback)) in results.into_iter().enumerate() {
            ll += period_ll;
            self.diagnostics.fallback_trips += fallback;
            for (i, v) in next.into_iter().enumerate() {
                let idx = h * m + i;
                if self.rates.estimable[idx] {
                    change = change.max((v - self.rates.values[idx]).abs());
                    self.rates.values[idx] = v;
                }
            }
        }
        self.diagnostics.iterations += 1;
        self.diagnostics.final_change = change;
        (change, ll)
    }

    /// Iterates until the max-abs rate change is at most `tol` or the
    /// iteration cap is reached.
    pub fn run(mut self, mut progress: impl FnMut(usize, f64)) -> EmResult {
        let mut trace = Vec::new();
        for _ in 0..self.config.max_iters {
            let (change, ll) = self.step();
            trace.push(ll);
            progress(self.diagnostics.iterations, change);
            if change <= self.config.tol {
                self.diagnostics.converged = true;
                break;
            }
        }
        if self.config.max_iters == 0 {
            self.diagnostics.converged = false;
        }
        trace.push(log_likelihood(self.problem, &self.rates));
        self.diagnostics.log_likelihood = trace;
        EmResult {
            rates: self.rates,
            diagnostics: self.diagnostics,
        }
    }
}

/// Runs EM to convergence from the configured initialization.
pub fn run_em(problem: &EmProblem, config: EmConfig) -> Result<EmResult, EmError> {
    Ok(EmEngine::new(problem, config)?.run(|_, _| {}))
}

/// Per-cell observed trip rate divided by the fraction of time the cell
/// itself holds a vehicle. Cells stocked less than `alpha_floor` of the time
/// are masked.
pub fn naive_estimate(
    trips: &[TripEvent],
    profile: &NearestBikeProfile,
    days: usize,
    alpha_floor: f64,
) -> RateMatrix {
    let (h_count, m) = (profile.periods, profile.cells);
    let mut counts = vec![0.0; h_count * m];
    for t in trips {
        counts[t.period * m + t.cell.get()] += 1.0;
    }
    let k = days as f64;
    let mut rates = RateMatrix::zeros(h_count, m);
    for h in 0..h_count {
        for i in 0..m {
            let idx = h * m + i;
            let frac = profile.availability_fraction(h, i);
            if frac >= alpha_floor && frac > 0.0 {
                rates.values[idx] = counts[idx] / k / frac;
            } else {
                rates.estimable[idx] = false;
            }
        }
    }
    rates
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::availability::{AvailabilityEvent, EventSource, PeriodScheme};
    use crate::choice::ThresholdDistribution;
    use crate::grid::{GridSpec, LatLon};

    fn grid(rows: usize, cols: usize) -> GridSpec {
        GridSpec::new(LatLon::new(41.8, -71.4), 400.0, rows, cols).unwrap()
    }

    fn p07(table: &DistanceClassTable) -> ThresholdDistribution {
        ThresholdDistribution::from_p0(0.7, table, 1e-12).unwrap()
    }

    fn problem_from(
        pis: Vec<Vec<(u32, f64)>>,
        periods: Vec<usize>,
        cells: usize,
        alpha: Vec<f64>,
        days: usize,
    ) -> EmProblem {
        let h = alpha.len() / cells;
        let trips = periods
            .iter()
            .map(|&p| TripEvent {
                time: 0.0,
                period: p,
                cell: CellIndex(0),
            })
            .collect();
        let pi = pis
            .into_iter()
            .map(|e| PiVector {
                entries: e.into_iter().map(|(c, p)| (CellIndex(c), p)).collect(),
            })
            .collect();
        EmProblem::new(
            trips,
            pi,
            AlphaMatrix {
                periods: h,
                cells,
                values: alpha,
            },
            days,
        )
        .unwrap()
    }

    #[test]
    fn lone_vehicle_in_own_cell() {
        let g = grid(3, 3);
        let table = DistanceClassTable::build(&g, 1000.0);
        let mut snap = vec![0; 9];
        snap[4] = 1;
        let trip = TripEvent {
            time: 10.0,
            period: 0,
            cell: CellIndex(4),
        };
        let pi = pi_vector(&trip, &snap, &table, &p07(&table)).unwrap();
        assert_eq!(pi.get(CellIndex(4)), 1.0);
        // every other cell's nearest vehicle is this one
        let dist = p07(&table);
        assert!((pi.get(CellIndex(1)) - dist.survival[1]).abs() < 1e-15);
        assert!((pi.get(CellIndex(0)) - dist.survival[2]).abs() < 1e-15);
    }

    #[test]
    fn three_equidistant_vehicles_and_a_far_one() {
        // user cell (2,2); vehicles at (1,2), (2,3), (3,2) and two cells west at (2,0)
        let g = grid(5, 5);
        let table = DistanceClassTable::build(&g, 1000.0);
        let dist = p07(&table);
        let mut snap = vec![0; 25];
        for (r, c) in [(1, 2), (2, 3), (3, 2), (2, 0)] {
            snap[g.index(r, c).get()] = 1;
        }
        let user = g.index(2, 2);
        let near = TripEvent {
            time: 0.0,
            period: 0,
            cell: g.index(2, 3),
        };
        let pi = pi_vector(&near, &snap, &table, &dist).unwrap();
        assert!((pi.get(user) - dist.survival[1] / 3.0).abs() < 1e-15);

        let far = TripEvent {
            cell: g.index(2, 0),
            ..near
        };
        let pi = pi_vector(&far, &snap, &table, &dist).unwrap();
        assert_eq!(pi.get(user), 0.0);
        assert_eq!(pi.get(g.index(2, 0)), 1.0);
    }

    #[test]
    fn pickup_beyond_reach_is_zero_and_empty_cell_errors() {
        let g = grid(1, 6);
        let table = DistanceClassTable::build(&g, 1000.0);
        let mut snap = vec![0; 6];
        snap[5] = 2;
        let trip = TripEvent {
            time: 0.0,
            period: 0,
            cell: CellIndex(5),
        };
        let pi = pi_vector(&trip, &snap, &table, &p07(&table)).unwrap();
        assert_eq!(pi.get(CellIndex(0)), 0.0);
        assert_eq!(pi.get(CellIndex(2)), 0.0);
        assert!(pi.get(CellIndex(3)) > 0.0);

        let empty = TripEvent {
            cell: CellIndex(1),
            ..trip
        };
        assert!(matches!(
            pi_vector(&empty, &snap, &table, &p07(&table)),
            Err(EmError::EmptyPickupCell { .. })
        ));
    }

    #[test]
    fn e_step_examples() {
        let p = problem_from(vec![vec![(0, 0.6), (1, 0.2)]], vec![0], 2, vec![1.0, 1.0], 1);
        let rates = RateMatrix {
            periods: 1,
            cells: 2,
            values: vec![1.0, 4.0],
            estimable: vec![true, true],
        };
        let w = e_step(&p, &rates);
        assert!((w.weights[0][0].1 - 0.6 / 1.4).abs() < 1e-12);
        assert!((w.weights[0][1].1 - 0.8 / 1.4).abs() < 1e-12);

        let sym = RateMatrix {
            values: vec![2.0, 2.0],
            ..rates.clone()
        };
        let p = problem_from(vec![vec![(0, 0.5), (1, 0.5)]], vec![0], 2, vec![1.0, 1.0], 1);
        let w = e_step(&p, &sym);
        assert_eq!(w.weights[0], vec![(CellIndex(0), 0.5), (CellIndex(1), 0.5)]);

        let p = problem_from(vec![vec![(1, 0.3)]], vec![0], 2, vec![1.0, 1.0], 1);
        assert_eq!(e_step(&p, &sym).weights[0], vec![(CellIndex(1), 1.0)]);

        // zero rates everywhere fall back to pi
        let zero = RateMatrix::zeros(1, 2);
        let p = problem_from(vec![vec![(0, 0.6), (1, 0.2)]], vec![0], 2, vec![1.0, 1.0], 1);
        let w = e_step(&p, &zero);
        assert_eq!(w.fallback_trips, 1);
        assert!((w.weights[0][0].1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn m_step_examples() {
        let thirty = |alpha: f64| {
            let p = problem_from(vec![vec![(0, 1.0)]; 30], vec![0; 30], 1, vec![alpha], 30);
            let w = e_step(&p, &RateMatrix::zeros(1, 1));
            m_step(&p, &w, DEFAULT_ALPHA_FLOOR)
        };
        assert!((thirty(1.0).values[0] - 1.0).abs() < 1e-12);
        assert!((thirty(0.5).values[0] - 2.0).abs() < 1e-12);
        let masked = thirty(1e-3);
        assert_eq!(masked.get(0, 0), None);
    }

    #[test]
    fn single_cell_converges_to_trip_rate_over_alpha() {
        for init in [InitMode::Uniform, InitMode::Trips, InitMode::GammaBlend(0.3)] {
            let p = problem_from(vec![vec![(0, 1.0)]; 60], vec![0; 60], 1, vec![1.0], 30);
            let cfg = EmConfig {
                init,
                ..Default::default()
            };
            let r = run_em(&p, cfg).unwrap();
            assert!((r.rates.values[0] - 2.0).abs() < 1e-12);
            assert!(r.diagnostics.converged);
        }
    }

    #[test]
    fn symmetric_instance_gives_symmetric_rates() {
        let p = problem_from(
            vec![vec![(0, 0.8), (1, 0.3)], vec![(1, 0.8), (0, 0.3)], vec![(0, 1.0)], vec![(1, 1.0)]],
            vec![0; 4],
            2,
            vec![0.6, 0.6],
            2,
        );
        let r = run_em(
            &p,
            EmConfig {
                tol: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((r.rates.values[0] - r.rates.values[1]).abs() < 1e-9);
    }

    #[test]
    fn no_trips_yields_zero_rates() {
        let p = problem_from(vec![], vec![], 3, vec![1.0, 0.5, 0.0], 5);
        let r = run_em(&p, EmConfig::default()).unwrap();
        assert_eq!(r.rates.values, vec![0.0, 0.0, 0.0]);
        assert_eq!(r.rates.get(0, 2), None);
        assert!(r.diagnostics.converged);
    }

    #[test]
    fn log_likelihood_examples() {
        let p = problem_from(vec![vec![(0, 1.0)]; 6], vec![0; 6], 1, vec![1.0], 3);
        let at = |mu: f64| {
            log_likelihood(
                &p,
                &RateMatrix {
                    periods: 1,
                    cells: 1,
                    values: vec![mu],
                    estimable: vec![true],
                },
            )
        };
        assert_eq!(at(0.0), f64::NEG_INFINITY);
        let best = at(2.0);
        for mu in [1.0, 1.9, 2.1, 4.0] {
            assert!(at(mu) < best);
        }
    }

    #[test]
    fn naive_examples() {
        let g = grid(1, 3);
        let table = DistanceClassTable::build(&g, 1000.0);
        let day = crate::availability::DAY_SECONDS;
        let mut events = Vec::new();
        for d in 0..30 {
            let base = d as f64 * day;
            events.push(AvailabilityEvent::new(base, CellIndex(1), 1, EventSource::RebalanceAdd));
            events.push(AvailabilityEvent::new(base + 1800.0, CellIndex(1), -1, EventSource::RebalanceRemove));
        }
        events.push(AvailabilityEvent::new(0.0, CellIndex(0), 1, EventSource::RebalanceAdd));
        let periods = PeriodScheme::new(0.0, 3600.0, 1).unwrap();
        let tl = AvailabilityTimeline::build(events, &g, 30, periods).unwrap();
        let profile = tl.nearest_profile(&table);
        let trips: Vec<TripEvent> = (0..30)
            .flat_map(|d| {
                [0u32, 1].map(|c| TripEvent {
                    time: d as f64 * day + 100.0,
                    period: 0,
                    cell: CellIndex(c),
                })
            })
            .collect();
        let naive = naive_estimate(&trips, &profile, 30, DEFAULT_ALPHA_FLOOR);
        assert!((naive.get(0, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!((naive.get(0, 1).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(naive.get(0, 2), None);
    }

    #[test]
    fn compute_pi_uses_left_limit_snapshot() {
        let g = grid(1, 2);
        let table = DistanceClassTable::build(&g, 1000.0);
        let events = vec![
            AvailabilityEvent::new(0.0, CellIndex(0), 1, EventSource::RebalanceAdd),
            AvailabilityEvent::new(50.0, CellIndex(0), -1, EventSource::TripStart),
        ];
        let periods = PeriodScheme::new(0.0, 3600.0, 1).unwrap();
        let tl = AvailabilityTimeline::build(events, &g, 1, periods).unwrap();
        let trips = vec![TripEvent {
            time: 50.0,
            period: 0,
            cell: CellIndex(0),
        }];
        let pis = compute_pi(&tl, &table, &p07(&table), &trips).unwrap();
        assert_eq!(pis[0].get(CellIndex(0)), 1.0);

        // dropped off and picked up again in the same instant
        let events = vec![
            AvailabilityEvent::new(80.0, CellIndex(1), -1, EventSource::TripStart),
            AvailabilityEvent::new(80.0, CellIndex(1), 1, EventSource::TripEnd),
        ];
        let tl2 = AvailabilityTimeline::build(events, &g, 1, periods).unwrap();
        let chained = vec![TripEvent {
            time: 80.0,
            period: 0,
            cell: CellIndex(1),
        }];
        let pis = compute_pi(&tl2, &table, &p07(&table), &chained).unwrap();
        assert_eq!(pis[0].get(CellIndex(1)), 1.0);

        let late = vec![TripEvent { time: 60.0, ..trips[0] }];
        assert!(matches!(
            compute_pi(&tl, &table, &p07(&table), &late),
            Err(EmError::EmptyPickupCell { trip: 0, .. })
        ));
    }
}
