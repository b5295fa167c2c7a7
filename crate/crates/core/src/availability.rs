//! Per-cell vehicle availability over time.
//!
//! Availability is piecewise constant between events. Times are seconds
//! since local midnight of the first day of the horizon; day `d` covers
//! `[d * DAY_SECONDS, (d + 1) * DAY_SECONDS)`.
//!
//! Events at the same instant replay in a fixed order: by cell index, and
//! within a cell additions before removals. Snapshots are left limits, so a
//! vehicle picked up at `t` still counts as available at `t`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::ChoiceModel;
use crate::grid::{CellIndex, DistanceClassTable, GridSpec};

pub const DAY_SECONDS: f64 = 86_400.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimelineError {
    #[error("replay drives cell {cell} negative at t={time} (event #{index}, {kind:?}, delta {delta})")]
    NegativeCount {
        index: usize,
        time: f64,
        cell: u32,
        delta: i32,
        kind: EventSource,
    },
    #[error("event #{index} references cell {cell} outside a grid of {cells} cells")]
    CellOutOfRange { index: usize, cell: u32, cells: usize },
    #[error("time {time} is outside the horizon [0, {end}]")]
    OutsideHorizon { time: f64, end: f64 },
    #[error("invalid period scheme: {0}")]
    InvalidPeriods(String),
    #[error("horizon must cover at least one day")]
    NoDays,
    #[error("profile has {profile} distance classes but the choice model has {model}")]
    ClassMismatch { profile: usize, model: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    TripStart,
    TripEnd,
    RebalanceAdd,
    RebalanceRemove,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityEvent {
    pub time: f64,
    pub cell: CellIndex,
    /// Vehicles appearing (positive) or departing (negative).
    pub delta: i32,
    pub source: EventSource,
}

impl AvailabilityEvent {
    pub fn new(time: f64, cell: CellIndex, delta: i32, source: EventSource) -> Self {
        Self {
            time,
            cell,
            delta,
            source,
        }
    }

    /// Time, then every addition before any removal, then cell.
    pub fn replay_order(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then((self.delta < 0).cmp(&(other.delta < 0)))
            .then(self.cell.cmp(&other.cell))
            .then(other.delta.cmp(&self.delta))
    }
}

/// Contiguous, equal-length periods covering a service window of each day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodScheme {
    /// Window start, seconds after midnight.
    pub start: f64,
    pub length: f64,
    pub count: usize,
}

impl PeriodScheme {
    pub fn new(start: f64, length: f64, count: usize) -> Result<Self, TimelineError> {
        if count == 0 || !(length > 0.0) || start < 0.0 || start + length * count as f64 > DAY_SECONDS + 1e-9
        {
            return Err(TimelineError::InvalidPeriods(format!(
                "start={start} length={length} count={count}"
            )));
        }
        Ok(Self {
            start,
            length,
            count,
        })
    }

    /// Twenty-four hourly periods.
    pub fn hourly() -> Self {
        Self {
            start: 0.0,
            length: 3600.0,
            count: 24,
        }
    }

    /// `count` equal periods over `[start, end)` seconds after midnight.
    pub fn over_window(start: f64, end: f64, count: usize) -> Result<Self, TimelineError> {
        if !(end > start) || count == 0 {
            return Err(TimelineError::InvalidPeriods(format!(
                "window {start}..{end} with {count} periods"
            )));
        }
        Self::new(start, (end - start) / count as f64, count)
    }

    pub fn end(&self) -> f64 {
        self.start + self.length * self.count as f64
    }

    /// Period containing a time of day, if inside the window.
    pub fn period_of(&self, time_of_day: f64) -> Option<usize> {
        if time_of_day < self.start || time_of_day >= self.end() {
            return None;
        }
        let h = ((time_of_day - self.start) / self.length).floor() as usize;
        Some(h.min(self.count - 1))
    }

    pub fn bounds(&self, h: usize) -> (f64, f64) {
        let lo = self.start + self.length * h as f64;
        (lo, lo + self.length)
    }
}

/// Day index and time of day of an absolute time.
pub fn split_time(t: f64) -> (usize, f64) {
    let day = (t / DAY_SECONDS).floor().max(0.0);
    (day as usize, t - day * DAY_SECONDS)
}

#[derive(Debug, Clone)]
pub struct AvailabilityTimeline {
    cells: usize,
    days: usize,
    periods: PeriodScheme,
    day_start: Vec<Vec<u32>>,
    day_events: Vec<Vec<AvailabilityEvent>>,
}

impl AvailabilityTimeline {
    /// Replays `events` and checks that no cell count goes negative.
    ///
    /// Events before the horizon fold into the initial state; events at or
    /// after its end are ignored.
    pub fn build(
        mut events: Vec<AvailabilityEvent>,
        grid: &GridSpec,
        days: usize,
        periods: PeriodScheme,
    ) -> Result<Self, TimelineError> {
        if days == 0 {
            return Err(TimelineError::NoDays);
        }
        let cells = grid.cell_count();
        for (index, e) in events.iter().enumerate() {
            if e.cell.get() >= cells {
                return Err(TimelineError::CellOutOfRange {
                    index,
                    cell: e.cell.0,
                    cells,
                });
            }
        }
        events.sort_by(AvailabilityEvent::replay_order);

        let horizon = days as f64 * DAY_SECONDS;
        let mut counts = vec![0i64; cells];
        let snapshot = |counts: &[i64]| counts.iter().map(|&c| c as u32).collect::<Vec<_>>();
        let mut day_start: Vec<Vec<u32>> = Vec::with_capacity(days);
        let mut day_events = vec![Vec::new(); days];
        for (index, e) in events.into_iter().enumerate() {
            if e.time >= horizon {
                break;
            }
            let day = (e.time >= 0.0).then(|| split_time(e.time).0);
            if let Some(d) = day {
                while day_start.len() <= d {
                    day_start.push(snapshot(&counts));
                }
            }
            let c = &mut counts[e.cell.get()];
            *c += e.delta as i64;
            if *c < 0 {
                return Err(TimelineError::NegativeCount {
                    index,
                    time: e.time,
                    cell: e.cell.0,
                    delta: e.delta,
                    kind: e.source,
                });
            }
            if let Some(d) = day {
                day_events[d].push(e);
            }
        }
        while day_start.len() < days {
            day_start.push(snapshot(&counts));
        }

        Ok(Self {
            cells,
            days,
            periods,
            day_start,
            day_events,
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn days(&self) -> usize {
        self.days
    }

    pub fn periods(&self) -> &PeriodScheme {
        &self.periods
    }

    pub fn day_events(&self, day: usize) -> &[AvailabilityEvent] {
        &self.day_events[day]
    }

    pub fn day_start_counts(&self, day: usize) -> &[u32] {
        &self.day_start[day]
    }

    pub fn horizon_end(&self) -> f64 {
        self.days as f64 * DAY_SECONDS
    }

    /// Per-cell counts immediately before `t`.
    pub fn snapshot(&self, t: f64) -> Result<Vec<u32>, TimelineError> {
        let end = self.horizon_end();
        if !(0.0..=end).contains(&t) {
            return Err(TimelineError::OutsideHorizon { time: t, end });
        }
        let (day, _) = split_time(t);
        if day >= self.days {
            // t == end: state after the final event
            let mut counts: Vec<i64> = self.day_start[self.days - 1].iter().map(|&c| c as i64).collect();
            for e in &self.day_events[self.days - 1] {
                counts[e.cell.get()] += e.delta as i64;
            }
            return Ok(counts.into_iter().map(|c| c as u32).collect());
        }
        let events = &self.day_events[day];
        let upto = events.partition_point(|e| e.time < t);
        let mut counts: Vec<i64> = self.day_start[day].iter().map(|&c| c as i64).collect();
        for e in &events[..upto] {
            counts[e.cell.get()] += e.delta as i64;
        }
        Ok(counts.into_iter().map(|c| c as u32).collect())
    }

    /// Replay cursor over one day, tracking occupancy by distance class.
    pub fn replay_day<'a>(&'a self, day: usize, table: &'a DistanceClassTable) -> DayReplay<'a> {
        DayReplay {
            occupancy: Occupancy::new(table, &self.day_start[day]),
            events: &self.day_events[day],
            cursor: 0,
        }
    }

    /// Exact time integration of the nearest-vehicle distance class for
    /// every cell and period, averaged over all days of the horizon.
    pub fn nearest_profile(&self, table: &DistanceClassTable) -> NearestBikeProfile {
        let m = self.cells;
        let l_count = table.class_count();
        let h_count = self.periods.count;
        let mut acc = vec![0.0f64; h_count * m * l_count];

        let periods = self.periods;
        let mut add = |cell: usize, class: Option<usize>, s0: f64, s1: f64| {
            let Some(class) = class else { return };
            if s1 <= s0 {
                return;
            }
            let lo = s0.max(periods.start);
            let hi = s1.min(periods.end());
            if hi <= lo {
                return;
            }
            let first = periods.period_of(lo).unwrap_or(0);
            for h in first..h_count {
                let (p0, p1) = periods.bounds(h);
                if p0 >= hi {
                    break;
                }
                let overlap = hi.min(p1) - lo.max(p0);
                if overlap > 0.0 {
                    acc[(h * m + cell) * l_count + class] += overlap;
                }
            }
        };

        for day in 0..self.days {
            let base = day as f64 * DAY_SECONDS;
            let mut replay = self.replay_day(day, table);
            let mut nearest: Vec<Option<usize>> =
                (0..m).map(|i| replay.occupancy().nearest(CellIndex::from(i))).collect();
            let mut since = vec![0.0f64; m];
            while let Some((event, transition)) = replay.step() {
                if !transition {
                    continue;
                }
                let now = event.time - base;
                for (cell, _) in table.within_reach(event.cell) {
                    let c = cell.get();
                    let n = replay.occupancy().nearest(cell);
                    if n != nearest[c] {
                        add(c, nearest[c], since[c], now);
                        nearest[c] = n;
                        since[c] = now;
                    }
                }
            }
            for c in 0..m {
                add(c, nearest[c], since[c], DAY_SECONDS);
            }
        }

        let denom = self.periods.length * self.days as f64;
        for chunk in acc.chunks_mut(l_count) {
            let mut running = 0.0;
            for v in chunk.iter_mut() {
                running += *v;
                *v = (running / denom).min(1.0);
            }
        }
        NearestBikeProfile {
            periods: h_count,
            cells: m,
            classes: l_count,
            perc: acc,
        }
    }
}

/// Per-cell counts plus, for every cell, the number of vehicles in each of
/// its distance classes.
#[derive(Debug, Clone)]
pub struct Occupancy<'a> {
    table: &'a DistanceClassTable,
    counts: Vec<i64>,
    class_bikes: Vec<i64>,
}

impl<'a> Occupancy<'a> {
    pub fn new(table: &'a DistanceClassTable, counts: &[u32]) -> Self {
        let l = table.class_count();
        let mut class_bikes = vec![0i64; counts.len() * l];
        for (i, &n) in counts.iter().enumerate() {
            if n > 0 {
                for (c, class) in table.within_reach(CellIndex::from(i)) {
                    class_bikes[c.get() * l + class] += n as i64;
                }
            }
        }
        Self {
            table,
            counts: counts.iter().map(|&c| c as i64).collect(),
            class_bikes,
        }
    }

    /// Applies a count change; returns whether the cell flipped between
    /// empty and nonempty.
    pub fn apply(&mut self, cell: CellIndex, delta: i32) -> bool {
        let l = self.table.class_count();
        let before = self.counts[cell.get()];
        let after = before + delta as i64;
        self.counts[cell.get()] = after;
        for (c, class) in self.table.within_reach(cell) {
            self.class_bikes[c.get() * l + class] += delta as i64;
        }
        (before > 0) != (after > 0)
    }

    pub fn count(&self, cell: CellIndex) -> i64 {
        self.counts[cell.get()]
    }

    pub fn counts(&self) -> &[i64] {
        &self.counts
    }

    /// Vehicles in cells exactly class `class` away from `cell`.
    pub fn class_bikes(&self, cell: CellIndex, class: usize) -> i64 {
        self.class_bikes[cell.get() * self.table.class_count() + class]
    }

    /// Nearest nonempty distance class seen from `cell`, if any is in reach.
    pub fn nearest(&self, cell: CellIndex) -> Option<usize> {
        let l = self.table.class_count();
        let row = &self.class_bikes[cell.get() * l..(cell.get() + 1) * l];
        row.iter().position(|&n| n > 0)
    }

    pub fn table(&self) -> &DistanceClassTable {
        self.table
    }
}

pub struct DayReplay<'a> {
    occupancy: Occupancy<'a>,
    events: &'a [AvailabilityEvent],
    cursor: usize,
}

impl<'a> DayReplay<'a> {
    pub fn occupancy(&self) -> &Occupancy<'a> {
        &self.occupancy
    }

    /// Applies the next event.
    pub fn step(&mut self) -> Option<(&'a AvailabilityEvent, bool)> {
        let e = self.events.get(self.cursor)?;
        self.cursor += 1;
        let transition = self.occupancy.apply(e.cell, e.delta);
        Some((e, transition))
    }

    /// Applies every remaining event strictly before `t`.
    pub fn advance_before(&mut self, t: f64) {
        while let Some(e) = self.events.get(self.cursor) {
            if e.time >= t {
                break;
            }
            self.step();
        }
    }

    /// Applies every remaining event before `t` and the additions at `t`,
    /// so a vehicle dropped off at the instant of a pickup is available.
    pub fn advance_to_pickup(&mut self, t: f64) {
        self.advance_before(t);
        while let Some(e) = self.events.get(self.cursor) {
            if e.time > t || e.delta < 0 {
                break;
            }
            self.step();
        }
    }
}

/// Fraction of period time (averaged over days) during which the nearest
/// available vehicle to a cell is at most `dist_l` away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearestBikeProfile {
    pub periods: usize,
    pub cells: usize,
    pub classes: usize,
    pub perc: Vec<f64>,
}

impl NearestBikeProfile {
    #[inline]
    pub fn get(&self, h: usize, cell: usize, class: usize) -> f64 {
        self.perc[(h * self.cells + cell) * self.classes + class]
    }

    pub fn row(&self, h: usize, cell: usize) -> &[f64] {
        let base = (h * self.cells + cell) * self.classes;
        &self.perc[base..base + self.classes]
    }

    /// Fraction of period time with at least one vehicle in the cell itself.
    pub fn availability_fraction(&self, h: usize, cell: usize) -> f64 {
        self.get(h, cell, 0)
    }

    /// Probability that a uniformly timed arrival with a threshold drawn
    /// from `model` finds a vehicle within reach.
    pub fn alpha(&self, model: &(impl ChoiceModel + ?Sized)) -> Result<AlphaMatrix, TimelineError> {
        let probs = model.class_probs();
        if probs.len() != self.classes {
            return Err(TimelineError::ClassMismatch {
                profile: self.classes,
                model: probs.len(),
            });
        }
        let values = self
            .perc
            .chunks(self.classes)
            .map(|row| row.iter().zip(probs).map(|(p, q)| p * q).sum::<f64>().min(1.0))
            .collect();
        Ok(AlphaMatrix {
            periods: self.periods,
            cells: self.cells,
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaMatrix {
    pub periods: usize,
    pub cells: usize,
    pub values: Vec<f64>,
}

impl AlphaMatrix {
    /// Uniform matrix, mostly for tests and synthetic instances.
    pub fn filled(periods: usize, cells: usize, value: f64) -> Self {
        Self {
            periods,
            cells,
            values: vec![value; periods * cells],
        }
    }

    #[inline]
    pub fn get(&self, h: usize, cell: usize) -> f64 {
        self.values[h * self.cells + cell]
    }

    pub fn set(&mut self, h: usize, cell: usize, v: f64) {
        self.values[h * self.cells + cell] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::ThresholdDistribution;
    use crate::grid::LatLon;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: usize, cols: usize) -> GridSpec {
        GridSpec::new(LatLon::new(41.8, -71.4), 400.0, rows, cols).unwrap()
    }

    fn add(t: f64, cell: u32) -> AvailabilityEvent {
        AvailabilityEvent::new(t, CellIndex(cell), 1, EventSource::RebalanceAdd)
    }

    fn remove(t: f64, cell: u32) -> AvailabilityEvent {
        AvailabilityEvent::new(t, CellIndex(cell), -1, EventSource::TripStart)
    }

    #[test]
    fn empty_timeline_is_all_zero() {
        let g = grid(3, 3);
        let tl = AvailabilityTimeline::build(vec![], &g, 2, PeriodScheme::hourly()).unwrap();
        assert_eq!(tl.snapshot(1000.0).unwrap(), vec![0; 9]);
        let table = DistanceClassTable::build(&g, 1000.0);
        let prof = tl.nearest_profile(&table);
        assert!(prof.perc.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn permanent_vehicle_fills_its_cell() {
        let g = grid(3, 3);
        let table = DistanceClassTable::build(&g, 1000.0);
        let tl = AvailabilityTimeline::build(vec![add(0.0, 4)], &g, 3, PeriodScheme::hourly()).unwrap();
        let prof = tl.nearest_profile(&table);
        for h in 0..24 {
            assert_eq!(prof.get(h, 4, 0), 1.0);
            // a corner cell sees it at the diagonal class only
            assert_eq!(prof.get(h, 0, 0), 0.0);
            assert_eq!(prof.get(h, 0, 1), 0.0);
            assert_eq!(prof.get(h, 0, 2), 1.0);
            // an edge neighbour sees it one class away
            assert_eq!(prof.get(h, 1, 0), 0.0);
            assert_eq!(prof.get(h, 1, 1), 1.0);
        }
    }

    #[test]
    fn half_period_presence() {
        let g = grid(1, 1);
        let table = DistanceClassTable::build(&g, 1000.0);
        let events = vec![add(9.0 * 3600.0, 0), remove(9.5 * 3600.0, 0)];
        let tl = AvailabilityTimeline::build(events, &g, 1, PeriodScheme::hourly()).unwrap();
        let prof = tl.nearest_profile(&table);
        assert!((prof.availability_fraction(9, 0) - 0.5).abs() < 1e-12);
        assert_eq!(prof.availability_fraction(10, 0), 0.0);
    }

    #[test]
    fn negative_replay_names_the_event() {
        let g = grid(2, 2);
        let err = AvailabilityTimeline::build(vec![add(5.0, 0), remove(3.0, 0)], &g, 1, PeriodScheme::hourly())
            .unwrap_err();
        assert!(matches!(err, TimelineError::NegativeCount { cell: 0, .. }));
    }

    #[test]
    fn same_instant_adds_before_removes() {
        let g = grid(1, 2);
        let events = vec![remove(10.0, 1), add(10.0, 1)];
        let tl = AvailabilityTimeline::build(events, &g, 1, PeriodScheme::hourly()).unwrap();
        assert_eq!(tl.snapshot(10.0).unwrap(), vec![0, 0]);
        assert_eq!(tl.snapshot(11.0).unwrap(), vec![0, 0]);
    }

    #[test]
    fn snapshot_is_left_limit() {
        let g = grid(1, 2);
        let events = vec![add(0.0, 0), remove(100.0, 0), add(100.0, 1)];
        let tl = AvailabilityTimeline::build(events, &g, 1, PeriodScheme::hourly()).unwrap();
        assert_eq!(tl.snapshot(0.0).unwrap(), vec![0, 0]);
        assert_eq!(tl.snapshot(100.0).unwrap(), vec![1, 0]);
        assert_eq!(tl.snapshot(100.5).unwrap(), vec![0, 1]);
        assert!(tl.snapshot(-1.0).is_err());
        assert!(tl.snapshot(DAY_SECONDS + 1.0).is_err());
    }

    #[test]
    fn multi_day_state_carries_over() {
        let g = grid(1, 2);
        let events = vec![add(100.0, 0), add(DAY_SECONDS + 50.0, 1), remove(2.0 * DAY_SECONDS + 10.0, 0)];
        let tl = AvailabilityTimeline::build(events, &g, 3, PeriodScheme::hourly()).unwrap();
        assert_eq!(tl.day_start_counts(1), &[1, 0]);
        assert_eq!(tl.day_start_counts(2), &[1, 1]);
        assert_eq!(tl.snapshot(2.0 * DAY_SECONDS + 20.0).unwrap(), vec![0, 1]);
    }

    fn random_events(rng: &mut ChaCha8Rng, cells: u32, days: usize, n: usize, window: f64) -> Vec<AvailabilityEvent> {
        let mut counts = vec![0i32; cells as usize];
        let mut times: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..days) as f64 * DAY_SECONDS + rng.random_range(0.0..window))
            .collect();
        times.sort_by(f64::total_cmp);
        times
            .into_iter()
            .map(|t| {
                let c = rng.random_range(0..cells);
                let delta = if counts[c as usize] > 0 && rng.random_bool(0.5) { -1 } else { 1 };
                counts[c as usize] += delta;
                AvailabilityEvent::new(t, CellIndex(c), delta, EventSource::TripEnd)
            })
            .collect()
    }

    #[test]
    fn snapshot_matches_replay_oracle() {
        let g = grid(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let events = random_events(&mut rng, 6, 2, 60, 7200.0);
        let tl = AvailabilityTimeline::build(events.clone(), &g, 2, PeriodScheme::hourly()).unwrap();
        for _ in 0..200 {
            let t = rng.random_range(0.0..2.0 * DAY_SECONDS);
            let mut brute = vec![0i64; 6];
            for e in &events {
                if e.time < t {
                    brute[e.cell.get()] += e.delta as i64;
                }
            }
            let snap: Vec<i64> = tl.snapshot(t).unwrap().into_iter().map(i64::from).collect();
            assert_eq!(snap, brute);
        }
    }

    #[test]
    fn profile_matches_dense_time_scan() {
        // 4x5 = 20 cells, two half-hour periods, two days
        let g = grid(4, 5);
        let table = DistanceClassTable::build(&g, 1000.0);
        let periods = PeriodScheme::new(0.0, 1800.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let events = random_events(&mut rng, 20, 2, 80, 3600.0);
        let tl = AvailabilityTimeline::build(events, &g, 2, periods).unwrap();
        let prof = tl.nearest_profile(&table);

        let l = table.class_count();
        let mut hits = vec![0.0; 2 * 20 * l];
        for day in 0..2 {
            for s in 0..3600 {
                let t = day as f64 * DAY_SECONDS + s as f64 + 0.5;
                let h = s / 1800;
                let snap = tl.snapshot(t).unwrap();
                for i in g.cells() {
                    let nearest = g
                        .cells()
                        .filter(|&j| snap[j.get()] > 0)
                        .map(|j| g.center_distance(i, j))
                        .fold(f64::INFINITY, f64::min);
                    for (class, &d) in table.classes().iter().enumerate() {
                        if nearest <= d + 1e-6 {
                            hits[(h * 20 + i.get()) * l + class] += 1.0;
                        }
                    }
                }
            }
        }
        for (k, v) in hits.iter().enumerate() {
            let brute = v / (1800.0 * 2.0);
            assert!((brute - prof.perc[k]).abs() < 1e-3, "entry {k}: {brute} vs {}", prof.perc[k]);
        }
    }

    #[test]
    fn alpha_examples() {
        let profile = NearestBikeProfile {
            periods: 1,
            cells: 3,
            classes: 5,
            perc: vec![
                1.0, 1.0, 1.0, 1.0, 1.0, //
                0.0, 1.0, 1.0, 1.0, 1.0, //
                0.0, 0.0, 0.0, 0.0, 0.0,
            ],
        };
        let g = grid(12, 12);
        let table = DistanceClassTable::build(&g, 1000.0);
        let dist = ThresholdDistribution::from_p0(0.7, &table, 1e-12).unwrap();
        let alpha = profile.alpha(&dist).unwrap();
        assert!((alpha.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((alpha.get(0, 1) - (1.0 - dist.class_probs[0])).abs() < 1e-12);
        assert!((alpha.get(0, 1) - 0.3).abs() < 1e-9);
        assert_eq!(alpha.get(0, 2), 0.0);

        let short = ThresholdDistribution::from_sigma(100.0, &DistanceClassTable::build(&g, 500.0)).unwrap();
        assert!(matches!(profile.alpha(&short), Err(TimelineError::ClassMismatch { .. })));
    }

    #[test]
    fn period_scheme_lookup() {
        let p = PeriodScheme::over_window(6.0 * 3600.0, 22.0 * 3600.0, 16).unwrap();
        assert_eq!(p.period_of(5.0 * 3600.0), None);
        assert_eq!(p.period_of(6.0 * 3600.0), Some(0));
        assert_eq!(p.period_of(21.99 * 3600.0), Some(15));
        assert_eq!(p.period_of(22.0 * 3600.0), None);
        assert!(PeriodScheme::new(0.0, 3600.0, 25).is_err());
    }
}
