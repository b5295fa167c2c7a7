//! Trip file parsing and availability reconstruction.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use chrono::{DateTime, FixedOffset, NaiveDate, NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::availability::{AvailabilityEvent, EventSource, PeriodScheme, DAY_SECONDS};
use crate::em::TripEvent;
use crate::grid::{CellIndex, GridSpec, LatLon};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read trip file: {0}")]
    Read(String),
    #[error("trip file has no header row")]
    EmptyHeader,
    #[error("missing required columns: {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error("configured column {column:?} for field {field} is not in the header")]
    UnknownColumn { field: String, column: String },
    #[error("trips carry no vehicle ids; use perfect rebalancing instead")]
    MissingVehicleIds,
    #[error("vehicle {vehicle} has overlapping trips {first} and {second}")]
    OverlappingTrips {
        vehicle: String,
        first: String,
        second: String,
    },
    #[error("trip {trip} lies outside the grid")]
    OutsideGrid { trip: String },
    #[error("no trips left after validation")]
    NoTrips,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    StartTime,
    EndTime,
    StartLat,
    StartLon,
    EndLat,
    EndLon,
    VehicleId,
    TripId,
}

impl Field {
    pub const REQUIRED: [Field; 6] = [
        Field::StartTime,
        Field::EndTime,
        Field::StartLat,
        Field::StartLon,
        Field::EndLat,
        Field::EndLon,
    ];
    pub const ALL: [Field; 8] = [
        Field::StartTime,
        Field::EndTime,
        Field::StartLat,
        Field::StartLon,
        Field::EndLat,
        Field::EndLon,
        Field::VehicleId,
        Field::TripId,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::StartTime => "start_time",
            Field::EndTime => "end_time",
            Field::StartLat => "start_lat",
            Field::StartLon => "start_lon",
            Field::EndLat => "end_lat",
            Field::EndLon => "end_lon",
            Field::VehicleId => "vehicle_id",
            Field::TripId => "trip_id",
        }
    }

    /// Header spellings recognized without configuration, after
    /// lowercasing and mapping spaces and dashes to underscores.
    pub fn aliases(self) -> &'static [&'static str] {
        match self {
            Field::StartTime => &["start_time", "started_at", "starttime", "start_date", "start_datetime", "pickup_time", "trip_start"],
            Field::EndTime => &["end_time", "ended_at", "stoptime", "stop_time", "end_date", "end_datetime", "dropoff_time", "trip_end"],
            Field::StartLat => &["start_lat", "start_latitude", "start_station_latitude", "pickup_lat", "pickup_latitude", "start_y"],
            Field::StartLon => &["start_lon", "start_lng", "start_long", "start_longitude", "start_station_longitude", "pickup_lon", "pickup_lng", "pickup_longitude", "start_x"],
            Field::EndLat => &["end_lat", "end_latitude", "end_station_latitude", "dropoff_lat", "dropoff_latitude", "end_y"],
            Field::EndLon => &["end_lon", "end_lng", "end_long", "end_longitude", "end_station_longitude", "dropoff_lon", "dropoff_lng", "dropoff_longitude", "end_x"],
            Field::VehicleId => &["vehicle_id", "bike_id", "bikeid", "device_id", "scooter_id", "vehicle"],
            Field::TripId => &["trip_id", "tripid", "ride_id", "id"],
        }
    }
}

fn normalize_header(h: &str) -> String {
    h.trim()
        .trim_start_matches('\u{feff}')
        .to_lowercase()
        .chars()
        .map(|c| if c == ' ' || c == '-' { '_' } else { c })
        .collect()
}

/// How to read a trip file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    pub delimiter: char,
    /// Offset of local civil time from UTC. Timestamps carrying their own
    /// offset are converted to it; naive timestamps are taken as local.
    pub utc_offset_minutes: i32,
    /// Explicit header names per field, overriding the alias list.
    pub columns: BTreeMap<Field, String>,
    /// Trips starting or ending outside this box are dropped.
    pub bounds: Option<(LatLon, LatLon)>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            delimiter: ',',
            utc_offset_minutes: 0,
            columns: BTreeMap::new(),
            bounds: None,
        }
    }
}

impl SchemaConfig {
    pub fn offset(&self) -> FixedOffset {
        FixedOffset::east_opt(self.utc_offset_minutes * 60).unwrap_or(FixedOffset::east_opt(0).unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrip {
    pub trip_id: String,
    pub vehicle_id: Option<String>,
    /// Local civil time.
    pub start_time: NaiveDateTime,
    pub end_time: NaiveDateTime,
    pub start: LatLon,
    pub end: LatLon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Malformed,
    EndBeforeStart,
    OutOfBox,
    OutOfHours,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
    /// First few drop messages with their line numbers.
    pub drop_samples: Vec<String>,
    pub first_date: Option<NaiveDate>,
    pub last_date: Option<NaiveDate>,
    pub days: usize,
    pub bounds: Option<(LatLon, LatLon)>,
    /// Vehicle repositionings inserted between trips.
    pub inserted_moves: usize,
}

const MAX_DROP_SAMPLES: usize = 20;

impl IngestReport {
    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }

    fn drop(&mut self, reason: DropReason, line: u64, detail: impl std::fmt::Display) {
        *self.dropped.entry(reason).or_default() += 1;
        if self.drop_samples.len() < MAX_DROP_SAMPLES {
            self.drop_samples.push(format!("line {line}: {detail}"));
        }
    }

    /// Moves `n` kept trips into the out-of-hours bucket.
    pub fn exclude_out_of_hours(&mut self, n: usize) {
        self.rows_kept -= n;
        if n > 0 {
            *self.dropped.entry(DropReason::OutOfHours).or_default() += n;
        }
    }
}

/// Parses a timestamp into local civil time.
pub fn parse_timestamp(s: &str, offset: FixedOffset) -> Option<NaiveDateTime> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&offset).naive_local());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f%#z", "%Y-%m-%dT%H:%M:%S%.f%#z", "%Y-%m-%d %H:%M:%S%.f %#z"] {
        if let Ok(dt) = DateTime::parse_from_str(s, fmt) {
            return Some(dt.with_timezone(&offset).naive_local());
        }
    }
    if let Some(naive) = s.strip_suffix(" UTC").or_else(|| s.strip_suffix('Z')) {
        if let Some(t) = parse_naive(naive) {
            return Some(t.and_utc().with_timezone(&offset).naive_local());
        }
    }
    if let Some(t) = parse_naive(s) {
        return Some(t);
    }
    // bare epoch seconds
    let secs: f64 = s.parse().ok()?;
    let dt = DateTime::from_timestamp_millis((secs * 1000.0).round() as i64)?;
    Some(dt.with_timezone(&offset).naive_local())
}

fn parse_naive(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 6] = [
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
        "%m/%d/%Y %H:%M:%S%.f",
        "%m/%d/%Y %H:%M",
    ];
    FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn resolve_columns(headers: &csv::StringRecord, cfg: &SchemaConfig) -> Result<HashMap<Field, usize>, IngestError> {
    let normalized: Vec<String> = headers.iter().map(normalize_header).collect();
    if normalized.iter().all(|h| h.is_empty()) {
        return Err(IngestError::EmptyHeader);
    }
    let mut map = HashMap::new();
    for field in Field::ALL {
        if let Some(name) = cfg.columns.get(&field) {
            let want = normalize_header(name);
            let idx = normalized
                .iter()
                .position(|h| *h == want)
                .ok_or_else(|| IngestError::UnknownColumn {
                    field: field.name().into(),
                    column: name.clone(),
                })?;
            map.insert(field, idx);
        } else if let Some(idx) = field
            .aliases()
            .iter()
            .find_map(|a| normalized.iter().position(|h| h == a))
        {
            map.insert(field, idx);
        }
    }
    let missing: Vec<String> = Field::REQUIRED
        .iter()
        .filter(|f| !map.contains_key(f))
        .map(|f| f.name().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(IngestError::MissingColumns(missing));
    }
    Ok(map)
}

/// Reads delimited trip records. Bad rows are dropped with a reason;
/// only header problems and I/O failures are errors.
pub fn parse_trips(reader: impl Read, cfg: &SchemaConfig) -> Result<(Vec<RawTrip>, IngestReport), IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(cfg.delimiter as u8)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| IngestError::Read(e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(IngestError::EmptyHeader);
    }
    let cols = resolve_columns(&headers, cfg)?;
    let offset = cfg.offset();
    let mut report = IngestReport::default();
    let mut trips = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                if e.is_io_error() {
                    return Err(IngestError::Read(e.to_string()));
                }
                report.rows_read += 1;
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                report.drop(DropReason::Malformed, line, e);
                continue;
            }
        }
        report.rows_read += 1;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let get = |f: Field| cols.get(&f).and_then(|&i| record.get(i)).unwrap_or("");
        let num = |f: Field| get(f).parse::<f64>().ok().filter(|v| v.is_finite());

        let times = (parse_timestamp(get(Field::StartTime), offset), parse_timestamp(get(Field::EndTime), offset));
        let (Some(start_time), Some(end_time)) = times else {
            report.drop(DropReason::Malformed, line, "unparseable timestamp");
            continue;
        };
        let coords = (num(Field::StartLat), num(Field::StartLon), num(Field::EndLat), num(Field::EndLon));
        let (Some(slat), Some(slon), Some(elat), Some(elon)) = coords else {
            report.drop(DropReason::Malformed, line, "missing or non-numeric coordinate");
            continue;
        };
        let (start, end) = (LatLon::new(slat, slon), LatLon::new(elat, elon));
        if !start.is_valid() || !end.is_valid() {
            report.drop(DropReason::Malformed, line, "coordinate out of range");
            continue;
        }
        if end_time < start_time {
            report.drop(DropReason::EndBeforeStart, line, "end time before start time");
            continue;
        }
        if let Some((lo, hi)) = cfg.bounds {
            let inside = |p: LatLon| p.lat >= lo.lat && p.lat <= hi.lat && p.lon >= lo.lon && p.lon <= hi.lon;
            if !inside(start) || !inside(end) {
                report.drop(DropReason::OutOfBox, line, "outside configured bounds");
                continue;
            }
        }
        let vehicle_id = cols
            .get(&Field::VehicleId)
            .and_then(|&i| record.get(i))
            .filter(|v| !v.is_empty())
            .map(str::to_string);
        let trip_id = cols
            .get(&Field::TripId)
            .and_then(|&i| record.get(i))
            .filter(|v| !v.is_empty())
            .map(str::to_string)
            .unwrap_or_else(|| format!("line{line}"));
        trips.push(RawTrip {
            trip_id,
            vehicle_id,
            start_time,
            end_time,
            start,
            end,
        });
    }
    report.rows_kept = trips.len();
    report.first_date = trips.iter().map(|t| t.start_time.date()).min();
    report.last_date = trips.iter().map(|t| t.start_time.date()).max();
    if let (Some(a), Some(b)) = (report.first_date, report.last_date) {
        report.days = (b - a).num_days() as usize + 1;
    }
    report.bounds = bounding_box(trips.iter().flat_map(|t| [t.start, t.end]));
    Ok((trips, report))
}

fn bounding_box(points: impl Iterator<Item = LatLon>) -> Option<(LatLon, LatLon)> {
    points.fold(None, |acc, p| match acc {
        None => Some((p, p)),
        Some((lo, hi)) => Some((
            LatLon::new(lo.lat.min(p.lat), lo.lon.min(p.lon)),
            LatLon::new(hi.lat.max(p.lat), hi.lon.max(p.lon)),
        )),
    })
}

/// Day 0 and the number of days covered by the trips' start dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    pub origin: NaiveDate,
    pub days: usize,
}

impl Horizon {
    pub fn from_trips(trips: &[RawTrip]) -> Option<Self> {
        let first = trips.iter().map(|t| t.start_time.date()).min()?;
        let last = trips.iter().map(|t| t.start_time.date()).max()?;
        Some(Self {
            origin: first,
            days: (last - first).num_days() as usize + 1,
        })
    }

    /// Seconds since local midnight of the origin date.
    pub fn seconds(&self, t: NaiveDateTime) -> f64 {
        let d: TimeDelta = t - self.origin.and_hms_opt(0, 0, 0).expect("midnight");
        d.num_milliseconds() as f64 / 1000.0
    }
}

/// A trip in model time and grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedTrip {
    pub trip_id: String,
    pub vehicle_id: Option<String>,
    pub start_time: f64,
    pub end_time: f64,
    pub start_cell: CellIndex,
    pub end_cell: CellIndex,
}

pub fn bin_trips(trips: &[RawTrip], grid: &GridSpec, horizon: &Horizon) -> Result<Vec<BinnedTrip>, IngestError> {
    trips
        .iter()
        .map(|t| {
            let outside = || IngestError::OutsideGrid { trip: t.trip_id.clone() };
            Ok(BinnedTrip {
                trip_id: t.trip_id.clone(),
                vehicle_id: t.vehicle_id.clone(),
                start_time: horizon.seconds(t.start_time),
                end_time: horizon.seconds(t.end_time),
                start_cell: grid.locate(t.start).map_err(|_| outside())?,
                end_cell: grid.locate(t.end).map_err(|_| outside())?,
            })
        })
        .collect()
}

/// Trips starting inside the period scheme become estimation trips; the
/// rest are counted.
pub fn trip_events(trips: &[BinnedTrip], periods: &PeriodScheme) -> (Vec<TripEvent>, usize) {
    let mut out = Vec::with_capacity(trips.len());
    let mut outside = 0;
    for t in trips {
        let (_, tod) = crate::availability::split_time(t.start_time);
        match periods.period_of(tod) {
            Some(period) if t.start_time >= 0.0 => out.push(TripEvent {
                time: t.start_time,
                period,
                cell: t.start_cell,
            }),
            _ => outside += 1,
        }
    }
    (out, outside)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DerivedAvailability {
    pub events: Vec<AvailabilityEvent>,
    pub inserted_moves: usize,
    pub vehicles: usize,
}

/// Follows each vehicle: parked at its drop-off cell until its next pickup.
/// A vehicle appears in its first pickup cell at the start of that day.
/// When a pickup happens away from the last drop-off, a move is inserted
/// at the midpoint of the idle interval.
pub fn derive_availability(trips: &[BinnedTrip]) -> Result<DerivedAvailability, IngestError> {
    let mut by_vehicle: BTreeMap<&str, Vec<&BinnedTrip>> = BTreeMap::new();
    for t in trips {
        let v = t.vehicle_id.as_deref().ok_or(IngestError::MissingVehicleIds)?;
        by_vehicle.entry(v).or_default().push(t);
    }
    let mut out = DerivedAvailability {
        vehicles: by_vehicle.len(),
        ..Default::default()
    };
    for (vehicle, mut list) in by_vehicle {
        list.sort_by(|a, b| {
            a.start_time
                .total_cmp(&b.start_time)
                .then(a.end_time.total_cmp(&b.end_time))
                .then_with(|| a.trip_id.cmp(&b.trip_id))
        });
        let first = list[0];
        let day_start = (first.start_time / DAY_SECONDS).floor() * DAY_SECONDS;
        out.events.push(AvailabilityEvent::new(day_start, first.start_cell, 1, EventSource::RebalanceAdd));
        for (k, t) in list.iter().enumerate() {
            if k > 0 {
                let prev = list[k - 1];
                if t.start_time < prev.end_time {
                    return Err(IngestError::OverlappingTrips {
                        vehicle: vehicle.to_string(),
                        first: prev.trip_id.clone(),
                        second: t.trip_id.clone(),
                    });
                }
                if t.start_cell != prev.end_cell {
                    let mid = 0.5 * (prev.end_time + t.start_time);
                    out.events.push(AvailabilityEvent::new(mid, prev.end_cell, -1, EventSource::RebalanceRemove));
                    out.events.push(AvailabilityEvent::new(mid, t.start_cell, 1, EventSource::RebalanceAdd));
                    out.inserted_moves += 1;
                }
            }
            out.events.push(AvailabilityEvent::new(t.start_time, t.start_cell, -1, EventSource::TripStart));
            out.events.push(AvailabilityEvent::new(t.end_time, t.end_cell, 1, EventSource::TripEnd));
        }
    }
    Ok(out)
}

/// For each service day, seeds every cell with the fewest vehicles that
/// keep that day's pickups feasible, then clears all vehicles at day end.
/// Service days start `day_boundary` seconds after midnight.
pub fn perfect_rebalance(trips: &[BinnedTrip], day_boundary: f64) -> Vec<AvailabilityEvent> {
    let service_day = |t: f64| ((t - day_boundary) / DAY_SECONDS).floor() as i64;
    let mut by_day: BTreeMap<i64, Vec<&BinnedTrip>> = BTreeMap::new();
    for t in trips {
        by_day.entry(service_day(t.start_time)).or_default().push(t);
    }
    let mut events = Vec::new();
    for (day, list) in by_day {
        let start = day as f64 * DAY_SECONDS + day_boundary;
        let end = start + DAY_SECONDS;
        let mut day_events: Vec<AvailabilityEvent> = Vec::with_capacity(2 * list.len());
        for t in list {
            day_events.push(AvailabilityEvent::new(t.start_time, t.start_cell, -1, EventSource::TripStart));
            if t.end_time < end {
                day_events.push(AvailabilityEvent::new(t.end_time, t.end_cell, 1, EventSource::TripEnd));
            }
        }
        day_events.sort_by(AvailabilityEvent::replay_order);

        let mut running: BTreeMap<CellIndex, i64> = BTreeMap::new();
        let mut seed: BTreeMap<CellIndex, i64> = BTreeMap::new();
        for e in &day_events {
            let r = running.entry(e.cell).or_default();
            *r += e.delta as i64;
            let s = seed.entry(e.cell).or_default();
            *s = (*s).max(-*r);
        }
        for (&cell, &s) in &seed {
            if s > 0 {
                events.push(AvailabilityEvent::new(start, cell, s as i32, EventSource::RebalanceAdd));
            }
        }
        events.extend(day_events);
        for (&cell, &s) in &seed {
            let remaining = s + running[&cell];
            if remaining > 0 {
                events.push(AvailabilityEvent::new(end, cell, -(remaining as i32), EventSource::RebalanceRemove));
            }
        }
    }
    events
}
