//! Synthetic trip files shaped like operator exports.

use std::fmt::Write as _;

use chrono::{NaiveDate, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::LatLon;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub trips: usize,
    pub vehicles: usize,
    pub days: usize,
    pub center: LatLon,
    /// Half-width of the square holding the demand hot spots, meters.
    pub radius_m: f64,
    pub hotspots: usize,
    /// Spread of trip ends around a hot spot, meters.
    pub spread_m: f64,
    pub service_start_hour: u32,
    pub service_end_hour: u32,
    /// Chance that a vehicle is moved between two trips.
    pub relocation_prob: f64,
    pub with_vehicle_ids: bool,
    pub first_day: NaiveDate,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            trips: 2000,
            vehicles: 150,
            days: 14,
            center: LatLon::new(39.0997, -94.5786),
            radius_m: 4000.0,
            hotspots: 8,
            spread_m: 350.0,
            service_start_hour: 6,
            service_end_hour: 22,
            relocation_prob: 0.05,
            with_vehicle_ids: true,
            first_day: NaiveDate::from_ymd_opt(2024, 6, 3).expect("valid date"),
            seed: 1,
        }
    }
}

fn offset(center: LatLon, east: f64, north: f64) -> LatLon {
    let m_lat = 111_195.0;
    let m_lon = m_lat * center.lat.to_radians().cos();
    LatLon::new(center.lat + north / m_lat, center.lon + east / m_lon)
}

/// CSV text with columns trip_id, vehicle_id, start_time, end_time and the
/// four coordinates. Each vehicle's trips are disjoint in time.
pub fn synthetic_trips_csv(spec: &SyntheticSpec) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hotspots: Vec<LatLon> = (0..spec.hotspots.max(1))
        .map(|_| {
            let e = rng.random_range(-spec.radius_m..=spec.radius_m);
            let n = rng.random_range(-spec.radius_m..=spec.radius_m);
            offset(spec.center, e, n)
        })
        .collect();
    let noise = Normal::new(0.0, spec.spread_m.max(1e-9)).expect("finite spread");
    let place = |rng: &mut ChaCha8Rng| {
        let h = hotspots[rng.random_range(0..hotspots.len())];
        offset(h, noise.sample(rng), noise.sample(rng))
    };

    let window = (spec.service_end_hour.saturating_sub(spec.service_start_hour)).max(1) as f64 * 3600.0;
    let vehicles = spec.vehicles.max(1);
    let midnight = spec.first_day.and_hms_opt(0, 0, 0).expect("midnight");
    let mut out = String::from("trip_id,vehicle_id,start_time,end_time,start_lat,start_lon,end_lat,end_lon\n");
    let mut trip_no = 0;
    for v in 0..vehicles {
        let n = spec.trips / vehicles + usize::from(v < spec.trips % vehicles);
        let mut starts: Vec<f64> = (0..n)
            .map(|_| {
                let day = rng.random_range(0..spec.days.max(1)) as f64;
                day * 86_400.0 + spec.service_start_hour as f64 * 3600.0 + rng.random::<f64>() * window
            })
            .collect();
        starts.sort_by(f64::total_cmp);
        let mut here = place(&mut rng);
        for k in 0..n {
            let start = starts[k];
            let limit = starts.get(k + 1).map(|&s| s - start - 1.0).unwrap_or(f64::INFINITY);
            let duration = rng.random_range(240.0..1500.0_f64).min(limit.max(0.0));
            if rng.random::<f64>() < spec.relocation_prob {
                here = place(&mut rng);
            }
            let dest = place(&mut rng);
            let fmt = |t: f64| {
                (midnight + TimeDelta::milliseconds((t * 1000.0).round() as i64))
                    .format("%Y-%m-%d %H:%M:%S")
                    .to_string()
            };
            let vehicle = if spec.with_vehicle_ids { format!("v{v:05}") } else { String::new() };
            let _ = writeln!(
                out,
                "t{trip_no:07},{vehicle},{},{},{:.6},{:.6},{:.6},{:.6}",
                fmt(start),
                fmt(start + duration),
                here.lat,
                here.lon,
                dest.lat,
                dest.lon
            );
            trip_no += 1;
            here = dest;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_trips, SchemaConfig};

    #[test]
    fn generated_file_parses_cleanly() {
        let spec = SyntheticSpec {
            trips: 500,
            vehicles: 40,
            ..Default::default()
        };
        let text = synthetic_trips_csv(&spec);
        let (trips, report) = parse_trips(text.as_bytes(), &SchemaConfig::default()).unwrap();
        assert_eq!(trips.len(), 500);
        assert_eq!(report.dropped_total(), 0);
        assert_eq!(text, synthetic_trips_csv(&spec));
    }
}
