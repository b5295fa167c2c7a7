use demand_core::archive::{layers, Archive, LayerSelection, ServiceLevel};
use demand_core::pipeline::{run, EstimateParams, PipelineError, RebalanceMode};
use demand_core::synthetic::{synthetic_trips_csv, SyntheticSpec};

fn small() -> String {
    synthetic_trips_csv(&SyntheticSpec {
        trips: 1500,
        vehicles: 60,
        days: 7,
        ..Default::default()
    })
}

#[test]
fn end_to_end_archive() {
    let csv = small();
    let params = EstimateParams {
        service_hours: Some("06:00-22:00".into()),
        ..Default::default()
    };
    let mut stages = Vec::new();
    let out = run(csv.as_bytes(), &params, |p| stages.push(p)).unwrap();
    let a = &out.archive;
    let m = &a.manifest;
    assert_eq!(m.periods.count, 16);
    assert_eq!(m.days, 7);
    assert_eq!(a.rows.len(), 16 * m.grid.cell_count());
    assert_eq!(out.report.rows_kept + out.report.dropped_total(), out.report.rows_read);
    assert_eq!(m.run.trips, out.report.rows_kept);
    assert!(m.run.estimable_cells > 0);
    assert!(m.input.as_ref().unwrap().sha256.len() == 64);
    assert!(stages.len() > 5);

    // trace never decreases
    let ll: Vec<f64> = m.run.log_likelihood.iter().flatten().copied().collect();
    for w in ll.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
    }

    for r in &a.rows {
        assert_eq!(r.category == ServiceLevel::InsufficientData, r.mu_em.is_none());
        assert!(r.alpha <= 1.0 + 1e-12 && r.avail_frac <= 1.0 + 1e-12);
    }

    let text = a.to_text();
    let back = Archive::parse(&text).unwrap();
    assert_eq!(back.to_text(), text);
    let agg = layers(&back, LayerSelection::Aggregate).unwrap();
    assert_eq!(agg.cells.len(), m.grid.cell_count());
}

#[test]
fn identical_input_gives_identical_bytes() {
    let csv = small();
    let p = EstimateParams::default();
    let a = run(csv.as_bytes(), &p, |_| {}).unwrap().archive.to_text();
    let b = run(csv.as_bytes(), &p, |_| {}).unwrap().archive.to_text();
    assert_eq!(a, b);
}

#[test]
fn vehicle_less_input_needs_perfect_rebalancing() {
    let csv = synthetic_trips_csv(&SyntheticSpec {
        trips: 300,
        vehicles: 20,
        days: 3,
        with_vehicle_ids: false,
        ..Default::default()
    });
    let derive = EstimateParams {
        rebalance: RebalanceMode::Derive,
        ..Default::default()
    };
    assert!(matches!(run(csv.as_bytes(), &derive, |_| {}), Err(PipelineError::Ingest(_))));
    let auto = run(csv.as_bytes(), &EstimateParams::default(), |_| {}).unwrap();
    assert_eq!(auto.archive.manifest.run.trips, 300);
}

#[test]
fn empty_and_invalid_inputs() {
    let header = "start_time,end_time,start_lat,start_lon,end_lat,end_lon\n";
    assert!(matches!(run(header.as_bytes(), &EstimateParams::default(), |_| {}), Err(PipelineError::NoTrips(_))));
    let bad = EstimateParams {
        p0: 1.5,
        ..Default::default()
    };
    match run(header.as_bytes(), &bad, |_| {}) {
        Err(PipelineError::InvalidParams(e)) => assert_eq!(e[0].field, "p0"),
        other => panic!("unexpected {:?}", other.err()),
    }
}
