use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use demand_core::archive::{Archive, LayerSet, ServiceLevel};
use demand_core::pipeline::EstimateParams;
use demand_core::synthetic::{synthetic_trips_csv, SyntheticSpec};
use demand_service::{router, AppState, ErrorBody, JobRecord, JobSource, JobState, ServiceConfig};
use http_body_util::BodyExt;
use tower::ServiceExt;

const BOUNDARY: &str = "XBOUNDARYX";

fn trips_csv() -> String {
    synthetic_trips_csv(&SyntheticSpec {
        trips: 400,
        vehicles: 25,
        days: 3,
        ..Default::default()
    })
}

fn multipart(params: Option<&str>, trips: Option<&str>) -> Body {
    let mut body = String::new();
    if let Some(p) = params {
        body += &format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"params\"\r\n\r\n{p}\r\n");
    }
    if let Some(t) = trips {
        body += &format!(
            "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"trips\"; filename=\"trips.csv\"\r\nContent-Type: text/csv\r\n\r\n{t}\r\n"
        );
    }
    body += &format!("--{BOUNDARY}--\r\n");
    Body::from(body)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn submit(app: &Router, params: Option<&str>, trips: Option<&str>) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/jobs")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(multipart(params, trips))
        .unwrap();
    send(app, req).await
}

fn json<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> T {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}

async fn wait_finished(app: &Router, id: &str) -> (JobRecord, Vec<JobState>) {
    let mut seen = Vec::new();
    for _ in 0..2400 {
        let (status, body) = get(app, &format!("/jobs/{id}")).await;
        assert_eq!(status, StatusCode::OK);
        let record: JobRecord = json(&body);
        if seen.last() != Some(&record.state) {
            seen.push(record.state);
        }
        if record.state.is_finished() {
            return (record, seen);
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("job {id} did not finish");
}

fn start(dir: &std::path::Path) -> (AppState, Router) {
    let state = AppState::start(&ServiceConfig::new(dir)).unwrap();
    let app = router(state.clone());
    (state, app)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn job_lifecycle_layers_and_archive_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_state, app) = start(dir.path());
    let csv = trips_csv();
    let params = r#"{"service_hours": "06:00-22:00", "periods": "4"}"#;

    let (status, body) = submit(&app, Some(params), Some(&csv)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&body));
    let queued: JobRecord = json(&body);
    assert_eq!(queued.state, JobState::Queued);

    let (done, seen) = wait_finished(&app, &queued.id).await;
    assert_eq!(done.state, JobState::Done, "{:?}", done.error);
    assert_eq!(*seen.last().unwrap(), JobState::Done);
    // states only move forward
    let rank = |s: &JobState| [JobState::Queued, JobState::Running, JobState::Done].iter().position(|x| x == s).unwrap();
    assert!(seen.windows(2).all(|w| rank(&w[0]) < rank(&w[1])), "{seen:?}");
    assert!(done.started_at.is_some() && done.finished_at.is_some());
    assert!(done.estimated);
    let manifest = done.manifest.clone().unwrap();
    assert_eq!(manifest.periods.count, 4);
    assert_eq!(done.progress.iteration, Some(manifest.run.iterations));

    // layers: one period, aggregate and a window
    let (status, body) = get(&app, &format!("/jobs/{}/layers?period=1", done.id)).await;
    assert_eq!(status, StatusCode::OK);
    let one: LayerSet = json(&body);
    assert_eq!(one.periods, vec![1]);
    assert_eq!(one.cells.len(), manifest.grid.cell_count());
    let (_, body) = get(&app, &format!("/jobs/{}/layers?period=aggregate", done.id)).await;
    let all: LayerSet = json(&body);
    assert_eq!(all.periods, vec![0, 1, 2, 3]);
    let (_, body) = get(&app, &format!("/jobs/{}/layers?period=10:00-18:00", done.id)).await;
    let window: LayerSet = json(&body);
    assert_eq!(window.periods, vec![1, 2]);
    assert!(all.cells.iter().any(|c| c.service_level == ServiceLevel::InsufficientData));

    // invalid selections
    for bad in ["9", "noon", "07:00-08:00"] {
        let (status, body) = get(&app, &format!("/jobs/{}/layers?period={bad}", done.id)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
        let err: ErrorBody = json(&body);
        assert_eq!(err.fields[0].field, "period");
    }

    // archive download, re-upload, identical layers, byte-identical download
    let (status, archive_bytes) = get(&app, &format!("/jobs/{}/archive", done.id)).await;
    assert_eq!(status, StatusCode::OK);
    let archive = Archive::parse(std::str::from_utf8(&archive_bytes).unwrap()).unwrap();
    assert_eq!(archive.manifest, manifest);

    let (status, body) = send(&app, Request::post("/archives").body(Body::from(archive_bytes.clone())).unwrap()).await;
    assert_eq!(status, StatusCode::CREATED);
    let re: JobRecord = json(&body);
    assert_eq!(re.state, JobState::Done);
    assert_eq!(re.source, JobSource::Reupload);
    assert!(!re.estimated);
    assert!(re.params.is_none());
    for sel in ["0", "3", "aggregate", "06:00-14:00"] {
        let (_, a) = get(&app, &format!("/jobs/{}/layers?period={sel}", done.id)).await;
        let (_, b) = get(&app, &format!("/jobs/{}/layers?period={sel}", re.id)).await;
        assert_eq!(a, b, "layers differ for {sel}");
    }
    let (_, again) = get(&app, &format!("/jobs/{}/archive", re.id)).await;
    assert_eq!(again, archive_bytes);

    let (_, body) = get(&app, "/jobs").await;
    let list: Vec<JobRecord> = json(&body);
    assert_eq!(list.len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn identical_submissions_give_identical_archives() {
    let dir = tempfile::tempdir().unwrap();
    let (_state, app) = start(dir.path());
    let csv = trips_csv();
    let mut ids = Vec::new();
    for _ in 0..2 {
        let (_, body) = submit(&app, Some(r#"{"periods": "2", "seed": 9}"#), Some(&csv)).await;
        ids.push(json::<JobRecord>(&body).id);
    }
    assert_ne!(ids[0], ids[1]);
    let mut archives = Vec::new();
    for id in &ids {
        let (record, _) = wait_finished(&app, id).await;
        assert_eq!(record.state, JobState::Done);
        archives.push(get(&app, &format!("/jobs/{id}/archive")).await.1);
    }
    assert_eq!(archives[0], archives[1]);
}

#[tokio::test]
async fn validation_errors_are_synchronous_and_per_field() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = start(dir.path());
    let csv = trips_csv();

    let (status, body) = submit(&app, Some(r#"{"p0": 1.5}"#), Some(&csv)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let err: ErrorBody = json(&body);
    assert_eq!(err.error, "invalid_fields");
    assert!(err.fields.iter().any(|f| f.field == "p0"), "{:?}", err.fields);

    let (status, body) = submit(&app, Some(r#"{"cell_width": "wide", "bogus": 1}"#), Some(&csv)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let names: Vec<String> = json::<ErrorBody>(&body).fields.into_iter().map(|f| f.field).collect();
    assert!(names.contains(&"cell_width".to_string()) && names.contains(&"bogus".to_string()), "{names:?}");

    let (status, body) = submit(&app, Some("{}"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json::<ErrorBody>(&body).fields[0].field, "trips");

    let (status, body) = submit(&app, None, Some("a,b,c\n1,2,3\n")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let err: ErrorBody = json(&body);
    assert_eq!(err.fields[0].field, "trips");
    assert!(err.fields[0].message.contains("missing required columns"), "{}", err.fields[0].message);

    // nothing was queued
    assert!(state.store().list().is_empty());
}

#[tokio::test]
async fn unknown_and_unfinished_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = start(dir.path());
    for uri in ["/jobs/job-999999", "/jobs/job-999999/layers", "/jobs/job-999999/archive"] {
        let (status, body) = get(&app, uri).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(json::<ErrorBody>(&body).error, "not_found");
    }
    // created but never handed to a worker
    let record = state.store().create_job(EstimateParams::default(), trips_csv().as_bytes()).unwrap();
    for suffix in ["layers?period=0", "archive"] {
        let (status, body) = get(&app, &format!("/jobs/{}/{suffix}", record.id)).await;
        assert_eq!(status, StatusCode::CONFLICT);
        assert_eq!(json::<ErrorBody>(&body).error, "not_done");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn failed_ingest_reports_reasons() {
    let dir = tempfile::tempdir().unwrap();
    let (_state, app) = start(dir.path());
    let csv = "trip_id,start_time,end_time,start_lat,start_lon,end_lat,end_lon\n\
               a,not a time,2024-06-03 08:10:00,39.1,-94.5,39.1,-94.5\n\
               b,2024-06-03 09:00:00,2024-06-03 08:00:00,39.1,-94.5,39.1,-94.5\n";
    let (status, body) = submit(&app, None, Some(csv)).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (record, _) = wait_finished(&app, &json::<JobRecord>(&body).id).await;
    assert_eq!(record.state, JobState::Failed);
    let failure = record.error.unwrap();
    let report = failure.ingest.expect("ingest report");
    assert_eq!(report.rows_read, 2);
    assert_eq!(report.dropped_total(), 2);
    assert_eq!(report.dropped.len(), 2);
}

#[tokio::test]
async fn malformed_archives_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_state, app) = start(dir.path());
    let (status, body) = send(&app, Request::post("/archives").body(Body::from("period,cell\n1,2\n")).unwrap()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json::<ErrorBody>(&body).error, "invalid_archive");

    let out = demand_core::pipeline::run(trips_csv().as_bytes(), &EstimateParams::default(), |_| {}).unwrap();
    let text = out.archive.to_text();
    let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    let (status, body) = send(&app, Request::post("/archives").body(Body::from(truncated)).unwrap()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(json::<ErrorBody>(&body).message.contains("rows"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn workspace_survives_restart_and_requeues_pending_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let pending_id;
    let done_id;
    {
        let (state, app) = start(dir.path());
        let (_, body) = submit(&app, Some(r#"{"periods": "2"}"#), Some(&trips_csv())).await;
        done_id = json::<JobRecord>(&body).id;
        wait_finished(&app, &done_id).await;
        // left queued, as if the process stopped before running it
        pending_id = state.store().create_job(EstimateParams::default(), trips_csv().as_bytes()).unwrap().id;
    }
    assert!(dir.path().join("index.json").exists());
    assert!(dir.path().join("jobs").join(&done_id).join("archive.csv").exists());

    let (_state, app) = start(dir.path());
    let (status, body) = get(&app, &format!("/jobs/{done_id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json::<JobRecord>(&body).state, JobState::Done);
    let (status, _) = get(&app, &format!("/jobs/{done_id}/layers?period=aggregate")).await;
    assert_eq!(status, StatusCode::OK);
    let (record, _) = wait_finished(&app, &pending_id).await;
    assert_eq!(record.state, JobState::Done);

    // ids keep counting after a restart
    let (_, body) = submit(&app, None, Some(&trips_csv())).await;
    let next = json::<JobRecord>(&body).id;
    assert!(next > pending_id, "{next} after {pending_id}");
}
