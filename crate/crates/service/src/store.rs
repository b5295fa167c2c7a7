//! Job records persisted under a workspace directory.
//!
//! Layout: `index.json` at the root, and per job `jobs/<id>/` holding
//! `state.json`, `params.json`, `input.csv` and, once done, `archive.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{SecondsFormat, Utc};
use demand_core::archive::{Archive, Manifest};
use demand_core::ingest::IngestReport;
use demand_core::pipeline::{EstimateParams, FieldError, Progress, Stage};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_finished(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobSource {
    /// Trip file uploaded and estimated here.
    Upload,
    /// Archive uploaded as is; no estimation ran.
    Reupload,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub stage: Option<Stage>,
    pub iteration: Option<usize>,
    pub max_iterations: Option<usize>,
    pub change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub state: JobState,
    pub source: JobSource,
    /// False when the results came from an uploaded archive.
    pub estimated: bool,
    pub created_at: String,
    pub started_at: Option<String>,
    pub finished_at: Option<String>,
    pub progress: JobProgress,
    pub params: Option<EstimateParams>,
    pub input_sha256: Option<String>,
    pub manifest: Option<Manifest>,
    /// Path of the archive relative to the workspace root.
    pub archive: Option<String>,
    pub error: Option<JobFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    state: JobState,
    source: JobSource,
    created_at: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    next_id: u64,
    jobs: Vec<IndexEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("no job with id {0:?}")]
    NotFound(String),
    #[error("workspace i/o: {0}")]
    Io(#[from] io::Error),
    #[error("workspace file {path}: {message}")]
    Corrupt { path: String, message: String },
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Write-then-rename so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

struct Inner {
    next_id: u64,
    jobs: BTreeMap<String, JobRecord>,
    archives: BTreeMap<String, Arc<Archive>>,
}

pub struct JobStore {
    root: PathBuf,
    inner: Mutex<Inner>,
}

impl JobStore {
    /// Opens or creates a workspace. Jobs left queued or running by an
    /// earlier process are returned for re-queueing, oldest first.
    pub fn open(root: impl Into<PathBuf>) -> Result<(Self, Vec<String>), StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("jobs"))?;
        let index_path = root.join("index.json");
        let index: Index = if index_path.exists() { read_json(&index_path)? } else { Index::default() };
        let mut jobs = BTreeMap::new();
        let mut pending = Vec::new();
        for entry in &index.jobs {
            let path = root.join("jobs").join(&entry.id).join("state.json");
            let mut record: JobRecord = read_json(&path)?;
            if !record.state.is_finished() {
                record.state = JobState::Queued;
                record.started_at = None;
                record.progress = JobProgress::default();
                pending.push(record.id.clone());
            }
            jobs.insert(record.id.clone(), record);
        }
        let store = Self {
            root,
            inner: Mutex::new(Inner {
                next_id: index.next_id,
                jobs,
                archives: BTreeMap::new(),
            }),
        };
        for id in &pending {
            store.persist(id)?;
        }
        Ok((store, pending))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn job_dir(&self, id: &str) -> PathBuf {
        self.root.join("jobs").join(id)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn write_index(&self, inner: &Inner) -> io::Result<()> {
        let index = Index {
            next_id: inner.next_id,
            jobs: inner
                .jobs
                .values()
                .map(|r| IndexEntry {
                    id: r.id.clone(),
                    state: r.state,
                    source: r.source,
                    created_at: r.created_at.clone(),
                })
                .collect(),
        };
        write_atomic(&self.root.join("index.json"), &serde_json::to_vec_pretty(&index).expect("index serializes"))
    }

    fn persist_locked(&self, inner: &Inner, id: &str) -> Result<(), StoreError> {
        let record = inner.jobs.get(id).ok_or_else(|| StoreError::NotFound(id.into()))?;
        let bytes = serde_json::to_vec_pretty(record).expect("record serializes");
        write_atomic(&self.job_dir(id).join("state.json"), &bytes)?;
        self.write_index(inner)?;
        Ok(())
    }

    fn persist(&self, id: &str) -> Result<(), StoreError> {
        let inner = self.lock();
        self.persist_locked(&inner, id)
    }

    fn allocate(&self, inner: &mut Inner) -> Result<String, StoreError> {
        inner.next_id += 1;
        let id = format!("job-{:06}", inner.next_id);
        fs::create_dir_all(self.job_dir(&id))?;
        Ok(id)
    }

    /// Stores the input and a queued record.
    pub fn create_job(&self, params: EstimateParams, input: &[u8]) -> Result<JobRecord, StoreError> {
        let mut inner = self.lock();
        let id = self.allocate(&mut inner)?;
        let dir = self.job_dir(&id);
        fs::write(dir.join("input.csv"), input)?;
        fs::write(dir.join("params.json"), serde_json::to_vec_pretty(&params).expect("params serialize"))?;
        let record = JobRecord {
            id: id.clone(),
            state: JobState::Queued,
            source: JobSource::Upload,
            estimated: true,
            created_at: now(),
            started_at: None,
            finished_at: None,
            progress: JobProgress::default(),
            params: Some(params),
            input_sha256: Some(demand_core::pipeline::sha256_hex(input)),
            manifest: None,
            archive: None,
            error: None,
        };
        inner.jobs.insert(id.clone(), record.clone());
        self.persist_locked(&inner, &id)?;
        Ok(record)
    }

    /// Stores an uploaded archive byte for byte as a finished job.
    pub fn import_archive(&self, text: &str, archive: Archive) -> Result<JobRecord, StoreError> {
        let mut inner = self.lock();
        let id = self.allocate(&mut inner)?;
        write_atomic(&self.job_dir(&id).join("archive.csv"), text.as_bytes())?;
        let stamp = now();
        let record = JobRecord {
            id: id.clone(),
            state: JobState::Done,
            source: JobSource::Reupload,
            estimated: false,
            created_at: stamp.clone(),
            started_at: None,
            finished_at: Some(stamp),
            progress: JobProgress::default(),
            params: None,
            input_sha256: archive.manifest.input.as_ref().map(|i| i.sha256.clone()),
            manifest: Some(archive.manifest.clone()),
            archive: Some(format!("jobs/{id}/archive.csv")),
            error: None,
        };
        inner.jobs.insert(id.clone(), record.clone());
        inner.archives.insert(id.clone(), Arc::new(archive));
        self.persist_locked(&inner, &id)?;
        Ok(record)
    }

    pub fn get(&self, id: &str) -> Result<JobRecord, StoreError> {
        self.lock().jobs.get(id).cloned().ok_or_else(|| StoreError::NotFound(id.into()))
    }

    pub fn list(&self) -> Vec<JobRecord> {
        self.lock().jobs.values().cloned().collect()
    }

    /// Marks a job running and returns its inputs.
    pub fn start(&self, id: &str) -> Result<(EstimateParams, Vec<u8>), StoreError> {
        let dir = self.job_dir(id);
        let input = fs::read(dir.join("input.csv"))?;
        let params: EstimateParams = read_json(&dir.join("params.json"))?;
        let mut inner = self.lock();
        let record = inner.jobs.get_mut(id).ok_or_else(|| StoreError::NotFound(id.into()))?;
        record.state = JobState::Running;
        record.started_at = Some(now());
        record.progress = JobProgress {
            max_iterations: Some(params.max_iters),
            ..Default::default()
        };
        self.persist_locked(&inner, id)?;
        Ok((params, input))
    }

    /// Records a progress event; stage changes are persisted, iterations
    /// only kept in memory.
    pub fn progress(&self, id: &str, event: Progress) {
        let mut inner = self.lock();
        let Some(record) = inner.jobs.get_mut(id) else { return };
        match event {
            Progress::Stage { stage } => {
                record.progress.stage = Some(stage);
                if let Err(e) = self.persist_locked(&inner, id) {
                    tracing::warn!(job = id, error = %e, "could not persist progress");
                }
            }
            Progress::Iteration { iteration, change } => {
                record.progress.iteration = Some(iteration);
                record.progress.change = Some(change);
            }
        }
    }

    pub fn finish(&self, id: &str, archive: Archive) -> Result<(), StoreError> {
        let text = archive.to_text();
        write_atomic(&self.job_dir(id).join("archive.csv"), text.as_bytes())?;
        let mut inner = self.lock();
        let record = inner.jobs.get_mut(id).ok_or_else(|| StoreError::NotFound(id.into()))?;
        record.state = JobState::Done;
        record.finished_at = Some(now());
        record.manifest = Some(archive.manifest.clone());
        record.archive = Some(format!("jobs/{id}/archive.csv"));
        inner.archives.insert(id.to_string(), Arc::new(archive));
        self.persist_locked(&inner, id)
    }

    pub fn fail(&self, id: &str, failure: JobFailure) -> Result<(), StoreError> {
        let mut inner = self.lock();
        let record = inner.jobs.get_mut(id).ok_or_else(|| StoreError::NotFound(id.into()))?;
        record.state = JobState::Failed;
        record.finished_at = Some(now());
        record.error = Some(failure);
        self.persist_locked(&inner, id)
    }

    pub fn archive_text(&self, id: &str) -> Result<String, StoreError> {
        Ok(fs::read_to_string(self.job_dir(id).join("archive.csv"))?)
    }

    /// Parsed archive of a finished job, cached after the first read.
    pub fn archive(&self, id: &str) -> Result<Arc<Archive>, StoreError> {
        if let Some(a) = self.lock().archives.get(id) {
            return Ok(a.clone());
        }
        let text = self.archive_text(id)?;
        let archive = Archive::parse(&text).map_err(|e| StoreError::Corrupt {
            path: format!("jobs/{id}/archive.csv"),
            message: e.to_string(),
        })?;
        let archive = Arc::new(archive);
        self.lock().archives.insert(id.to_string(), archive.clone());
        Ok(archive)
    }
}
