use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use fringe_core::annot::{parse_annotations, write_annotations, FieldError, FrameRecord};
use fringe_core::config::RunConfig;
use fringe_core::detect::Detection;
use fringe_core::eval::{frame_loss, truths_of, LossEntry, LossRanking};
use fringe_core::pipeline::{map_file_name, predict_files, write_prediction_outputs, Predictor};
use fringe_core::predictions::parse_predictions;
use serde::Serialize;

pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const MAPS_DIR: &str = "maps";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("session not loaded yet")]
    NotLoaded,
    #[error("unknown frame '{0}'")]
    NotFound(String),
    #[error("annotation failed validation")]
    Invalid(Vec<FieldError>),
    #[error("revision {given} is stale; current revision is {current}")]
    Conflict { given: u64, current: u64 },
    #[error("a recompute job is already active")]
    JobActive,
    #[error(transparent)]
    Core(#[from] fringe_core::Error),
    #[error("{0}")]
    Io(String),
}

/// In-memory view of one data directory.
#[derive(Debug, Clone, Default)]
pub struct Session {
    /// Annotation records in file order.
    pub frames: Vec<FrameRecord>,
    index: HashMap<String, usize>,
    pub predictions: HashMap<String, Vec<Detection>>,
    pub maps: HashSet<String>,
    pub losses: HashMap<String, f64>,
    pub revision: u64,
}

impl Session {
    pub fn load(data_dir: &Path, cfg: &RunConfig) -> Result<Session, StoreError> {
        let ann_path = data_dir.join(ANNOTATIONS_FILE);
        let text = std::fs::read_to_string(&ann_path)
            .map_err(|e| StoreError::Io(format!("{}: {e}", ann_path.display())))?;
        let frames = parse_annotations(&text)?;
        let pred_path = data_dir.join(PREDICTIONS_FILE);
        let mut predictions = HashMap::new();
        if pred_path.exists() {
            let text = std::fs::read_to_string(&pred_path)
                .map_err(|e| StoreError::Io(format!("{}: {e}", pred_path.display())))?;
            for fp in parse_predictions(&text)? {
                predictions.insert(fp.frame_id, fp.detections);
            }
        }
        let maps = frames
            .iter()
            .filter(|f| data_dir.join(MAPS_DIR).join(map_file_name(&f.frame_id)).is_file())
            .map(|f| f.frame_id.clone())
            .collect();
        let index = frames.iter().enumerate().map(|(i, f)| (f.frame_id.clone(), i)).collect();
        let mut s = Session {
            frames,
            index,
            predictions,
            maps,
            losses: HashMap::new(),
            revision: 0,
        };
        s.recompute_losses(cfg);
        Ok(s)
    }

    pub fn frame(&self, id: &str) -> Option<&FrameRecord> {
        self.index.get(id).map(|&i| &self.frames[i])
    }

    fn loss_of(&self, f: &FrameRecord, cfg: &RunConfig) -> f64 {
        let preds = self.predictions.get(&f.frame_id).map(Vec::as_slice).unwrap_or(&[]);
        frame_loss(preds, &truths_of(f), &cfg.eval.loss)
    }

    pub fn recompute_losses(&mut self, cfg: &RunConfig) {
        self.losses = self.frames.iter().map(|f| (f.frame_id.clone(), self.loss_of(f, cfg))).collect();
    }

    pub fn ranking(&self) -> LossRanking {
        let mut entries: Vec<LossEntry> = self
            .frames
            .iter()
            .map(|f| LossEntry {
                frame_id: f.frame_id.clone(),
                loss: self.losses.get(&f.frame_id).copied().unwrap_or(0.0),
            })
            .collect();
        entries.sort_by(|a, b| b.loss.total_cmp(&a.loss).then_with(|| a.frame_id.cmp(&b.frame_id)));
        LossRanking { entries }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobInfo {
    pub job_id: u64,
    pub status: JobStatus,
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Default)]
struct Jobs {
    next_id: u64,
    table: HashMap<u64, JobInfo>,
}

/// Shared state behind the HTTP API. Reads run concurrently; annotation
/// writes are serialized through `writer`.
pub struct SessionStore {
    data_dir: PathBuf,
    config: RunConfig,
    predictor: Arc<dyn Predictor>,
    session: RwLock<Option<Session>>,
    writer: Mutex<()>,
    jobs: Mutex<Jobs>,
}

impl SessionStore {
    pub fn new(data_dir: impl Into<PathBuf>, config: RunConfig, predictor: Arc<dyn Predictor>) -> Self {
        SessionStore {
            data_dir: data_dir.into(),
            config,
            predictor,
            session: RwLock::new(None),
            writer: Mutex::new(()),
            jobs: Mutex::new(Jobs::default()),
        }
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn load(&self) -> Result<(), StoreError> {
        let s = Session::load(&self.data_dir, &self.config)?;
        *self.session.write().expect("session lock") = Some(s);
        Ok(())
    }

    pub fn is_loaded(&self) -> bool {
        self.session.read().expect("session lock").is_some()
    }

    /// Run `f` on the loaded session.
    pub fn read<T>(&self, f: impl FnOnce(&Session) -> T) -> Result<T, StoreError> {
        let guard = self.session.read().expect("session lock");
        guard.as_ref().map(f).ok_or(StoreError::NotLoaded)
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf, StoreError> {
        self.read(|s| s.frame(id).is_some())?
            .then(|| self.data_dir.join(id))
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    pub fn map_path(&self, id: &str) -> Result<Option<PathBuf>, StoreError> {
        let has = self.read(|s| s.frame(id).map(|_| s.maps.contains(id)))?;
        match has {
            None => Err(StoreError::NotFound(id.to_string())),
            Some(false) => Ok(None),
            Some(true) => Ok(Some(self.data_dir.join(MAPS_DIR).join(map_file_name(id)))),
        }
    }

    /// Replace one frame's annotations. `if_match`, when given, must equal
    /// the current revision. Returns the new revision.
    pub fn put_annotations(&self, id: &str, record: FrameRecord, if_match: Option<u64>) -> Result<u64, StoreError> {
        let mut errors = record.validate();
        if record.frame_id != id {
            errors.insert(
                0,
                FieldError {
                    field: "frame_id".into(),
                    message: format!("body names '{}' but the URL names '{id}'", record.frame_id),
                },
            );
        }
        let _w = self.writer.lock().expect("writer lock");
        let (current, mut frames) = self.read(|s| (s.revision, s.frame(id).map(|_| s.frames.clone())))?;
        let Some(ref mut list) = frames else {
            return Err(StoreError::NotFound(id.to_string()));
        };
        if !errors.is_empty() {
            return Err(StoreError::Invalid(errors));
        }
        if let Some(given) = if_match {
            if given != current {
                return Err(StoreError::Conflict { given, current });
            }
        }
        let slot = list.iter().position(|f| f.frame_id == id).expect("frame exists");
        list[slot] = record.clone();
        let text = write_annotations(list)?;
        self.write_atomic(&self.data_dir.join(ANNOTATIONS_FILE), text.as_bytes())?;

        let mut guard = self.session.write().expect("session lock");
        let s = guard.as_mut().ok_or(StoreError::NotLoaded)?;
        let i = s.index[id];
        s.frames[i] = record;
        let loss = s.loss_of(&s.frames[i], &self.config);
        s.losses.insert(id.to_string(), loss);
        s.revision += 1;
        Ok(s.revision)
    }

    /// Write to a temporary file in the same directory, then rename over
    /// the target.
    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let io = |e: std::io::Error| StoreError::Io(format!("{}: {e}", path.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(bytes).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn job(&self, id: u64) -> Option<JobInfo> {
        self.jobs.lock().expect("jobs lock").table.get(&id).cloned()
    }

    fn set_job(&self, id: u64, f: impl FnOnce(&mut JobInfo)) {
        if let Some(j) = self.jobs.lock().expect("jobs lock").table.get_mut(&id) {
            f(j);
        }
    }

    /// Queue a background re-prediction of every frame. At most one job is
    /// active at a time.
    pub fn start_recompute(self: &Arc<Self>) -> Result<u64, StoreError> {
        if !self.is_loaded() {
            return Err(StoreError::NotLoaded);
        }
        let id = {
            let mut jobs = self.jobs.lock().expect("jobs lock");
            let active = jobs
                .table
                .values()
                .any(|j| matches!(j.status, JobStatus::Queued | JobStatus::Running));
            if active {
                return Err(StoreError::JobActive);
            }
            jobs.next_id += 1;
            let id = jobs.next_id;
            jobs.table.insert(
                id,
                JobInfo {
                    job_id: id,
                    status: JobStatus::Queued,
                    progress: 0.0,
                    error: None,
                },
            );
            id
        };
        let store = Arc::clone(self);
        std::thread::spawn(move || {
            store.set_job(id, |j| j.status = JobStatus::Running);
            match store.run_recompute(id) {
                Ok(()) => store.set_job(id, |j| {
                    j.status = JobStatus::Done;
                    j.progress = 1.0;
                }),
                Err(e) => {
                    tracing::error!("recompute job {id} failed: {e}");
                    store.set_job(id, |j| {
                        j.status = JobStatus::Failed;
                        j.error = Some(e.to_string());
                    })
                }
            }
        });
        Ok(id)
    }

    fn run_recompute(&self, id: u64) -> Result<(), StoreError> {
        let names: Vec<String> = self.read(|s| s.frames.iter().map(|f| f.frame_id.clone()).collect())?;
        let total = names.len().max(1);
        let done = AtomicUsize::new(0);
        let tick = || {
            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
            self.set_job(id, |j| j.progress = (n as f64 / total as f64).min(0.99));
        };
        let results = predict_files(&self.data_dir, &names, self.predictor.as_ref(), &tick);
        for (name, r) in &results {
            if let Err(e) = r {
                tracing::warn!("{name}: {e}");
            }
        }
        write_prediction_outputs(
            &results,
            &self.data_dir.join(PREDICTIONS_FILE),
            &self.data_dir.join(MAPS_DIR),
            self.config.eval.bin,
        )?;

        let mut guard = self.session.write().expect("session lock");
        let s = guard.as_mut().ok_or(StoreError::NotLoaded)?;
        s.predictions.clear();
        s.maps.clear();
        for (name, r) in results {
            if let Ok(fp) = r {
                s.predictions.insert(name.clone(), fp.detections);
                s.maps.insert(name);
            }
        }
        s.recompute_losses(&self.config);
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }
}
