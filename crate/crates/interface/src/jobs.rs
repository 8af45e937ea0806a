//! Persistent FIFO job queue served by a pool of backbone workers.
//!
//! Layout under the artifact root:
//! `jobs/<id>.json` (job record), `jobs/<id>.png` (uploaded image) and
//! `runs/<id>/` (the run bundle).

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use chrono::{DateTime, Utc};
use moveact_core::backbone::{self, Backbone};
use moveact_core::pipeline::{run_edit_with_id, EditRequestFields, BUNDLE_FILES};
use moveact_core::{Config, EditRequest, Error, RgbImage};
use serde::{Deserialize, Serialize};

pub const RESTART_NOTE: &str = "service restarted while the job was running";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running)
                | (JobState::Running, JobState::Done)
                | (JobState::Running, JobState::Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub request: EditRequestFields,
    pub state: JobState,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub error: Option<String>,
    /// Artifact name to path relative to the run directory.
    #[serde(default)]
    pub artifact_refs: BTreeMap<String, PathBuf>,
}

struct Queue {
    jobs: HashMap<String, Job>,
    pending: VecDeque<String>,
    shutdown: bool,
}

/// Shared job store. Cloning shares the same queue.
#[derive(Clone)]
pub struct JobStore {
    inner: Arc<(Mutex<Queue>, Condvar)>,
    root: PathBuf,
}

impl JobStore {
    /// Opens (or creates) a store; jobs left `running` by a previous process are failed.
    pub fn open(root: &Path) -> moveact_core::Result<Self> {
        for dir in [root.join("jobs"), root.join("runs")] {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let store = Self {
            inner: Arc::new((
                Mutex::new(Queue {
                    jobs: HashMap::new(),
                    pending: VecDeque::new(),
                    shutdown: false,
                }),
                Condvar::new(),
            )),
            root: root.to_path_buf(),
        };
        let mut loaded = Vec::new();
        let dir = root.join("jobs");
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            match serde_json::from_str::<Job>(&text) {
                Ok(job) => loaded.push(job),
                Err(e) => log::warn!("skipping unreadable job record {}: {e}", path.display()),
            }
        }
        loaded.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.id.cmp(&b.id)));
        {
            let mut q = store.lock();
            for mut job in loaded {
                match job.state {
                    JobState::Running => {
                        job.state = JobState::Failed;
                        job.error = Some(RESTART_NOTE.into());
                        job.finished_at = Some(Utc::now());
                        store.persist(&job)?;
                    }
                    JobState::Queued => q.pending.push_back(job.id.clone()),
                    _ => {}
                }
                q.jobs.insert(job.id.clone(), job);
            }
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Queue> {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn persist(&self, job: &Job) -> moveact_core::Result<()> {
        let path = self.root.join("jobs").join(format!("{}.json", job.id));
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(job)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Queues a validated request; the caller has already checked it.
    pub fn submit(&self, image: &RgbImage, request: EditRequestFields) -> moveact_core::Result<Job> {
        let id = moveact_core::pipeline::new_run_id();
        image.save_png(&self.root.join("jobs").join(format!("{id}.png")))?;
        let job = Job {
            id: id.clone(),
            request,
            state: JobState::Queued,
            created_at: Utc::now(),
            started_at: None,
            finished_at: None,
            error: None,
            artifact_refs: BTreeMap::new(),
        };
        self.persist(&job)?;
        let mut q = self.lock();
        q.jobs.insert(id.clone(), job.clone());
        q.pending.push_back(id);
        drop(q);
        self.inner.1.notify_one();
        Ok(job)
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.lock().jobs.get(id).cloned()
    }

    /// All jobs, oldest first.
    pub fn list(&self) -> Vec<Job> {
        let mut jobs: Vec<Job> = self.lock().jobs.values().cloned().collect();
        jobs.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.id.cmp(&b.id)));
        jobs
    }

    pub fn queued(&self) -> usize {
        self.lock().pending.len()
    }

    fn transition(&self, id: &str, next: JobState, edit: impl FnOnce(&mut Job)) -> moveact_core::Result<Job> {
        let mut q = self.lock();
        let job = q
            .jobs
            .get_mut(id)
            .ok_or_else(|| Error::invalid("id", format!("unknown job {id}")))?;
        if !job.state.can_become(next) {
            return Err(Error::invalid(
                "state",
                format!("job {id} cannot go from {:?} to {next:?}", job.state),
            ));
        }
        job.state = next;
        edit(job);
        let job = job.clone();
        drop(q);
        self.persist(&job)?;
        Ok(job)
    }

    /// Blocks until a job is pending and marks it running; `None` after shutdown.
    fn take_next(&self) -> Option<Job> {
        let mut q = self.lock();
        loop {
            if q.shutdown {
                return None;
            }
            if let Some(id) = q.pending.pop_front() {
                drop(q);
                return match self.transition(&id, JobState::Running, |j| j.started_at = Some(Utc::now())) {
                    Ok(job) => Some(job),
                    Err(e) => {
                        log::error!("cannot start job {id}: {e}");
                        q = self.lock();
                        continue;
                    }
                };
            }
            q = self.inner.1.wait(q).unwrap_or_else(|p| p.into_inner());
        }
    }

    fn execute(&self, job: &Job, config: &Config, backbone: &mut dyn Backbone) -> Result<BTreeMap<String, PathBuf>, String> {
        let upload = self.root.join("jobs").join(format!("{}.png", job.id));
        let image = RgbImage::load(&upload).map_err(|e| e.to_string())?;
        let request = EditRequest {
            image,
            fields: job.request.clone(),
        };
        run_edit_with_id(&request, config, backbone, &self.root.join("runs"), &job.id).map_err(|e| e.to_string())?;
        let dir = self.run_dir(&job.id);
        if !dir.join("edited.png").is_file() {
            return Err("run finished without edited.png".into());
        }
        Ok(BUNDLE_FILES
            .iter()
            .map(|name| (name.to_string(), PathBuf::from(name)))
            .collect())
    }

    fn run_one(&self, job: Job, config: &Config, backbone: &mut dyn Backbone) {
        let outcome = self.execute(&job, config, backbone);
        let result = match outcome {
            Ok(refs) => self.transition(&job.id, JobState::Done, |j| {
                j.finished_at = Some(Utc::now());
                j.artifact_refs = refs;
            }),
            Err(message) => {
                log::warn!("job {} failed: {message}", job.id);
                self.transition(&job.id, JobState::Failed, |j| {
                    j.finished_at = Some(Utc::now());
                    j.error = Some(if message.is_empty() { "unknown error".into() } else { message });
                })
            }
        };
        if let Err(e) = result {
            log::error!("cannot record outcome of job {}: {e}", job.id);
        }
    }

    /// Starts `pool_size` workers, each owning one backbone session.
    pub fn start_workers(&self, config: &Config) -> moveact_core::Result<WorkerPool> {
        let mut handles = Vec::new();
        for n in 0..config.service.pool_size.max(1) {
            let mut session = backbone::open(&config.backbone)?;
            let store = self.clone();
            let config = config.clone();
            let handle = std::thread::Builder::new()
                .name(format!("moveact-worker-{n}"))
                .spawn(move || {
                    while let Some(job) = store.take_next() {
                        store.run_one(job, &config, session.as_mut());
                    }
                })
                .map_err(|e| Error::io("<worker thread>", e))?;
            handles.push(handle);
        }
        Ok(WorkerPool {
            store: self.clone(),
            handles,
        })
    }

    /// Runs every pending job on the calling thread; for tests and one-shot use.
    pub fn drain(&self, config: &Config, backbone: &mut dyn Backbone) {
        loop {
            let next = {
                let mut q = self.lock();
                q.pending.pop_front()
            };
            let Some(id) = next else { break };
            match self.transition(&id, JobState::Running, |j| j.started_at = Some(Utc::now())) {
                Ok(job) => self.run_one(job, config, backbone),
                Err(e) => log::error!("cannot start job {id}: {e}"),
            }
        }
    }
}

pub struct WorkerPool {
    store: JobStore,
    handles: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    /// Lets running jobs finish and stops the workers.
    pub fn shutdown(self) {
        self.store.lock().shutdown = true;
        self.store.inner.1.notify_all();
        for h in self.handles {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_machine() {
        use JobState::*;
        assert!(Queued.can_become(Running));
        assert!(Running.can_become(Done));
        assert!(Running.can_become(Failed));
        assert!(!Queued.can_become(Done));
        assert!(!Queued.can_become(Failed));
        assert!(!Done.can_become(Running));
        assert!(!Failed.can_become(Queued));
        assert_eq!(serde_json::to_string(&Queued).unwrap(), "\"queued\"");
    }
}
