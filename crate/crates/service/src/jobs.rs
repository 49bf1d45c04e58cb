//! Background evaluation jobs, polled by id.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use modalgate_core::eval::{run_eval, EvalJob, EvalReport};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobState {
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("job {0:?} already exists")]
pub struct DuplicateJob(pub String);

#[derive(Debug, Default, Clone)]
pub struct JobRegistry {
    jobs: Arc<Mutex<HashMap<String, JobState>>>,
}

impl JobRegistry {
    /// Registers `id` and runs the job on the tokio runtime.
    pub fn submit(&self, id: &str, job: EvalJob) -> Result<(), DuplicateJob> {
        {
            let mut jobs = self.jobs.lock().expect("lock poisoned");
            if jobs.contains_key(id) {
                return Err(DuplicateJob(id.to_string()));
            }
            jobs.insert(
                id.to_string(),
                JobState {
                    status: JobStatus::Running,
                    report: None,
                    error: None,
                },
            );
        }
        let jobs = self.jobs.clone();
        let id = id.to_string();
        tokio::spawn(async move {
            let state = match run_eval(&job).await {
                Ok(out) => JobState {
                    status: JobStatus::Done,
                    report: Some(out.report),
                    error: None,
                },
                Err(e) => {
                    tracing::warn!(job = %id, error = %e, "evaluation job failed");
                    JobState {
                        status: JobStatus::Failed,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            jobs.lock().expect("lock poisoned").insert(id, state);
        });
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.jobs.lock().expect("lock poisoned").contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<JobState> {
        self.jobs.lock().expect("lock poisoned").get(id).cloned()
    }
}
