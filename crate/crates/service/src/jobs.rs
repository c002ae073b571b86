//! Stage jobs and their event logs. Every job ends with exactly one
//! terminal event; subscribers get the full history followed by live events.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::broadcast;

use scenestage::pipeline::{Phase, StepProgress};

use crate::error::ErrorBody;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JobEvent {
    Progress {
        stage: usize,
        phase: Phase,
        step: usize,
        total: usize,
        /// Steps finished so far across phases; never decreases.
        overall: usize,
    },
    Done {
        result: Value,
    },
    Failed {
        error: ErrorBody,
    },
}

impl JobEvent {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, JobEvent::Progress { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            JobEvent::Progress { .. } => "progress",
            JobEvent::Done { .. } => "done",
            JobEvent::Failed { .. } => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

struct Inner {
    status: JobStatus,
    events: Vec<JobEvent>,
}

pub struct Job {
    pub id: String,
    pub session_id: String,
    pub op: &'static str,
    inner: Mutex<Inner>,
    tx: broadcast::Sender<JobEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobView {
    pub id: String,
    pub session_id: String,
    pub op: String,
    pub status: JobStatus,
    pub events: Vec<JobEvent>,
}

impl Job {
    pub fn new(session_id: &str, op: &'static str) -> Self {
        let (tx, _) = broadcast::channel(256);
        Job {
            id: uuid::Uuid::new_v4().to_string(),
            session_id: session_id.to_string(),
            op,
            inner: Mutex::new(Inner {
                status: JobStatus::Queued,
                events: Vec::new(),
            }),
            tx,
        }
    }

    pub fn status(&self) -> JobStatus {
        self.inner.lock().unwrap().status
    }

    pub fn set_running(&self) {
        let mut g = self.inner.lock().unwrap();
        if g.status == JobStatus::Queued {
            g.status = JobStatus::Running;
        }
    }

    fn push(&self, ev: JobEvent) {
        let mut g = self.inner.lock().unwrap();
        if matches!(g.status, JobStatus::Done | JobStatus::Failed) {
            return;
        }
        match &ev {
            JobEvent::Done { .. } => g.status = JobStatus::Done,
            JobEvent::Failed { .. } => g.status = JobStatus::Failed,
            JobEvent::Progress { .. } => g.status = JobStatus::Running,
        }
        g.events.push(ev.clone());
        let _ = self.tx.send(ev);
    }

    pub fn progress(&self, p: StepProgress) {
        let overall = {
            let g = self.inner.lock().unwrap();
            g.events.len() + 1
        };
        self.push(JobEvent::Progress {
            stage: p.stage,
            phase: p.phase,
            step: p.step,
            total: p.total,
            overall,
        });
    }

    pub fn finish(&self, result: Value) {
        self.push(JobEvent::Done { result });
    }

    pub fn fail(&self, error: ErrorBody) {
        self.push(JobEvent::Failed { error });
    }

    /// Events so far plus a receiver for the rest, with no gap between them.
    pub fn subscribe(&self) -> (Vec<JobEvent>, broadcast::Receiver<JobEvent>) {
        let g = self.inner.lock().unwrap();
        (g.events.clone(), self.tx.subscribe())
    }

    pub fn view(&self) -> JobView {
        let g = self.inner.lock().unwrap();
        JobView {
            id: self.id.clone(),
            session_id: self.session_id.clone(),
            op: self.op.to_string(),
            status: g.status,
            events: g.events.clone(),
        }
    }

    /// Waits for the terminal event.
    pub async fn wait(&self) -> JobEvent {
        let (history, mut rx) = self.subscribe();
        if let Some(ev) = history.into_iter().find(JobEvent::is_terminal) {
            return ev;
        }
        loop {
            match rx.recv().await {
                Ok(ev) if ev.is_terminal() => return ev,
                Ok(_) => {}
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    if let Some(ev) = self.view().events.into_iter().find(JobEvent::is_terminal) {
                        return ev;
                    }
                }
                Err(broadcast::error::RecvError::Closed) => {
                    return self
                        .view()
                        .events
                        .into_iter()
                        .find(JobEvent::is_terminal)
                        .expect("job closed without a terminal event");
                }
            }
        }
    }
}
