//! Feedback providers: the synthetic oracle that ranks trajectories by their
//! ground-truth return, and the query queue a human labels through.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{GroundTruth, RenderedTrajectory, Trajectory};
use crate::reward_model::{Preference, PreferenceTuple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleLabel {
    Prefer0,
    Prefer1,
    /// Exactly equal returns; the pair is dropped and costs no budget.
    Abstain,
}

impl OracleLabel {
    pub fn preference(self) -> Option<Preference> {
        match self {
            OracleLabel::Prefer0 => Some(Preference::Prefer0),
            OracleLabel::Prefer1 => Some(Preference::Prefer1),
            OracleLabel::Abstain => None,
        }
    }
}

/// Noiseless labeling rule: the trajectory with the larger ground-truth
/// return is preferred.
pub fn synthetic_label(tau0: &Trajectory, tau1: &Trajectory) -> OracleLabel {
    let gt = GroundTruth::grant();
    let (r0, r1) = (tau0.true_return(&gt), tau1.true_return(&gt));
    if r0 > r1 {
        OracleLabel::Prefer0
    } else if r0 < r1 {
        OracleLabel::Prefer1
    } else {
        OracleLabel::Abstain
    }
}

/// Per-step ground-truth rewards. Only the true-reward baseline arm feeds
/// these to a learner.
pub fn ground_truth_rewards(trajectory: &Trajectory) -> Vec<f64> {
    let gt = GroundTruth::grant();
    trajectory
        .transitions()
        .iter()
        .map(|t| t.true_reward(&gt))
        .collect()
}

/// Synthetic oracle with an optional label-flip probability (default 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticOracle {
    flip_probability: f64,
    rng: ChaCha8Rng,
}

impl SyntheticOracle {
    pub fn new(flip_probability: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x0_5ac1e);
        Self {
            flip_probability,
            rng,
        }
    }

    pub fn label(&mut self, tau0: &Trajectory, tau1: &Trajectory) -> OracleLabel {
        let label = synthetic_label(tau0, tau1);
        if self.flip_probability > 0.0 && self.rng.random::<f64>() < self.flip_probability {
            return match label {
                OracleLabel::Prefer0 => OracleLabel::Prefer1,
                OracleLabel::Prefer1 => OracleLabel::Prefer0,
                OracleLabel::Abstain => OracleLabel::Abstain,
            };
        }
        label
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("query queue is full ({0} pending)")]
    Full(usize),
    #[error("unknown query id {0}")]
    UnknownId(u64),
    #[error("query {0} was already resolved")]
    AlreadyResolved(u64),
    #[error("feedback budget of {0} labels is exhausted")]
    BudgetExhausted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Pending,
    Labeled,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelChoice {
    Prefer0,
    Prefer1,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: u64,
    pub tau0: Arc<Trajectory>,
    pub tau1: Arc<Trajectory>,
    pub status: QueryStatus,
    pub label: Option<Preference>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub labeled_at: Option<u64>,
}

/// What the labeling UI receives for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPayload {
    pub id: u64,
    pub status: QueryStatus,
    pub created_at: u64,
    pub tau0: RenderedTrajectory,
    pub tau1: RenderedTrajectory,
}

impl QueryRecord {
    pub fn payload(&self) -> QueryPayload {
        QueryPayload {
            id: self.id,
            status: self.status,
            created_at: self.created_at,
            tau0: self.tau0.render(),
            tau1: self.tau1.render(),
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Queries waiting for a human. The trainer enqueues pairs and drains
/// accepted labels at session boundaries; the HTTP layer reads pending
/// queries and submits labels. The feedback budget is charged when a label
/// is accepted.
#[derive(Debug)]
pub struct QueryQueue {
    records: BTreeMap<u64, QueryRecord>,
    next_id: u64,
    capacity: usize,
    max_feedback: usize,
    labels_accepted: usize,
    undrained: Vec<PreferenceTuple>,
}

pub type SharedQueue = Arc<Mutex<QueryQueue>>;

impl QueryQueue {
    pub fn new(capacity: usize, max_feedback: usize) -> Self {
        Self {
            records: BTreeMap::new(),
            next_id: 1,
            capacity,
            max_feedback,
            labels_accepted: 0,
            undrained: Vec::new(),
        }
    }

    pub fn shared(capacity: usize, max_feedback: usize) -> SharedQueue {
        Arc::new(Mutex::new(Self::new(capacity, max_feedback)))
    }

    pub fn enqueue(&mut self, tau0: Arc<Trajectory>, tau1: Arc<Trajectory>) -> Result<u64, QueueError> {
        let pending = self.pending_count();
        if pending >= self.capacity {
            return Err(QueueError::Full(pending));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.records.insert(
            id,
            QueryRecord {
                id,
                tau0,
                tau1,
                status: QueryStatus::Pending,
                label: None,
                created_at: now_ms(),
                labeled_at: None,
            },
        );
        Ok(id)
    }

    pub fn get(&self, id: u64) -> Option<&QueryRecord> {
        self.records.get(&id)
    }

    /// Oldest pending query.
    pub fn next_pending(&self) -> Option<&QueryRecord> {
        self.records.values().find(|r| r.status == QueryStatus::Pending)
    }

    pub fn pending_count(&self) -> usize {
        self.records
            .values()
            .filter(|r| r.status == QueryStatus::Pending)
            .count()
    }

    pub fn feedback_used(&self) -> usize {
        self.labels_accepted
    }

    pub fn max_feedback(&self) -> usize {
        self.max_feedback
    }

    /// Resolves a pending query. A preference returns the new tuple (also
    /// held for the trainer's next drain); a skip returns `None`.
    pub fn submit_label(
        &mut self,
        id: u64,
        choice: LabelChoice,
    ) -> Result<Option<PreferenceTuple>, QueueError> {
        let budget_left = self.labels_accepted < self.max_feedback;
        let record = self.records.get_mut(&id).ok_or(QueueError::UnknownId(id))?;
        if record.status != QueryStatus::Pending {
            return Err(QueueError::AlreadyResolved(id));
        }
        let label = match choice {
            LabelChoice::Skip => {
                record.status = QueryStatus::Skipped;
                record.labeled_at = Some(now_ms());
                return Ok(None);
            }
            LabelChoice::Prefer0 => Preference::Prefer0,
            LabelChoice::Prefer1 => Preference::Prefer1,
        };
        if !budget_left {
            return Err(QueueError::BudgetExhausted(self.max_feedback));
        }
        record.status = QueryStatus::Labeled;
        record.label = Some(label);
        record.labeled_at = Some(now_ms());
        let tuple = PreferenceTuple::new(record.tau0.clone(), record.tau1.clone(), label);
        self.labels_accepted += 1;
        self.undrained.push(tuple.clone());
        Ok(Some(tuple))
    }

    /// Accepted labels not yet handed to the trainer, oldest first.
    pub fn drain_labeled(&mut self) -> Vec<PreferenceTuple> {
        std::mem::take(&mut self.undrained)
    }
}
