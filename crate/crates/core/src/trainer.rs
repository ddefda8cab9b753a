//! The preference-learning outer loop.
//!
//! A run alternates between collecting fixed-length trajectories into the
//! bank and feedback sessions. Each session asks for labels on sampled
//! trajectory pairs, fits the reward model on the weighted sum of the
//! preference, triplet and action-distance losses, relabels the bank, and
//! evaluates the greedy policy against the ground-truth reward.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentError, SoftQConfig, SoftQPolicy, TrajectoryBank};
use crate::approximator::{self, ApproxError, Optimizer, OptimizerConfig};
use crate::envs::{rollout, Action, EnvError, GridWorld, GridWorldConfig, Trajectory, DEFAULT_SEGMENT_LENGTH};
use crate::eval::{compute_reward_spearman, evaluate_policy};
use crate::metrics::MetricsRow;
use crate::oracle::{ground_truth_rewards, QueueError, SharedQueue, SyntheticOracle};
use crate::reward_model::{
    combined_loss, ensemble_reward, preference_probability, ActionDistancePair, LossWeights,
    PreferenceDataset, PreferenceTuple, RewardError, RewardModel, RewardModelConfig, TripletMode,
    TripletSample,
};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("bank holds {have} trajectories, need at least {need}")]
    BankTooSmall { have: usize, need: usize },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite reward loss in session {session}, epoch {epoch}: {value}")]
    NonFiniteLoss { session: u64, epoch: usize, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<std::io::Error> for TrainerError {
    fn from(e: std::io::Error) -> Self {
        TrainerError::Checkpoint(e.to_string())
    }
}

impl From<approximator::CheckpointError> for TrainerError {
    fn from(e: approximator::CheckpointError) -> Self {
        TrainerError::Checkpoint(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySampler {
    #[default]
    Uniform,
    /// Highest ensemble disagreement among `10 n` uniform candidates.
    Disagreement,
}

/// Where the policy's rewards come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    #[default]
    Learned,
    /// Upper baseline: the environment reward, no feedback at all.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub segment_length: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub steps_between_sessions: u64,
    pub max_feedback: usize,
    pub queries_per_session: usize,
    pub reward_update_epochs: usize,
    pub reward_batch_size: usize,
    pub anchors_per_epoch: usize,
    pub triplet_tuples_per_anchor: usize,
    pub k_window: usize,
    pub pairs_per_trajectory: usize,
    pub weights: LossWeights,
    pub margin: f64,
    pub triplet_mode: TripletMode,
    pub sampler: QuerySampler,
    pub ensemble_size: usize,
    pub bank_capacity: usize,
    pub replay_updates_per_step: usize,
    pub eval_episodes: usize,
    pub spearman_sample_size: usize,
    pub spearman_recent: usize,
    pub oracle_flip_probability: f64,
    pub query_queue_capacity: usize,
    pub reward_source: RewardSource,
    pub policy: SoftQConfig,
    pub reward_model: RewardModelConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            segment_length: DEFAULT_SEGMENT_LENGTH,
            total_steps: 50_000,
            warmup_steps: 5_000,
            steps_between_sessions: 500,
            max_feedback: 200,
            queries_per_session: 10,
            reward_update_epochs: 5,
            reward_batch_size: 32,
            anchors_per_epoch: 32,
            triplet_tuples_per_anchor: 16,
            k_window: 10,
            pairs_per_trajectory: 20,
            weights: LossWeights::default(),
            margin: 1.0,
            triplet_mode: TripletMode::SymmetricSquared,
            sampler: QuerySampler::Uniform,
            ensemble_size: 3,
            bank_capacity: 2_000,
            replay_updates_per_step: 1,
            eval_episodes: 20,
            spearman_sample_size: 1_000,
            spearman_recent: 100,
            oracle_flip_probability: 0.0,
            query_queue_capacity: 32,
            reward_source: RewardSource::Learned,
            policy: SoftQConfig::default(),
            reward_model: RewardModelConfig::default(),
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..OptimizerConfig::default()
            },
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let positive = [
            ("segment_length", self.segment_length),
            ("queries_per_session", self.queries_per_session),
            ("reward_update_epochs", self.reward_update_epochs),
            ("reward_batch_size", self.reward_batch_size),
            ("anchors_per_epoch", self.anchors_per_epoch),
            ("triplet_tuples_per_anchor", self.triplet_tuples_per_anchor),
            ("k_window", self.k_window),
            ("pairs_per_trajectory", self.pairs_per_trajectory),
            ("ensemble_size", self.ensemble_size),
            ("bank_capacity", self.bank_capacity),
            ("query_queue_capacity", self.query_queue_capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainerError::Config(format!("{name} must be positive")));
            }
        }
        if self.steps_between_sessions == 0 || self.total_steps == 0 {
            return Err(TrainerError::Config(
                "total_steps and steps_between_sessions must be positive".into(),
            ));
        }
        let w = &self.weights;
        for (name, v) in [("ce", w.ce), ("triplet", w.triplet), ("action_distance", w.action_distance)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainerError::Config(format!("weight {name} must be finite and >= 0")));
            }
        }
        if !self.margin.is_finite() {
            return Err(TrainerError::Config("margin must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.oracle_flip_probability) {
            return Err(TrainerError::Config("oracle_flip_probability must be in [0, 1]".into()));
        }
        let p = &self.policy;
        if !(p.gamma > 0.0 && p.gamma < 1.0) {
            return Err(TrainerError::Config("policy.gamma must be in (0, 1)".into()));
        }
        if !(p.temperature_start > 0.0 && p.temperature_end > 0.0) {
            return Err(TrainerError::Config("policy temperatures must be positive".into()));
        }
        if !(p.learning_rate >= 0.0) {
            return Err(TrainerError::Config("policy.learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Independent random streams so that enabling or disabling one loss term
/// never shifts the draws of another.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngStreams {
    pub collect: ChaCha8Rng,
    pub policy: ChaCha8Rng,
    pub query: ChaCha8Rng,
    pub minibatch: ChaCha8Rng,
    pub anchor: ChaCha8Rng,
    pub action_distance: ChaCha8Rng,
    pub eval: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        Self {
            collect: stream(1),
            policy: stream(2),
            query: stream(3),
            minibatch: stream(4),
            anchor: stream(5),
            action_distance: stream(6),
            eval: stream(7),
        }
    }
}

/// Samples `pairs_per_trajectory` index pairs `i < j` from each of the
/// `k_window` most recent bank trajectories; `d_y = j - i`.
pub fn build_dp<R: Rng + ?Sized>(
    bank: &TrajectoryBank,
    k_window: usize,
    pairs_per_trajectory: usize,
    rng: &mut R,
) -> Vec<ActionDistancePair> {
    let mut pairs = Vec::new();
    for entry in bank.last_k(k_window) {
        let traj = &entry.trajectory;
        if traj.len() < 2 {
            continue;
        }
        for _ in 0..pairs_per_trajectory {
            let picked = index::sample(rng, traj.len(), 2);
            let (a, b) = (picked.index(0), picked.index(1));
            pairs.push(ActionDistancePair::from_trajectory(traj, a.min(b), a.max(b)));
        }
    }
    pairs
}

pub type QueryPair = (Arc<Trajectory>, Arc<Trajectory>);

fn pair_key(a: &Trajectory, b: &Trajectory) -> (u64, u64) {
    (a.id.min(b.id), a.id.max(b.id))
}

fn distinct_pairs<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let total = len * (len - 1) / 2;
    let n = n.min(total);
    if total <= 4 * n {
        let mut all: Vec<(usize, usize)> =
            (0..len).flat_map(|i| (i + 1..len).map(move |j| (i, j))).collect();
        all.shuffle(rng);
        all.truncate(n);
        return all;
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let picked = index::sample(rng, len, 2);
        let (a, b) = (picked.index(0), picked.index(1));
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            out.push(key);
        }
    }
    out
}

/// Pairs of distinct bank trajectories to show the labeler. The bank must
/// hold at least two trajectories; with fewer than `n` possible pairs all of
/// them are returned.
pub fn sample_queries<R: Rng + ?Sized>(
    bank: &TrajectoryBank,
    n: usize,
    sampler: QuerySampler,
    models: &[RewardModel],
    rng: &mut R,
) -> Result<Vec<QueryPair>, TrainerError> {
    if bank.len() < 2 {
        return Err(TrainerError::BankTooSmall {
            have: bank.len(),
            need: 2,
        });
    }
    let traj = |i: usize| bank.get(i).expect("index in range").trajectory.clone();
    let chosen = match sampler {
        QuerySampler::Uniform => distinct_pairs(bank.len(), n, rng),
        QuerySampler::Disagreement => {
            let candidates = distinct_pairs(bank.len(), n.saturating_mul(10), rng);
            let spread: Vec<f64> = candidates
                .iter()
                .map(|&(a, b)| {
                    let (ta, tb) = (traj(a), traj(b));
                    let probs: Vec<f64> = models
                        .iter()
                        .map(|m| preference_probability(m, &ta, &tb))
                        .collect();
                    std_dev(&probs)
                })
                .collect();
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            // Stable: equal spreads keep candidate order.
            order.sort_by(|&x, &y| spread[y].total_cmp(&spread[x]));
            order.into_iter().take(n).map(|i| candidates[i]).collect()
        }
    };
    // Random presentation order, so the first slot carries no position bias.
    Ok(chosen
        .into_iter()
        .map(|(a, b)| if rng.random_bool(0.5) { (traj(b), traj(a)) } else { (traj(a), traj(b)) })
        .collect())
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Shuffled minibatches of `0..n`.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Per-epoch means of the unweighted loss components (first ensemble
/// member). `None` marks a term that did not run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub ce: f64,
    pub triplet: Option<f64>,
    pub action_distance: Option<f64>,
}

/// Everything a reward update needs besides the models.
pub struct RewardUpdateContext<'a> {
    pub dataset: &'a PreferenceDataset,
    pub bank: &'a TrajectoryBank,
    /// Trajectories that have been shown to the labeler; never anchors.
    pub queried: &'a HashSet<u64>,
    pub config: &'a TrainerConfig,
    pub session: u64,
}

/// Fits every ensemble member for `reward_update_epochs` epochs over the
/// labeled dataset, one optimizer step per minibatch.
pub fn reward_update_session(
    models: &mut [RewardModel],
    optimizers: &mut [Optimizer],
    ctx: &RewardUpdateContext,
    rngs: &mut RngStreams,
) -> Result<Vec<EpochLosses>, TrainerError> {
    let config = ctx.config;
    let tuples = ctx.dataset.tuples();
    if tuples.is_empty() {
        return Err(RewardError::NoPreferences.into());
    }
    let w = config.weights;
    let pairs = if w.action_distance > 0.0 {
        build_dp(
            ctx.bank,
            config.k_window,
            config.pairs_per_trajectory,
            &mut rngs.action_distance,
        )
    } else {
        Vec::new()
    };
    let anchor_pool: Vec<&Trajectory> = if w.triplet > 0.0 {
        ctx.bank
            .iter()
            .map(|e| e.trajectory.as_ref())
            .filter(|t| !ctx.queried.contains(&t.id))
            .collect()
    } else {
        Vec::new()
    };

    let mut history = Vec::with_capacity(config.reward_update_epochs);
    for epoch in 0..config.reward_update_epochs {
        let mut first_member = None;
        for (m, (model, opt)) in models.iter_mut().zip(optimizers.iter_mut()).enumerate() {
            let batches = minibatches(tuples.len(), config.reward_batch_size, &mut rngs.minibatch);
            let mut anchors: Vec<Vec<TripletSample>> = vec![Vec::new(); batches.len()];
            if !anchor_pool.is_empty() {
                let per_anchor = tuples.len().min(config.triplet_tuples_per_anchor);
                for a in 0..config.anchors_per_epoch {
                    let anchor = anchor_pool[rngs.anchor.random_range(0..anchor_pool.len())];
                    let picked = index::sample(&mut rngs.anchor, tuples.len(), per_anchor);
                    anchors[a % batches.len()].push(TripletSample {
                        anchor,
                        tuples: picked.iter().map(|i| &tuples[i]).collect(),
                    });
                }
            }
            let (mut ce, mut tr, mut ad) = (0.0, None::<f64>, None::<f64>);
            for (batch, batch_anchors) in batches.iter().zip(&anchors) {
                let prefs: Vec<&PreferenceTuple> = batch.iter().map(|&i| &tuples[i]).collect();
                let (parts, grad) = combined_loss(
                    model,
                    &prefs,
                    batch_anchors,
                    &pairs,
                    &w,
                    config.triplet_mode,
                    config.margin,
                )?;
                if !parts.total.is_finite() {
                    return Err(TrainerError::NonFiniteLoss {
                        session: ctx.session,
                        epoch,
                        value: parts.total,
                    });
                }
                opt.step(model.params_mut(), &grad)?;
                ce += parts.ce;
                if let Some(t) = parts.triplet {
                    *tr.get_or_insert(0.0) += t;
                }
                if let Some(a) = parts.action_distance {
                    *ad.get_or_insert(0.0) += a;
                }
            }
            if m == 0 {
                let nb = batches.len() as f64;
                first_member = Some(EpochLosses {
                    ce: ce / nb,
                    triplet: tr.map(|t| t / nb),
                    action_distance: ad.map(|a| a / nb),
                });
            }
        }
        history.push(first_member.expect("ensemble is non-empty"));
    }
    Ok(history)
}

/// Source of labels for a run.
pub enum Feedback<'a> {
    /// Labels from ground-truth returns, available immediately.
    Synthetic,
    /// Labels from people through the shared query queue, picked up at the
    /// next session boundary.
    Human(&'a SharedQueue),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trainer {
    run_id: String,
    seed: u64,
    config: TrainerConfig,
    env: GridWorld,
    eval_env: GridWorld,
    models: Vec<RewardModel>,
    optimizers: Vec<Optimizer>,
    policy: SoftQPolicy,
    bank: TrajectoryBank,
    dataset: PreferenceDataset,
    queried: HashSet<u64>,
    /// Every pair ever shown to a labeler, as `(min id, max id)`. A pair is
    /// never asked twice, abstained or not.
    asked: BTreeSet<(u64, u64)>,
    oracle: SyntheticOracle,
    rngs: RngStreams,
    global_step: u64,
    session: u64,
    next_trajectory_id: u64,
    warmed_up: bool,
    last_losses: Option<EpochLosses>,
    metrics: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(
        run_id: impl Into<String>,
        env_config: GridWorldConfig,
        config: TrainerConfig,
        seed: u64,
    ) -> Result<Self, TrainerError> {
        config.validate()?;
        env_config.validate(config.segment_length)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        init_rng.set_stream(0);
        let models = (0..config.ensemble_size)
            .map(|_| RewardModel::new(&config.reward_model, &env_config, &mut init_rng))
            .collect::<Result<Vec<_>, _>>()?;
        let optimizers = models
            .iter()
            .map(|m| Optimizer::new(config.optimizer, m.params().len()))
            .collect();
        Ok(Self {
            run_id: run_id.into(),
            seed,
            env: GridWorld::new(env_config.clone(), seed.wrapping_mul(2).wrapping_add(1))?,
            eval_env: GridWorld::new(env_config.clone(), seed.wrapping_mul(2).wrapping_add(2))?,
            policy: SoftQPolicy::new(&env_config, &config.policy),
            bank: TrajectoryBank::new(config.bank_capacity),
            dataset: PreferenceDataset::new(config.max_feedback),
            queried: HashSet::new(),
            asked: BTreeSet::new(),
            oracle: SyntheticOracle::new(config.oracle_flip_probability, seed),
            rngs: RngStreams::new(seed),
            models,
            optimizers,
            config,
            global_step: 0,
            session: 0,
            next_trajectory_id: 0,
            warmed_up: false,
            last_losses: None,
            metrics: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn env_config(&self) -> &GridWorldConfig {
        self.env.config()
    }

    pub fn models(&self) -> &[RewardModel] {
        &self.models
    }

    pub fn policy(&self) -> &SoftQPolicy {
        &self.policy
    }

    pub fn bank(&self) -> &TrajectoryBank {
        &self.bank
    }

    pub fn dataset(&self) -> &PreferenceDataset {
        &self.dataset
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn session(&self) -> u64 {
        self.session
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn is_finished(&self) -> bool {
        self.global_step >= self.config.total_steps
    }

    fn learner_rewards(&self, trajectory: &Trajectory) -> Vec<f64> {
        match self.config.reward_source {
            RewardSource::GroundTruth => ground_truth_rewards(trajectory),
            RewardSource::Learned => trajectory
                .transitions()
                .iter()
                .map(|t| ensemble_reward(&self.models, t.state, t.action))
                .collect(),
        }
    }

    fn temperature(&self) -> f64 {
        let p = &self.config.policy;
        let frac = (self.global_step as f64 / self.config.total_steps as f64).min(1.0);
        p.temperature_start + (p.temperature_end - p.temperature_start) * frac
    }

    fn collect_trajectory(&mut self, random_policy: bool) -> Result<(), TrainerError> {
        let h = self.config.segment_length;
        let id = self.next_trajectory_id;
        self.next_trajectory_id += 1;
        self.policy.temperature = self.temperature();
        let policy = &self.policy;
        let rng = &mut self.rngs.collect;
        let traj = rollout(
            &mut self.env,
            |s| {
                if random_policy {
                    Action::ALL[rng.random_range(0..Action::COUNT)]
                } else {
                    policy.act(s, rng)
                }
            },
            h,
            id,
            self.global_step,
        );
        self.global_step += h as u64;
        let rewards = self.learner_rewards(&traj);
        self.bank.push(Arc::new(traj), rewards);
        if !random_policy {
            let entry = self.bank.get(self.bank.len() - 1).expect("just pushed");
            let fresh: Vec<_> = (0..h).map(|t| entry.learner_transition(t)).collect();
            self.policy.update(&fresh)?;
            let replay = self.config.replay_updates_per_step * h;
            let mut batch = Vec::with_capacity(replay);
            for _ in 0..replay {
                batch.extend(self.bank.sample_transition(&mut self.rngs.policy));
            }
            self.policy.update(&batch)?;
        }
        Ok(())
    }

    fn feedback_used(&self, feedback: &Feedback) -> usize {
        match feedback {
            Feedback::Synthetic => self.dataset.len(),
            Feedback::Human(queue) => queue.lock().expect("queue lock").feedback_used(),
        }
    }

    fn gather_labels(&mut self, feedback: &Feedback) -> Result<(), TrainerError> {
        if self.config.reward_source == RewardSource::GroundTruth {
            return Ok(());
        }
        match feedback {
            Feedback::Synthetic => {
                if self.dataset.remaining() == 0 || self.bank.len() < 2 {
                    return Ok(());
                }
                let pairs = sample_queries(
                    &self.bank,
                    self.config.queries_per_session,
                    self.config.sampler,
                    &self.models,
                    &mut self.rngs.query,
                )?;
                for (a, b) in pairs {
                    if self.dataset.remaining() == 0 {
                        break;
                    }
                    if !self.asked.insert(pair_key(&a, &b)) {
                        continue;
                    }
                    self.queried.insert(a.id);
                    self.queried.insert(b.id);
                    if let Some(label) = self.oracle.label(&a, &b).preference() {
                        self.dataset.push(PreferenceTuple::new(a, b, label))?;
                    }
                }
            }
            Feedback::Human(queue) => {
                let mut q = queue.lock().expect("queue lock");
                for tuple in q.drain_labeled() {
                    self.dataset.push(tuple)?;
                }
                if q.feedback_used() >= self.config.max_feedback || self.bank.len() < 2 {
                    return Ok(());
                }
                let pairs = sample_queries(
                    &self.bank,
                    self.config.queries_per_session,
                    self.config.sampler,
                    &self.models,
                    &mut self.rngs.query,
                )?;
                for (a, b) in pairs {
                    let key = pair_key(&a, &b);
                    if self.asked.contains(&key) {
                        continue;
                    }
                    let (ia, ib) = (a.id, b.id);
                    match q.enqueue(a, b) {
                        Ok(_) => {
                            self.asked.insert(key);
                            self.queried.insert(ia);
                            self.queried.insert(ib);
                        }
                        // Backpressure: try again next session.
                        Err(QueueError::Full(_)) => break,
                        Err(e) => unreachable!("enqueue only fails when full: {e}"),
                    }
                }
            }
        }
        Ok(())
    }

    fn update_reward(&mut self) -> Result<(), TrainerError> {
        if self.config.reward_source == RewardSource::GroundTruth || self.dataset.is_empty() {
            return Ok(());
        }
        let ctx = RewardUpdateContext {
            dataset: &self.dataset,
            bank: &self.bank,
            queried: &self.queried,
            config: &self.config,
            session: self.session,
        };
        let history = reward_update_session(&mut self.models, &mut self.optimizers, &ctx, &mut self.rngs)?;
        self.last_losses = history.last().copied();
        self.bank.relabel(&self.models);
        Ok(())
    }

    fn evaluate(&mut self, feedback: &Feedback) -> MetricsRow {
        let stats = evaluate_policy(
            &self.policy,
            &mut self.eval_env,
            self.config.eval_episodes,
            self.config.segment_length,
        );
        let spearman = match self.config.reward_source {
            RewardSource::Learned => compute_reward_spearman(
                &self.models,
                &self.bank,
                self.config.spearman_recent,
                self.config.spearman_sample_size,
                &mut self.rngs.eval,
            )
            .value,
            // The learner's reward is the ground truth itself.
            RewardSource::GroundTruth => 1.0,
        };
        MetricsRow {
            run_id: self.run_id.clone(),
            seed: self.seed,
            global_step: self.global_step,
            feedback_used: self.feedback_used(feedback) as u64,
            eval_true_return: stats.mean_return,
            eval_success_rate: stats.success_rate,
            reward_spearman: spearman,
            loss_ce: self.last_losses.map(|l| l.ce),
            loss_t: self.last_losses.and_then(|l| l.triplet),
            loss_a: self.last_losses.and_then(|l| l.action_distance),
        }
    }

    /// Collects one session's worth of steps (after the warmup on the first
    /// call), then labels, updates, relabels and evaluates.
    pub fn run_session(&mut self, feedback: &Feedback) -> Result<MetricsRow, TrainerError> {
        if !self.warmed_up {
            while self.global_step < self.config.warmup_steps {
                self.collect_trajectory(true)?;
            }
            self.warmed_up = true;
        }
        let target = (self.global_step + self.config.steps_between_sessions).min(self.config.total_steps);
        while self.global_step < target {
            self.collect_trajectory(false)?;
        }
        self.session += 1;
        self.gather_labels(feedback)?;
        self.update_reward()?;
        let row = self.evaluate(feedback);
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// Runs sessions until `total_steps`, handing each metrics row to `sink`.
    pub fn run<F>(&mut self, feedback: &Feedback, mut sink: F) -> Result<(), TrainerError>
    where
        F: FnMut(&MetricsRow) -> Result<(), TrainerError>,
    {
        while !self.is_finished() {
            let row = self.run_session(feedback)?;
            sink(&row)?;
        }
        Ok(())
    }

    /// Writes the reward models, policy table, labeled dataset and full
    /// resumable state into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), TrainerError> {
        fs::create_dir_all(dir)?;
        for (i, m) in self.models.iter().enumerate() {
            approximator::save_checkpoint(&dir.join(format!("reward_model_{i}")), m.architecture(), m.params())?;
        }
        let json = |v: &dyn erased::Json| v.to_json();
        fs::write(dir.join("policy.json"), json(&self.policy)?)?;
        fs::write(dir.join("preferences.json"), json(&self.dataset)?)?;
        fs::write(dir.join("trainer_state.json"), json(self)?)?;
        Ok(())
    }

    pub fn resume(dir: &Path) -> Result<Self, TrainerError> {
        let bytes = fs::read(dir.join("trainer_state.json"))?;
        serde_json::from_slice(&bytes).map_err(|e| TrainerError::Checkpoint(e.to_string()))
    }
}

mod erased {
    use super::TrainerError;

    pub trait Json {
        fn to_json(&self) -> Result<String, TrainerError>;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> Result<String, TrainerError> {
            serde_json::to_string(self).map_err(|e| TrainerError::Checkpoint(e.to_string()))
        }
    }
}
