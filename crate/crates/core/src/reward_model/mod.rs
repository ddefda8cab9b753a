//! The learned reward function, its embedding head, and the datasets the
//! reward losses consume.
//!
//! A reward model maps a `(cell, action)` pair, encoded as the normalized
//! cell coordinates followed by a one-hot action, to a scalar in
//! `[-output_bound, output_bound]`. The activation of the second-to-last
//! layer of the same forward pass is the embedding used by the
//! action-distance loss.

mod losses;

pub use losses::{
    ad_loss, ce_loss, combined_loss, preference_probability, trajectory_return, triplet_loss,
    LossBreakdown, LossWeights, TripletMode, TripletSample,
};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{ApproxError, Architecture, ForwardTrace, Nonlinearity, ParamVector};
use crate::envs::{Action, Cell, GridWorldConfig, Trajectory};

/// Width of the encoded reward input: two coordinates plus a one-hot action.
pub const INPUT_WIDTH: usize = 2 + Action::COUNT;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error("{0} batch is empty")]
    EmptyBatch(&'static str),
    #[error("combined loss needs at least one preference tuple")]
    NoPreferences,
    #[error("preference dataset is full ({0} tuples)")]
    DatasetFull(usize),
    #[error("invalid reward model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardModelConfig {
    pub hidden_widths: Vec<usize>,
    pub hidden_nonlinearity: Nonlinearity,
    pub output_bound: f64,
    /// Start the final layer at zero, so the untrained reward is 0
    /// everywhere instead of a random function the policy would chase.
    pub zero_output_layer: bool,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![64, 64],
            hidden_nonlinearity: Nonlinearity::Tanh,
            output_bound: 1.0,
            zero_output_layer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    arch: Architecture,
    params: ParamVector,
    output_bound: f64,
    grid_width: usize,
    grid_height: usize,
}

impl RewardModel {
    pub fn new<R: Rng + ?Sized>(
        config: &RewardModelConfig,
        grid: &GridWorldConfig,
        rng: &mut R,
    ) -> Result<Self, RewardError> {
        let arch = Architecture::mlp(
            INPUT_WIDTH,
            &config.hidden_widths,
            config.hidden_nonlinearity,
            1,
            Nonlinearity::Tanh,
        )?;
        let mut params = arch.init_params(rng);
        if config.zero_output_layer {
            let (w_off, _) = arch.layer_offsets(arch.layers().len() - 1);
            params.as_mut_slice()[w_off..].fill(0.0);
        }
        Self::from_parts(arch, params, config.output_bound, grid)
    }

    pub fn from_parts(
        arch: Architecture,
        params: ParamVector,
        output_bound: f64,
        grid: &GridWorldConfig,
    ) -> Result<Self, RewardError> {
        if arch.input_width() != INPUT_WIDTH {
            return Err(ApproxError::Dimension {
                context: "reward model input",
                expected: INPUT_WIDTH,
                actual: arch.input_width(),
            }
            .into());
        }
        if arch.output_width() != 1 {
            return Err(RewardError::InvalidModel("final layer must have width 1".into()));
        }
        let layers = arch.layers();
        if layers.len() < 2 || layers[layers.len() - 2].output_width < 2 {
            return Err(RewardError::InvalidModel(
                "penultimate layer must have width >= 2".into(),
            ));
        }
        if params.len() != arch.param_count() {
            return Err(ApproxError::Dimension {
                context: "reward model parameters",
                expected: arch.param_count(),
                actual: params.len(),
            }
            .into());
        }
        if !(output_bound > 0.0) {
            return Err(RewardError::InvalidModel("output_bound must be positive".into()));
        }
        Ok(Self {
            arch,
            params,
            output_bound,
            grid_width: grid.width,
            grid_height: grid.height,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn output_bound(&self) -> f64 {
        self.output_bound
    }

    pub fn embedding_width(&self) -> usize {
        let layers = self.arch.layers();
        layers[layers.len() - 2].output_width
    }

    /// Layer index whose activation is the embedding.
    pub(crate) fn embedding_layer(&self) -> usize {
        self.arch.layers().len() - 2
    }

    pub fn encode(&self, cell: Cell, action: Action) -> [f64; INPUT_WIDTH] {
        let mut x = [0.0; INPUT_WIDTH];
        x[0] = cell.x as f64 / self.grid_width as f64;
        x[1] = cell.y as f64 / self.grid_height as f64;
        x[2 + action.index()] = 1.0;
        x
    }

    /// Reward and trace for an already-encoded input.
    pub fn forward_encoded(&self, input: &[f64]) -> Result<(f64, ForwardTrace), RewardError> {
        let (out, trace) = self.arch.forward(&self.params, input)?;
        Ok((self.output_bound * out[0], trace))
    }

    pub fn forward(&self, cell: Cell, action: Action) -> (f64, ForwardTrace) {
        self.forward_encoded(&self.encode(cell, action))
            .expect("encoded width matches the architecture")
    }

    pub fn reward(&self, cell: Cell, action: Action) -> f64 {
        self.forward(cell, action).0
    }

    /// Per-step rewards of a trajectory.
    pub fn reward_vector(&self, trajectory: &Trajectory) -> Vec<f64> {
        trajectory
            .transitions()
            .iter()
            .map(|t| self.reward(t.state, t.action))
            .collect()
    }

    /// Penultimate activation of the forward pass behind [`Self::reward`].
    pub fn embed(&self, cell: Cell, action: Action) -> Vec<f64> {
        self.forward(cell, action).1.penultimate().to_vec()
    }
}

/// Mean reward of an ensemble, the value the learner sees.
pub fn ensemble_reward(models: &[RewardModel], cell: Cell, action: Action) -> f64 {
    match models {
        [single] => single.reward(cell, action),
        _ => models.iter().map(|m| m.reward(cell, action)).sum::<f64>() / models.len() as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    Prefer0,
    Prefer1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub tau0: Arc<Trajectory>,
    pub tau1: Arc<Trajectory>,
    pub label: Preference,
}

impl PreferenceTuple {
    pub fn new(tau0: Arc<Trajectory>, tau1: Arc<Trajectory>, label: Preference) -> Self {
        Self { tau0, tau1, label }
    }

    /// `(preferred, dis-preferred)`.
    pub fn ranked(&self) -> (&Trajectory, &Trajectory) {
        match self.label {
            Preference::Prefer0 => (&self.tau0, &self.tau1),
            Preference::Prefer1 => (&self.tau1, &self.tau0),
        }
    }
}

/// Append-only labeled dataset with a hard size cap (the feedback budget).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    tuples: Vec<PreferenceTuple>,
    capacity: usize,
}

impl PreferenceDataset {
    pub fn new(capacity: usize) -> Self {
        Self {
            tuples: Vec::new(),
            capacity,
        }
    }

    pub fn push(&mut self, tuple: PreferenceTuple) -> Result<(), RewardError> {
        if self.tuples.len() >= self.capacity {
            return Err(RewardError::DatasetFull(self.capacity));
        }
        self.tuples.push(tuple);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.tuples.len()
    }

    pub fn tuples(&self) -> &[PreferenceTuple] {
        &self.tuples
    }
}

/// Two states from one trajectory, `d_y = j - i` steps apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionDistancePair {
    pub s_i: Cell,
    pub a_i: Action,
    pub s_j: Cell,
    pub a_j: Action,
    pub d_y: f64,
    pub source: u64,
    pub i: usize,
    pub j: usize,
}

impl ActionDistancePair {
    pub fn from_trajectory(trajectory: &Trajectory, i: usize, j: usize) -> Self {
        assert!(j > i && j < trajectory.len(), "need i < j < len");
        let (a, b) = (&trajectory.transitions()[i], &trajectory.transitions()[j]);
        Self {
            s_i: a.state,
            a_i: a.action,
            s_j: b.state,
            a_j: b.action,
            d_y: (j - i) as f64,
            source: trajectory.id,
            i,
            j,
        }
    }
}
