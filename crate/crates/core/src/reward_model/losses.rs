//! Preference, triplet and action-distance losses with analytic gradients.
//!
//! Every loss runs through a [`Pass`]: distinct `(cell, action)` inputs are
//! evaluated once, loss terms accumulate `d loss / d reward` and
//! `d loss / d embedding` per distinct input, and a single backward sweep
//! at the end turns those into a parameter gradient. On a gridworld there
//! are at most `cells * actions` distinct inputs, so a batch of fifty-step
//! trajectories costs a few hundred network passes no matter its size.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ActionDistancePair, PreferenceTuple, RewardError, RewardModel};
use crate::approximator::ForwardTrace;
use crate::envs::{Action, Cell, Trajectory};

/// How the two distances inside the triplet hinge are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMode {
    /// Squared Euclidean distance for both the positive and negative term.
    #[default]
    SymmetricSquared,
    /// Squared distance to the positive, plain distance to the negative.
    LiteralEq3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub triplet: f64,
    pub action_distance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            triplet: 0.5,
            action_distance: 3.0,
        }
    }
}

/// Unweighted component values; `None` when a term was skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub triplet: Option<f64>,
    pub action_distance: Option<f64>,
}

/// One unlabeled anchor together with the labeled tuples it is compared to.
#[derive(Debug, Clone)]
pub struct TripletSample<'a> {
    pub anchor: &'a Trajectory,
    pub tuples: Vec<&'a PreferenceTuple>,
}

struct Pass<'m> {
    model: &'m RewardModel,
    slots: HashMap<(Cell, Action), usize>,
    traces: Vec<ForwardTrace>,
    rewards: Vec<f64>,
    reward_grads: Vec<f64>,
    embedding_grads: Vec<Option<Vec<f64>>>,
}

impl<'m> Pass<'m> {
    fn new(model: &'m RewardModel) -> Self {
        Self {
            model,
            slots: HashMap::new(),
            traces: Vec::new(),
            rewards: Vec::new(),
            reward_grads: Vec::new(),
            embedding_grads: Vec::new(),
        }
    }

    fn slot(&mut self, cell: Cell, action: Action) -> usize {
        if let Some(&s) = self.slots.get(&(cell, action)) {
            return s;
        }
        let (r, trace) = self.model.forward(cell, action);
        let s = self.traces.len();
        self.slots.insert((cell, action), s);
        self.traces.push(trace);
        self.rewards.push(r);
        self.reward_grads.push(0.0);
        self.embedding_grads.push(None);
        s
    }

    fn trajectory(&mut self, trajectory: &Trajectory) -> Vec<usize> {
        trajectory
            .transitions()
            .iter()
            .map(|t| self.slot(t.state, t.action))
            .collect()
    }

    fn sum(&self, slots: &[usize]) -> f64 {
        slots.iter().map(|&s| self.rewards[s]).sum()
    }

    fn embedding(&self, slot: usize) -> &[f64] {
        self.traces[slot].penultimate()
    }

    fn add_embedding_grad(&mut self, slot: usize, scale: f64, direction: &[f64]) {
        let g = self.embedding_grads[slot].get_or_insert_with(|| vec![0.0; direction.len()]);
        g.iter_mut().zip(direction).for_each(|(g, d)| *g += scale * d);
    }

    fn finish(self) -> Result<Vec<f64>, RewardError> {
        let model = self.model;
        let mut acc = vec![0.0; model.params().len()];
        let layer = model.embedding_layer();
        for (s, trace) in self.traces.iter().enumerate() {
            let out = [model.output_bound() * self.reward_grads[s]];
            match &self.embedding_grads[s] {
                Some(g) => {
                    model.architecture().backward_into(
                        model.params(),
                        trace,
                        &out,
                        &[(layer, g.as_slice())],
                        &mut acc,
                    )?;
                }
                None if out[0] != 0.0 => {
                    model
                        .architecture()
                        .backward_into(model.params(), trace, &out, &[], &mut acc)?;
                }
                None => {}
            }
        }
        Ok(acc)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sum of per-step rewards.
pub fn trajectory_return(model: &RewardModel, trajectory: &Trajectory) -> f64 {
    model.reward_vector(trajectory).iter().sum()
}

/// Bradley-Terry probability that `tau0` is preferred, a two-way softmax
/// over the trajectories' predicted returns.
pub fn preference_probability(model: &RewardModel, tau0: &Trajectory, tau1: &Trajectory) -> f64 {
    let mut pass = Pass::new(model);
    let (a, b) = (pass.trajectory(tau0), pass.trajectory(tau1));
    sigmoid(pass.sum(&a) - pass.sum(&b))
}

fn ce_term(pass: &mut Pass, batch: &[&PreferenceTuple], weight: f64) -> f64 {
    let scale = weight / batch.len() as f64;
    let mut total = 0.0;
    for tuple in batch {
        let s0 = pass.trajectory(&tuple.tau0);
        let s1 = pass.trajectory(&tuple.tau1);
        let margin = pass.sum(&s0) - pass.sum(&s1);
        // d loss / d return0; d loss / d return1 is its negation.
        let (loss, d0) = match tuple.label {
            super::Preference::Prefer0 => (softplus(-margin), -sigmoid(-margin)),
            super::Preference::Prefer1 => (softplus(margin), sigmoid(margin)),
        };
        total += loss;
        for &s in &s0 {
            pass.reward_grads[s] += scale * d0;
        }
        for &s in &s1 {
            pass.reward_grads[s] -= scale * d0;
        }
    }
    total / batch.len() as f64
}

fn triplet_term(
    pass: &mut Pass,
    samples: &[TripletSample],
    mode: TripletMode,
    margin: f64,
    weight: f64,
) -> Result<f64, RewardError> {
    let mut total = 0.0;
    for sample in samples {
        if sample.tuples.is_empty() {
            return Err(RewardError::EmptyBatch("triplet labeled"));
        }
        let anchor = pass.trajectory(sample.anchor);
        let scale = weight / (samples.len() * sample.tuples.len()) as f64;
        let mut anchor_total = 0.0;
        for tuple in &sample.tuples {
            let (good, bad) = tuple.ranked();
            let g = pass.trajectory(good);
            let b = pass.trajectory(bad);
            let to_good: Vec<f64> = anchor
                .iter()
                .zip(&g)
                .map(|(&a, &g)| pass.rewards[a] - pass.rewards[g])
                .collect();
            let to_bad: Vec<f64> = anchor
                .iter()
                .zip(&b)
                .map(|(&a, &b)| pass.rewards[a] - pass.rewards[b])
                .collect();
            let pos: f64 = to_good.iter().map(|d| d * d).sum();
            let neg_sq: f64 = to_bad.iter().map(|d| d * d).sum();
            let (neg, neg_grad_scale) = match mode {
                TripletMode::SymmetricSquared => (neg_sq, 2.0),
                TripletMode::LiteralEq3 => {
                    let n = neg_sq.sqrt();
                    // d|v|/dv = v/|v|; taken as 0 at v = 0.
                    (n, if n > 0.0 { 1.0 / n } else { 0.0 })
                }
            };
            let hinge = pos - neg + margin;
            if hinge <= 0.0 {
                continue;
            }
            anchor_total += hinge;
            for t in 0..anchor.len() {
                let dg = 2.0 * to_good[t];
                let db = neg_grad_scale * to_bad[t];
                pass.reward_grads[anchor[t]] += scale * (dg - db);
                pass.reward_grads[g[t]] -= scale * dg;
                pass.reward_grads[b[t]] += scale * db;
            }
        }
        total += anchor_total / sample.tuples.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn ad_term(pass: &mut Pass, pairs: &[ActionDistancePair], weight: f64) -> f64 {
    let scale = weight / pairs.len() as f64;
    let mut total = 0.0;
    for pair in pairs {
        let i = pass.slot(pair.s_i, pair.a_i);
        let j = pass.slot(pair.s_j, pair.a_j);
        let diff: Vec<f64> = pass
            .embedding(i)
            .iter()
            .zip(pass.embedding(j))
            .map(|(a, b)| a - b)
            .collect();
        let dist: f64 = diff.iter().map(|d| d * d).sum();
        let err = dist - pair.d_y;
        total += err * err;
        let g = scale * 4.0 * err;
        pass.add_embedding_grad(i, g, &diff);
        pass.add_embedding_grad(j, -g, &diff);
    }
    total / pairs.len() as f64
}

/// Mean Bradley-Terry cross-entropy over a batch of labeled pairs.
pub fn ce_loss(
    model: &RewardModel,
    batch: &[&PreferenceTuple],
) -> Result<(f64, Vec<f64>), RewardError> {
    if batch.is_empty() {
        return Err(RewardError::EmptyBatch("preference"));
    }
    let mut pass = Pass::new(model);
    let loss = ce_term(&mut pass, batch, 1.0);
    Ok((loss, pass.finish()?))
}

/// Mean over anchors of the mean hinge over each anchor's labeled tuples.
/// The anchor is pulled toward the preferred trajectory's reward vector and
/// pushed from the dis-preferred one.
pub fn triplet_loss(
    model: &RewardModel,
    samples: &[TripletSample],
    mode: TripletMode,
    margin: f64,
) -> Result<(f64, Vec<f64>), RewardError> {
    if samples.is_empty() {
        return Err(RewardError::EmptyBatch("triplet anchor"));
    }
    let mut pass = Pass::new(model);
    let loss = triplet_term(&mut pass, samples, mode, margin, 1.0)?;
    Ok((loss, pass.finish()?))
}

/// Mean squared error between squared embedding distance and step distance.
pub fn ad_loss(
    model: &RewardModel,
    pairs: &[ActionDistancePair],
) -> Result<(f64, Vec<f64>), RewardError> {
    if pairs.is_empty() {
        return Err(RewardError::EmptyBatch("action distance"));
    }
    let mut pass = Pass::new(model);
    let loss = ad_term(&mut pass, pairs, 1.0);
    Ok((loss, pass.finish()?))
}

/// Weighted sum of the three losses. Terms whose batch is empty or whose
/// weight is zero are skipped entirely.
pub fn combined_loss(
    model: &RewardModel,
    preferences: &[&PreferenceTuple],
    anchors: &[TripletSample],
    pairs: &[ActionDistancePair],
    weights: &LossWeights,
    mode: TripletMode,
    margin: f64,
) -> Result<(LossBreakdown, Vec<f64>), RewardError> {
    if preferences.is_empty() {
        return Err(RewardError::NoPreferences);
    }
    let mut pass = Pass::new(model);
    let ce = ce_term(&mut pass, preferences, weights.ce);
    let mut total = weights.ce * ce;
    let triplet = if weights.triplet != 0.0 && !anchors.is_empty() {
        let t = triplet_term(&mut pass, anchors, mode, margin, weights.triplet)?;
        total += weights.triplet * t;
        Some(t)
    } else {
        None
    };
    let action_distance = if weights.action_distance != 0.0 && !pairs.is_empty() {
        let a = ad_term(&mut pass, pairs, weights.action_distance);
        total += weights.action_distance * a;
        Some(a)
    } else {
        None
    };
    Ok((
        LossBreakdown {
            total,
            ce,
            triplet,
            action_distance,
        },
        pass.finish()?,
    ))
}
