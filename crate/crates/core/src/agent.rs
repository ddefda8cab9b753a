//! Tabular soft Q-learning policy and the trajectory bank it replays from.
//!
//! The learner never sees ground-truth rewards: bank entries carry their own
//! learner-facing reward vector, written by [`TrajectoryBank::relabel`] from
//! the current reward model.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Action, Cell, GridWorldConfig, Trajectory};
use crate::reward_model::{ensemble_reward, RewardModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("non-finite soft Q target {target} for state {state:?}, action {action:?} (reward {reward})")]
    NonFiniteTarget {
        state: Cell,
        action: Action,
        reward: f64,
        target: f64,
    },
}

/// One step as the learner sees it: no ground-truth reward, and the
/// successor is wherever the stream continued (the start cell after an
/// episode ended).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerTransition {
    pub state: Cell,
    pub action: Action,
    pub reward: f64,
    pub successor: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub trajectory: Arc<Trajectory>,
    rewards: Vec<f64>,
}

impl BankEntry {
    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn learner_transition(&self, t: usize) -> LearnerTransition {
        let tr = &self.trajectory.transitions()[t];
        LearnerTransition {
            state: tr.state,
            action: tr.action,
            reward: self.rewards[t],
            successor: self.trajectory.successor(t),
        }
    }
}

/// Insertion-ordered trajectory store that evicts the oldest entry when full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBank {
    entries: VecDeque<BankEntry>,
    capacity: usize,
    total_added: u64,
}

impl TrajectoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "bank capacity must be positive");
        Self {
            entries: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            total_added: 0,
        }
    }

    /// Adds a trajectory with its initial learner rewards.
    pub fn push(&mut self, trajectory: Arc<Trajectory>, rewards: Vec<f64>) {
        assert_eq!(trajectory.len(), rewards.len(), "one reward per transition");
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(BankEntry { trajectory, rewards });
        self.total_added += 1;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_added(&self) -> u64 {
        self.total_added
    }

    pub fn get(&self, i: usize) -> Option<&BankEntry> {
        self.entries.get(i)
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &BankEntry> + ExactSizeIterator {
        self.entries.iter()
    }

    /// The `k` most recently added entries, oldest first.
    pub fn last_k(&self, k: usize) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter().skip(self.entries.len().saturating_sub(k))
    }

    pub fn sample_transition<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<LearnerTransition> {
        if self.entries.is_empty() {
            return None;
        }
        let entry = &self.entries[rng.random_range(0..self.entries.len())];
        Some(entry.learner_transition(rng.random_range(0..entry.rewards.len())))
    }

    /// Recomputes every learner reward from the current model ensemble.
    /// Returns how many stored rewards changed.
    pub fn relabel(&mut self, models: &[RewardModel]) -> usize {
        let mut cache: HashMap<(Cell, Action), f64> = HashMap::new();
        self.relabel_with(|cell, action| {
            *cache
                .entry((cell, action))
                .or_insert_with(|| ensemble_reward(models, cell, action))
        })
    }

    /// Relabels with an arbitrary per-step reward function.
    pub fn relabel_with<F>(&mut self, mut reward: F) -> usize
    where
        F: FnMut(Cell, Action) -> f64,
    {
        let mut changed = 0;
        for entry in &mut self.entries {
            for (t, tr) in entry.trajectory.transitions().iter().enumerate() {
                let r = reward(tr.state, tr.action);
                if r.to_bits() != entry.rewards[t].to_bits() {
                    entry.rewards[t] = r;
                    changed += 1;
                }
            }
        }
        changed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftQConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
}

impl Default for SoftQConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            learning_rate: 0.1,
            temperature_start: 1.0,
            temperature_end: 0.05,
        }
    }
}

/// Below this temperature `act` is greedy.
const GREEDY_TEMPERATURE: f64 = 1e-8;

/// Action values over grid cells with a Boltzmann policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftQPolicy {
    q: Vec<f64>,
    width: usize,
    pub temperature: f64,
    pub gamma: f64,
    pub learning_rate: f64,
}

impl SoftQPolicy {
    pub fn new(grid: &GridWorldConfig, config: &SoftQConfig) -> Self {
        Self {
            q: vec![0.0; grid.num_cells() * Action::COUNT],
            width: grid.width,
            temperature: config.temperature_start,
            gamma: config.gamma,
            learning_rate: config.learning_rate,
        }
    }

    fn base(&self, cell: Cell) -> usize {
        (cell.y * self.width + cell.x) * Action::COUNT
    }

    pub fn q_values(&self, cell: Cell) -> &[f64] {
        let b = self.base(cell);
        &self.q[b..b + Action::COUNT]
    }

    pub fn q_values_mut(&mut self, cell: Cell) -> &mut [f64] {
        let b = self.base(cell);
        &mut self.q[b..b + Action::COUNT]
    }

    pub fn table(&self) -> &[f64] {
        &self.q
    }

    /// Boltzmann probabilities `exp(Q / temperature)`, normalized.
    pub fn probabilities(&self, cell: Cell) -> [f64; Action::COUNT] {
        let q = self.q_values(cell);
        let mut p = [0.0; Action::COUNT];
        if self.temperature <= GREEDY_TEMPERATURE {
            p[self.greedy_index(cell)] = 1.0;
            return p;
        }
        let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (pi, qi) in p.iter_mut().zip(q) {
            *pi = ((qi - max) / self.temperature).exp();
        }
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|pi| *pi /= z);
        p
    }

    fn greedy_index(&self, cell: Cell) -> usize {
        let q = self.q_values(cell);
        let mut best = 0;
        for i in 1..q.len() {
            if q[i] > q[best] {
                best = i;
            }
        }
        best
    }

    pub fn act_greedy(&self, cell: Cell) -> Action {
        Action::ALL[self.greedy_index(cell)]
    }

    pub fn act<R: Rng + ?Sized>(&self, cell: Cell, rng: &mut R) -> Action {
        if self.temperature <= GREEDY_TEMPERATURE {
            return self.act_greedy(cell);
        }
        let p = self.probabilities(cell);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return Action::ALL[i];
            }
        }
        Action::ALL[Action::COUNT - 1]
    }

    /// `temperature * log mean_a exp(Q(s, a) / temperature)`, the soft value
    /// relative to the uniform policy; the max at zero temperature.
    ///
    /// This is the log-sum-exp value minus `temperature * ln |A|`. The
    /// constant leaves the Boltzmann policy unchanged but keeps a
    /// zero-reward table at zero, so visited states do not accumulate an
    /// entropy bonus that unvisited ones lack.
    pub fn soft_value(&self, cell: Cell) -> f64 {
        let q = self.q_values(cell);
        let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if self.temperature <= GREEDY_TEMPERATURE {
            return max;
        }
        let s: f64 = q.iter().map(|qi| ((qi - max) / self.temperature).exp()).sum();
        max + self.temperature * (s / Action::COUNT as f64).ln()
    }

    /// One soft Q-learning step per transition, in order.
    pub fn update(&mut self, batch: &[LearnerTransition]) -> Result<(), AgentError> {
        for tr in batch {
            let target = tr.reward + self.gamma * self.soft_value(tr.successor);
            if !target.is_finite() {
                return Err(AgentError::NonFiniteTarget {
                    state: tr.state,
                    action: tr.action,
                    reward: tr.reward,
                    target,
                });
            }
            let alpha = self.learning_rate;
            let q = &mut self.q_values_mut(tr.state)[tr.action.index()];
            *q += alpha * (target - *q);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{rollout, GridWorld, Transition};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy() -> SoftQPolicy {
        SoftQPolicy::new(&GridWorldConfig::default(), &SoftQConfig::default())
    }

    fn traj(id: u64) -> Arc<Trajectory> {
        let t = Transition::new(Cell::new(0, 0), Action::Up, Cell::new(0, 1), false, 0.0);
        Arc::new(Trajectory::new(id, 0, vec![t; 3], Cell::new(0, 1)))
    }

    #[test]
    fn equal_q_gives_uniform_actions() {
        let p = policy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            counts[p.act(Cell::new(3, 3), &mut rng).index()] += 1;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9% quantile of chi-squared with 3 degrees of freedom.
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn greedy_mode_picks_argmax() {
        let mut p = policy();
        p.q_values_mut(Cell::new(1, 1)).copy_from_slice(&[0.1, 0.7, 0.3, 0.2]);
        p.temperature = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(p.act(Cell::new(1, 1), &mut rng), Action::Down);
        }
        assert_eq!(p.act_greedy(Cell::new(1, 1)), Action::Down);
    }

    #[test]
    fn dominant_action_at_low_temperature() {
        let mut p = policy();
        p.q_values_mut(Cell::new(2, 2)).copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
        p.temperature = 0.1;
        // exp(10) / (exp(10) + 3) ~= 0.99986
        let probs = p.probabilities(Cell::new(2, 2));
        assert!((probs[2] - 10f64.exp() / (10f64.exp() + 3.0)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hits = (0..10_000)
            .filter(|_| p.act(Cell::new(2, 2), &mut rng) == Action::Left)
            .count();
        assert!(hits > 9_500);
    }

    #[test]
    fn bandit_limit_converges_to_reward() {
        let mut p = policy();
        p.gamma = 0.0;
        let tr = LearnerTransition {
            state: Cell::new(0, 0),
            action: Action::Right,
            reward: 0.37,
            successor: Cell::new(1, 0),
        };
        for _ in 0..500 {
            p.update(&[tr]).unwrap();
        }
        assert!((p.q_values(Cell::new(0, 0))[3] - 0.37).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut p = policy();
        p.learning_rate = 0.0;
        let before = p.clone();
        let tr = LearnerTransition {
            state: Cell::new(0, 0),
            action: Action::Up,
            reward: 1.0,
            successor: Cell::new(0, 1),
        };
        p.update(&[tr; 10]).unwrap();
        assert_eq!(p, before);
    }

    /// Soft value iteration on a two-state chain, solved independently with
    /// the same backup applied synchronously until convergence.
    #[test]
    fn two_state_chain_matches_value_iteration() {
        let grid = GridWorldConfig {
            width: 2,
            height: 1,
            start: Cell::new(0, 0),
            goal: Cell::new(1, 0),
            ..GridWorldConfig::default()
        };
        let config = SoftQConfig {
            gamma: 0.9,
            learning_rate: 0.5,
            temperature_start: 0.5,
            temperature_end: 0.5,
        };
        let cells = [Cell::new(0, 0), Cell::new(1, 0)];
        // Deterministic chain: Right moves to cell 1, anything else to cell 0.
        // Reward 1 for Right from cell 0, 0.2 for Left from cell 1, else 0.
        let dynamics = |s: usize, a: Action| -> (f64, usize) {
            match (s, a) {
                (0, Action::Right) => (1.0, 1),
                (1, Action::Left) => (0.2, 0),
                (1, Action::Right) => (0.0, 1),
                (s, _) => (0.0, s),
            }
        };
        let tau = 0.5;
        let mut v = [0.0f64; 2];
        let mut q_star = [[0.0f64; 4]; 2];
        for _ in 0..5000 {
            for s in 0..2 {
                for a in Action::ALL {
                    let (r, n) = dynamics(s, a);
                    q_star[s][a.index()] = r + 0.9 * v[n];
                }
            }
            for s in 0..2 {
                v[s] = tau * (q_star[s].iter().map(|q| (q / tau).exp()).sum::<f64>() / 4.0).ln();
            }
        }

        let mut p = SoftQPolicy::new(&grid, &config);
        for _ in 0..3000 {
            for s in 0..2 {
                for a in Action::ALL {
                    let (r, n) = dynamics(s, a);
                    p.update(&[LearnerTransition {
                        state: cells[s],
                        action: a,
                        reward: r,
                        successor: cells[n],
                    }])
                    .unwrap();
                }
            }
        }
        for s in 0..2 {
            for a in 0..4 {
                let got = p.q_values(cells[s])[a];
                assert!((got - q_star[s][a]).abs() < 1e-3, "Q({s},{a}) = {got} vs {}", q_star[s][a]);
            }
        }
    }

    #[test]
    fn non_finite_target_aborts() {
        let mut p = policy();
        let tr = LearnerTransition {
            state: Cell::new(0, 0),
            action: Action::Up,
            reward: f64::INFINITY,
            successor: Cell::new(0, 1),
        };
        assert!(matches!(p.update(&[tr]), Err(AgentError::NonFiniteTarget { .. })));
    }

    #[test]
    fn bank_evicts_oldest_and_keeps_order() {
        let mut bank = TrajectoryBank::new(3);
        for id in 0..5 {
            bank.push(traj(id), vec![0.0; 3]);
        }
        let ids: Vec<u64> = bank.iter().map(|e| e.trajectory.id).collect();
        assert_eq!(ids, vec![2, 3, 4]);
        let last: Vec<u64> = bank.last_k(2).map(|e| e.trajectory.id).collect();
        assert_eq!(last, vec![3, 4]);
        assert_eq!(bank.last_k(10).count(), 3);
        assert_eq!(bank.total_added(), 5);
    }

    #[test]
    fn relabel_matches_direct_reward_and_is_idempotent() {
        let grid = GridWorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let config = crate::reward_model::RewardModelConfig {
            zero_output_layer: false,
            ..Default::default()
        };
        let model = RewardModel::new(&config, &grid, &mut rng).unwrap();
        let mut env = GridWorld::new(grid, 1).unwrap();
        let mut bank = TrajectoryBank::new(50);
        for id in 0..20 {
            let t = rollout(&mut env, |_| Action::ALL[rng.random_range(0..4)], 50, id, 0);
            bank.push(Arc::new(t), vec![0.0; 50]);
        }
        let models = [model];
        assert!(bank.relabel(&models) > 0);
        assert_eq!(bank.relabel(&models), 0);
        for _ in 0..100 {
            let tr = bank.sample_transition(&mut rng).unwrap();
            assert_eq!(tr.reward.to_bits(), models[0].reward(tr.state, tr.action).to_bits());
        }

        let mut zero = models[0].clone();
        zero.params_mut().as_mut_slice().fill(0.0);
        bank.relabel(&[zero]);
        assert!(bank.iter().all(|e| e.rewards().iter().all(|&r| r == 0.0)));
    }
}
