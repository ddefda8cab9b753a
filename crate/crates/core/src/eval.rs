//! Ground-truth evaluation: policy returns, success rate and reward rank
//! correlation. This is the only learner-adjacent code allowed to read the
//! environment's reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{SoftQPolicy, TrajectoryBank};
use crate::envs::{rollout, GridWorld, GroundTruth, Trajectory};
use crate::reward_model::{ensemble_reward, RewardModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Mean ground-truth return of fixed-length greedy rollouts.
    pub mean_return: f64,
    /// Fraction of rollouts whose first episode reached the goal.
    pub success_rate: f64,
}

fn first_episode_succeeds(trajectory: &Trajectory, env: &GridWorld) -> bool {
    let goal = env.config().goal;
    for tr in trajectory.transitions() {
        if tr.done {
            return tr.next_state == goal;
        }
    }
    false
}

/// Greedy rollouts of `horizon` steps, each from a fresh reset.
pub fn evaluate_policy(
    policy: &SoftQPolicy,
    env: &mut GridWorld,
    episodes: usize,
    horizon: usize,
) -> EvalStats {
    if episodes == 0 {
        return EvalStats {
            mean_return: 0.0,
            success_rate: 0.0,
        };
    }
    let gt = GroundTruth::grant();
    let mut total = 0.0;
    let mut successes = 0usize;
    for i in 0..episodes {
        let traj = rollout(env, |s| policy.act_greedy(s), horizon, i as u64, 0);
        total += traj.true_return(&gt);
        successes += usize::from(first_episode_succeeds(&traj, env));
    }
    EvalStats {
        mean_return: total / episodes as f64,
        success_rate: successes as f64 / episodes as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub value: f64,
    /// Set when either sample is constant; `value` is then 0.
    pub degenerate: bool,
}

/// Ranks starting at 1, ties receive the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> SpearmanResult {
    assert_eq!(xs.len(), ys.len(), "paired samples");
    let degenerate = SpearmanResult {
        value: 0.0,
        degenerate: true,
    };
    if xs.len() < 2 {
        return degenerate;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return degenerate;
    }
    SpearmanResult {
        value: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Rank correlation between learned and ground-truth per-step rewards over
/// `sample_size` transitions drawn uniformly from the `recent` newest bank
/// trajectories.
pub fn compute_reward_spearman<R: Rng + ?Sized>(
    models: &[RewardModel],
    bank: &TrajectoryBank,
    recent: usize,
    sample_size: usize,
    rng: &mut R,
) -> SpearmanResult {
    let gt = GroundTruth::grant();
    let window: Vec<&Trajectory> = bank.last_k(recent).map(|e| e.trajectory.as_ref()).collect();
    if window.is_empty() || sample_size == 0 {
        return SpearmanResult {
            value: 0.0,
            degenerate: true,
        };
    }
    let mut learned = Vec::with_capacity(sample_size);
    let mut truth = Vec::with_capacity(sample_size);
    for _ in 0..sample_size {
        let traj = window[rng.random_range(0..window.len())];
        let tr = &traj.transitions()[rng.random_range(0..traj.len())];
        learned.push(ensemble_reward(models, tr.state, tr.action));
        truth.push(tr.true_reward(&gt));
    }
    spearman(&learned, &truth)
}
