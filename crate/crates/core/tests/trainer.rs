//! End-to-end trainer properties on short runs.

use std::path::Path;

use pbrl::envs::GridWorldConfig;
use pbrl::oracle::{LabelChoice, QueryQueue};
use pbrl::reward_model::LossWeights;
use pbrl::trainer::{Feedback, Trainer, TrainerConfig};

fn short_config() -> TrainerConfig {
    TrainerConfig {
        total_steps: 4_000,
        warmup_steps: 1_000,
        steps_between_sessions: 500,
        eval_episodes: 4,
        ensemble_size: 2,
        ..TrainerConfig::default()
    }
}

fn trainer(config: TrainerConfig, seed: u64) -> Trainer {
    Trainer::new("test", GridWorldConfig::default(), config, seed).unwrap()
}

fn run_to_end(t: &mut Trainer) {
    t.run(&Feedback::Synthetic, |_| Ok(())).unwrap();
}

#[test]
fn labels_never_exceed_budget() {
    for budget in [1, 3, 7] {
        let config = TrainerConfig {
            max_feedback: budget,
            queries_per_session: 5,
            ..short_config()
        };
        let mut t = trainer(config, 3);
        while !t.is_finished() {
            let row = t.run_session(&Feedback::Synthetic).unwrap();
            assert!(row.feedback_used <= budget as u64);
            assert!(t.dataset().len() <= budget);
        }
    }
}

#[test]
fn zero_budget_trains_without_labels() {
    let config = TrainerConfig {
        max_feedback: 0,
        ..short_config()
    };
    let mut t = trainer(config, 0);
    run_to_end(&mut t);
    assert!(t.dataset().is_empty());
    assert!(t.metrics().iter().all(|r| r.feedback_used == 0 && r.loss_ce.is_none()));
    assert_eq!(t.global_step(), 4_000);
}

#[test]
fn human_feedback_does_not_block_training() {
    let config = short_config();
    let queue = QueryQueue::shared(config.query_queue_capacity, config.max_feedback);
    let mut t = trainer(config, 1);
    let feedback = Feedback::Human(&queue);

    let first = t.run_session(&feedback).unwrap();
    assert_eq!(first.feedback_used, 0);
    let pending = queue.lock().unwrap().pending_count();
    assert!(pending > 0, "the session should leave queries for the labeler");

    {
        let mut q = queue.lock().unwrap();
        let id = q.next_pending().unwrap().id;
        q.submit_label(id, LabelChoice::Prefer1).unwrap();
    }
    let second = t.run_session(&feedback).unwrap();
    assert_eq!(second.feedback_used, 1);
    assert_eq!(t.dataset().len(), 1);
    assert!(second.global_step > first.global_step);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut whole = trainer(short_config(), 5);
    run_to_end(&mut whole);

    let dir = tempfile::tempdir().unwrap();
    let mut part = trainer(short_config(), 5);
    for _ in 0..3 {
        part.run_session(&Feedback::Synthetic).unwrap();
    }
    part.save_checkpoint(dir.path()).unwrap();
    for name in ["reward_model_0.bin", "reward_model_1.json", "policy.json", "preferences.json", "trainer_state.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    drop(part);
    let mut resumed = Trainer::resume(dir.path()).unwrap();
    run_to_end(&mut resumed);

    assert_eq!(resumed.metrics(), whole.metrics());
    assert_eq!(resumed.policy().table(), whole.policy().table());
    assert_eq!(resumed.models()[0].params(), whole.models()[0].params());
}

#[test]
fn every_loss_combination_runs() {
    for (ce, t, a) in [(1.0, 0.0, 0.0), (1.0, 0.5, 0.0), (1.0, 0.0, 3.0), (1.0, 0.5, 3.0)] {
        let config = TrainerConfig {
            weights: LossWeights {
                ce,
                triplet: t,
                action_distance: a,
            },
            ..short_config()
        };
        let mut tr = trainer(config, 2);
        run_to_end(&mut tr);
        for row in tr.metrics().iter().filter(|r| r.loss_ce.is_some()) {
            assert_eq!(row.loss_t.is_some(), t > 0.0);
            assert_eq!(row.loss_a.is_some(), a > 0.0);
            for v in [row.loss_ce, row.loss_t, row.loss_a].into_iter().flatten() {
                assert!(v.is_finite() && v >= 0.0);
            }
        }
    }
}

/// Ground-truth rewards must stay out of reward learning and the learner:
/// only the environment, the oracle and the evaluator may read them.
#[test]
fn ground_truth_access_is_confined() {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    let allowed = ["envs.rs", "oracle.rs", "eval.rs"];
    let mut stack = vec![src];
    let mut offenders = Vec::new();
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let text = std::fs::read_to_string(&path).unwrap();
            let name = path.file_name().unwrap().to_str().unwrap();
            if text.contains("GroundTruth::grant") && !allowed.contains(&name) {
                offenders.push(path.display().to_string());
            }
        }
    }
    assert!(offenders.is_empty(), "{offenders:?}");
}
