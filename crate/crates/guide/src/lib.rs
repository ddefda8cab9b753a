//! The `book/` chapters, compiled so their code blocks run as doc-tests.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(gridworld, "gridworld.md");
chapter!(reward_model, "reward-model.md");
chapter!(triplet_loss, "triplet-loss.md");
chapter!(action_distance, "action-distance.md");
chapter!(learner, "learner.md");
chapter!(training_loop, "training-loop.md");
chapter!(experiments, "experiments.md");
chapter!(labeling_service, "labeling-service.md");
