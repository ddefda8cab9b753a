//! Run configuration, single-arm runs and the seed-by-arm ablation suite.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::GridWorldConfig;
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::trainer::{Feedback, RewardSource, Trainer, TrainerConfig, TrainerError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown loss set {0:?}; expected one of ce | ce,triplet | ce,ad | ce,triplet,ad | true-reward")]
    UnknownArm(String),
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error("the ablation suite needs at least 3 seeds, got {0}")]
    TooFewSeeds(usize),
    #[error("{failed} of {total} runs failed; first: {first}")]
    RunsFailed {
        failed: usize,
        total: usize,
        first: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which reward-learning losses a run uses, or the ground-truth baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Ce,
    CeTriplet,
    CeAd,
    CeTripletAd,
    TrueReward,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Ce, Arm::CeTriplet, Arm::CeAd, Arm::CeTripletAd, Arm::TrueReward];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Ce => "ce",
            Arm::CeTriplet => "ce,triplet",
            Arm::CeAd => "ce,ad",
            Arm::CeTripletAd => "ce,triplet,ad",
            Arm::TrueReward => "true-reward",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Arm::Ce => "ce",
            Arm::CeTriplet => "ce_triplet",
            Arm::CeAd => "ce_ad",
            Arm::CeTripletAd => "ce_triplet_ad",
            Arm::TrueReward => "true_reward",
        }
    }

    fn uses_triplet(self) -> bool {
        matches!(self, Arm::CeTriplet | Arm::CeTripletAd)
    }

    fn uses_action_distance(self) -> bool {
        matches!(self, Arm::CeAd | Arm::CeTripletAd)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = HarnessError;

    /// Accepts the loss names in any order, e.g. `ad,ce`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "true-reward" {
            return Ok(Arm::TrueReward);
        }
        let mut parts: Vec<&str> = s.split(',').map(str::trim).collect();
        parts.sort_unstable();
        parts.dedup();
        match parts.as_slice() {
            ["ce"] => Ok(Arm::Ce),
            ["ce", "triplet"] => Ok(Arm::CeTriplet),
            ["ad", "ce"] => Ok(Arm::CeAd),
            ["ad", "ce", "triplet"] => Ok(Arm::CeTripletAd),
            _ => Err(HarnessError::UnknownArm(s.to_string())),
        }
    }
}

impl Serialize for Arm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Arm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything that determines a run. Written back out as `config.resolved`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: Option<String>,
    pub seed: u64,
    pub losses: Arm,
    pub env: GridWorldConfig,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            seed: 0,
            losses: Arm::CeTripletAd,
            env: GridWorldConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-seed{}", self.losses.slug(), self.seed))
    }

    /// The trainer config with the arm applied: disabled losses get weight
    /// zero and the baseline arm switches to the environment reward.
    pub fn effective_trainer(&self) -> TrainerConfig {
        let mut t = self.trainer.clone();
        if !self.losses.uses_triplet() {
            t.weights.triplet = 0.0;
        }
        if !self.losses.uses_action_distance() {
            t.weights.action_distance = 0.0;
        }
        if self.losses == Arm::TrueReward {
            t.reward_source = RewardSource::GroundTruth;
        }
        t
    }

    /// A copy with the arm already folded into the trainer section.
    pub fn resolved(&self) -> RunConfig {
        RunConfig {
            run_id: Some(self.run_id()),
            trainer: self.effective_trainer(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let t = self.effective_trainer();
        t.validate()?;
        self.env.validate(t.segment_length).map_err(TrainerError::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub final_dataset_len: usize,
}

impl RunOutcome {
    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

/// Runs one arm with the synthetic oracle, writing `config.resolved`,
/// `metrics.csv` and a final checkpoint under `out_dir`.
pub fn run_experiment(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let resolved = config.resolved();
    let resolved_path = out_dir.join("config.resolved");
    fs::write(&resolved_path, resolved.to_toml()).map_err(io_err(&resolved_path))?;

    let run_id = resolved.run_id();
    let mut trainer = Trainer::new(&run_id, resolved.env.clone(), resolved.trainer.clone(), resolved.seed)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let mut write_error = None;
    trainer.run(&Feedback::Synthetic, |row| {
        writer.write(row).map_err(|e| {
            write_error = Some(e);
            TrainerError::Checkpoint("metrics write failed".into())
        })
    })
    .map_err(|e| match write_error.take() {
        Some(source) => HarnessError::Io {
            path: metrics_path.clone(),
            source,
        },
        None => e.into(),
    })?;
    trainer.save_checkpoint(&out_dir.join("checkpoint"))?;
    Ok(RunOutcome {
        run_id,
        out_dir: out_dir.to_path_buf(),
        rows: trainer.metrics().to_vec(),
        final_dataset_len: trainer.dataset().len(),
    })
}

/// Median with the midpoint rule for even counts.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile of the sorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn iqr(values: &[f64]) -> f64 {
    quantile(values, 0.75) - quantile(values, 0.25)
}

/// One point of an arm's median learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub global_step: u64,
    pub feedback_used: f64,
    pub eval_true_return: f64,
    pub eval_success_rate: f64,
    pub reward_spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub n_seeds: usize,
    pub median_final_return: f64,
    pub q25_final_return: f64,
    pub q75_final_return: f64,
    pub iqr_final_return: f64,
    pub median_final_success: f64,
    pub median_final_spearman: f64,
    pub median_final_feedback: f64,
    /// Median over seeds of this arm's final return minus the CE-only arm's.
    pub median_paired_diff_vs_ce: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub seeds: Vec<u64>,
    pub runs: Vec<(Arm, u64, RunOutcome)>,
    pub summaries: Vec<ArmSummary>,
    pub curves: Vec<(Arm, Vec<CurvePoint>)>,
    pub failures: Vec<(Arm, u64, String)>,
}

impl AblationResult {
    pub fn summary(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm.as_str())
    }

    pub fn curve(&self, arm: Arm) -> Option<&[CurvePoint]> {
        self.curves.iter().find(|(a, _)| *a == arm).map(|(_, c)| c.as_slice())
    }

    /// Final rows of `arm`, in seed order.
    pub fn finals(&self, arm: Arm) -> Vec<&MetricsRow> {
        self.seeds
            .iter()
            .filter_map(|&s| {
                self.runs
                    .iter()
                    .find(|(a, seed, _)| *a == arm && *seed == s)
                    .and_then(|(_, _, o)| o.final_row())
            })
            .collect()
    }

    /// Per-seed `arm - ce` differences in final return.
    pub fn paired_differences(&self, arm: Arm) -> Vec<f64> {
        let lookup = |a: Arm, s: u64| {
            self.runs
                .iter()
                .find(|(x, seed, _)| *x == a && *seed == s)
                .and_then(|(_, _, o)| o.final_row())
                .map(|r| r.eval_true_return)
        };
        self.seeds
            .iter()
            .filter_map(|&s| Some(lookup(arm, s)? - lookup(Arm::Ce, s)?))
            .collect()
    }
}

/// Feedback count at which `curve` first reaches `target`.
pub fn feedback_to_reach(curve: &[CurvePoint], target: f64) -> Option<f64> {
    curve
        .iter()
        .find(|p| p.eval_true_return >= target)
        .map(|p| p.feedback_used)
}

fn median_curve(outcomes: &[&RunOutcome]) -> Vec<CurvePoint> {
    let len = outcomes.iter().map(|o| o.rows.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let col = |f: fn(&MetricsRow) -> f64| -> f64 {
                median(&outcomes.iter().map(|o| f(&o.rows[i])).collect::<Vec<_>>())
            };
            CurvePoint {
                global_step: outcomes[0].rows[i].global_step,
                feedback_used: col(|r| r.feedback_used as f64),
                eval_true_return: col(|r| r.eval_true_return),
                eval_success_rate: col(|r| r.eval_success_rate),
                reward_spearman: col(|r| r.reward_spearman),
            }
        })
        .collect()
}

/// Runs every arm for every seed (in parallel across runs), then writes
/// `summary.csv`, `curves.csv` and `paired.csv` to `out_dir`. Completed runs
/// are kept even when others fail; the error reports the failures.
pub fn run_ablation_suite(
    base: &RunConfig,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<AblationResult, (Option<AblationResult>, HarnessError)> {
    if seeds.len() < 3 {
        return Err((None, HarnessError::TooFewSeeds(seeds.len())));
    }
    let jobs: Vec<(Arm, u64)> = Arm::ALL
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results: Vec<(Arm, u64, Result<RunOutcome, HarnessError>)> = jobs
        .par_iter()
        .map(|&(arm, seed)| {
            let config = RunConfig {
                run_id: None,
                seed,
                losses: arm,
                ..base.clone()
            };
            let dir = out_dir.join(arm.slug()).join(format!("seed_{seed}"));
            (arm, seed, run_experiment(&config, &dir))
        })
        .collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (arm, seed, r) in results {
        match r {
            Ok(o) => runs.push((arm, seed, o)),
            Err(e) => failures.push((arm, seed, e.to_string())),
        }
    }
    let mut result = AblationResult {
        seeds: seeds.to_vec(),
        runs,
        summaries: Vec::new(),
        curves: Vec::new(),
        failures,
    };
    for arm in Arm::ALL {
        let outcomes: Vec<&RunOutcome> = result
            .runs
            .iter()
            .filter(|(a, _, o)| *a == arm && o.final_row().is_some())
            .map(|(_, _, o)| o)
            .collect();
        if outcomes.is_empty() {
            continue;
        }
        let finals: Vec<&MetricsRow> = outcomes.iter().filter_map(|o| o.final_row()).collect();
        let returns: Vec<f64> = finals.iter().map(|r| r.eval_true_return).collect();
        let diffs = result.paired_differences(arm);
        result.summaries.push(ArmSummary {
            arm: arm.as_str().to_string(),
            n_seeds: finals.len(),
            median_final_return: median(&returns),
            q25_final_return: quantile(&returns, 0.25),
            q75_final_return: quantile(&returns, 0.75),
            iqr_final_return: iqr(&returns),
            median_final_success: median(&finals.iter().map(|r| r.eval_success_rate).collect::<Vec<_>>()),
            median_final_spearman: median(&finals.iter().map(|r| r.reward_spearman).collect::<Vec<_>>()),
            median_final_feedback: median(&finals.iter().map(|r| r.feedback_used as f64).collect::<Vec<_>>()),
            median_paired_diff_vs_ce: (!diffs.is_empty()).then(|| median(&diffs)),
        });
        result.curves.push((arm, median_curve(&outcomes)));
    }

    if let Err(e) = write_suite_files(&result, out_dir) {
        return Err((Some(result), e));
    }
    if let Some((arm, seed, msg)) = result.failures.first() {
        let e = HarnessError::RunsFailed {
            failed: result.failures.len(),
            total: jobs.len(),
            first: format!("{arm} seed {seed}: {msg}"),
        };
        return Err((Some(result), e));
    }
    Ok(result)
}

fn write_suite_files(result: &AblationResult, out_dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: csv::Error| HarnessError::Io {
            path,
            source: std::io::Error::other(e),
        }
    };

    let path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for s in &result.summaries {
        w.serialize(s).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = out_dir.join("curves.csv");
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&path)
        .map_err(csv_err(&path))?;
    w.write_record([
        "arm",
        "global_step",
        "feedback_used",
        "eval_true_return",
        "eval_success_rate",
        "reward_spearman",
    ])
    .map_err(csv_err(&path))?;
    for (arm, curve) in &result.curves {
        for p in curve {
            w.write_record([
                arm.as_str().to_string(),
                p.global_step.to_string(),
                p.feedback_used.to_string(),
                p.eval_true_return.to_string(),
                p.eval_success_rate.to_string(),
                p.reward_spearman.to_string(),
            ])
            .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let path = out_dir.join("paired.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["arm", "seed", "final_return", "ce_final_return", "difference"])
        .map_err(csv_err(&path))?;
    for (arm, seed, o) in &result.runs {
        let ce = result
            .runs
            .iter()
            .find(|(a, s, _)| *a == Arm::Ce && s == seed)
            .and_then(|(_, _, o)| o.final_row());
        if let (Some(mine), Some(ce)) = (o.final_row(), ce) {
            w.write_record([
                arm.as_str().to_string(),
                seed.to_string(),
                mine.eval_true_return.to_string(),
                ce.eval_true_return.to_string(),
                (mine.eval_true_return - ce.eval_true_return).to_string(),
            ])
            .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

/// The declared fallback grid: every `(k_window, margin)` pair with the
/// default loss weights.
pub fn sweep_grid(base: &RunConfig) -> Vec<RunConfig> {
    let mut out = Vec::new();
    for k in [5, 10, 20] {
        for m in [0.5, 1.0, 2.0] {
            let mut c = base.clone();
            c.trainer.k_window = k;
            c.trainer.margin = m;
            c.trainer.weights = Default::default();
            out.push(c);
        }
    }
    out
}
