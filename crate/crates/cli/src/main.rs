use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pbrl::envs::{GridWorld, RewardMode};
use pbrl::eval::evaluate_policy;
use pbrl::harness::{self, run_ablation_suite, Arm, RunConfig};
use pbrl::metrics::MetricsWriter;
use pbrl::oracle::QueryQueue;
use pbrl::trainer::{Feedback, Trainer, TrainerError};
use pbrl_cli::overrides;
use pbrl_cli::server::{router, AppState};

#[derive(Parser)]
#[command(name = "pbrl", version, about = "Preference-based reward learning on a gridworld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one arm with the synthetic oracle.
    Run(RunArgs),
    /// Train every arm for several seeds and summarize.
    Ablate(AblateArgs),
    /// Train with human labels collected over HTTP.
    Serve(ServeArgs),
    /// Evaluate a saved checkpoint against the true reward.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; flags and --set override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `gridworld` (sparse reward) or `gridworld-shaped`.
    #[arg(long)]
    env: Option<String>,
    /// ce | ce,triplet | ce,ad | ce,triplet,ad | true-reward
    #[arg(long)]
    losses: Option<String>,
    /// Maximum number of preference labels.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set trainer.k_window=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "runs/run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "runs/ablation")]
    out_dir: PathBuf,
    /// Comma-separated seeds (at least three).
    #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Run the declared k_window x margin grid instead of one suite.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "runs/serve")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Directory holding the built label UI.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Pause after each session so labelers can keep up.
    #[arg(long, default_value_t = 2000)]
    session_delay_ms: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `run` or `serve`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn build_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut table = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            text.parse::<toml::Table>()
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => toml::Table::new(),
    };
    for s in &args.set {
        overrides::apply(&mut table, s)?;
    }
    let mut config: RunConfig = table.try_into().context("invalid config")?;
    if let Some(env) = &args.env {
        config.env.reward_mode = match env.as_str() {
            "gridworld" => RewardMode::Sparse,
            "gridworld-shaped" => RewardMode::Shaped,
            other => bail!("unknown env {other:?}; expected gridworld or gridworld-shaped"),
        };
    }
    if let Some(l) = &args.losses {
        config.losses = l.parse::<Arm>()?;
    }
    if let Some(b) = args.budget {
        config.trainer.max_feedback = b;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn run(args: RunArgs) -> Result<()> {
    let config = build_config(&args.config)?;
    let outcome = harness::run_experiment(&config, &args.out_dir)?;
    if let Some(row) = outcome.final_row() {
        println!(
            "{}: step {} feedback {} return {:.3} success {:.2} spearman {:.3}",
            outcome.run_id,
            row.global_step,
            row.feedback_used,
            row.eval_true_return,
            row.eval_success_rate,
            row.reward_spearman
        );
    }
    Ok(())
}

fn print_summary(result: &harness::AblationResult) {
    println!("arm             seeds  median_return  iqr     success  spearman  diff_vs_ce");
    for s in &result.summaries {
        println!(
            "{:<15} {:>5}  {:>13.3}  {:>6.3}  {:>7.2}  {:>8.3}  {:>10}",
            s.arm,
            s.n_seeds,
            s.median_final_return,
            s.iqr_final_return,
            s.median_final_success,
            s.median_final_spearman,
            s.median_paired_diff_vs_ce.map_or("-".into(), |d| format!("{d:.3}"))
        );
    }
}

fn ablate(args: AblateArgs) -> Result<()> {
    let base = build_config(&args.config)?;
    let configs = if args.sweep {
        harness::sweep_grid(&base)
    } else {
        vec![base]
    };
    let mut failed = false;
    for config in configs {
        let dir = if args.sweep {
            args.out_dir
                .join(format!("k{}_m{}", config.trainer.k_window, config.trainer.margin))
        } else {
            args.out_dir.clone()
        };
        if args.sweep {
            println!("k_window {} margin {}", config.trainer.k_window, config.trainer.margin);
        }
        match run_ablation_suite(&config, &args.seeds, &dir) {
            Ok(result) => print_summary(&result),
            Err((partial, e)) => {
                if let Some(result) = partial {
                    print_summary(&result);
                }
                eprintln!("error: {e}");
                failed = true;
            }
        }
    }
    if failed {
        bail!("some runs failed; completed results were kept");
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let config = build_config(&args.config)?.resolved();
    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(args.out_dir.join("config.resolved"), config.to_toml())?;
    let queue = QueryQueue::shared(config.trainer.query_queue_capacity, config.trainer.max_feedback);
    let global_step = Arc::new(AtomicU64::new(0));
    let state = AppState {
        queue: queue.clone(),
        global_step: global_step.clone(),
    };

    let out_dir = args.out_dir.clone();
    let delay = Duration::from_millis(args.session_delay_ms);
    let training = std::thread::spawn(move || -> Result<()> {
        let mut trainer = Trainer::new(config.run_id(), config.env.clone(), config.trainer.clone(), config.seed)?;
        let metrics_path = out_dir.join("metrics.csv");
        let mut writer = MetricsWriter::create(&metrics_path)?;
        trainer.run(&Feedback::Human(&queue), |row| {
            writer.write(row).map_err(|e| TrainerError::Checkpoint(e.to_string()))?;
            global_step.store(row.global_step, Ordering::Relaxed);
            std::thread::sleep(delay);
            Ok(())
        })?;
        trainer.save_checkpoint(&out_dir.join("checkpoint"))?;
        eprintln!("training finished; still serving until interrupted");
        Ok(())
    });

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", args.port)).await?;
        eprintln!("labeling service on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state, args.static_dir))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })?;
    if training.is_finished() {
        training.join().expect("training thread panicked")?;
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let trainer = Trainer::resume(&args.checkpoint)?;
    let config = trainer.config();
    let mut env = GridWorld::new(trainer.env_config().clone(), args.seed)?;
    let stats = evaluate_policy(trainer.policy(), &mut env, args.episodes, config.segment_length);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate(a),
        Command::Serve(a) => serve(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
