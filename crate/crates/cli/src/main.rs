//! `madist`: collect data, train the distance embedding and latent model,
//! plan, shape rewards, run the GCSL baseline and evaluate, one stage per
//! subcommand or all at once with `pipeline`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};

use madist::embed::{EmbedConfig, Norm};
use madist::envs::{Cell, EnvSpec};
use madist::gcsl::GcslConfig;
use madist::latent::{DynamicsConfig, PlanConfig};
use madist::oracle::{compute_mad, evaluate_planner, EvalReport};
use madist::pipeline::{read_reports, run_pipeline, CollectPolicy, Outcome, PipelineConfig, Stage};
use madist::shaping::QConfig;
use madist::Exec;

#[derive(Parser)]
#[command(
    name = "madist",
    version,
    about = "Minimum-action-distance embeddings, latent planning and reward shaping"
)]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a behaviour policy and write a trajectory dataset.
    Collect(CollectArgs),
    /// Train the distance embedding on a dataset.
    TrainEmbed(TrainEmbedArgs),
    /// Train the latent transition model with the embedding frozen.
    TrainDyn(TrainDynArgs),
    /// Run the latent planner toward random goals.
    Plan(PlanArgs),
    /// Tabular Q-learning toward a fixed goal, with or without shaping.
    ShapeTrain(ShapeTrainArgs),
    /// Train the goal-conditioned behaviour-cloning baseline.
    GcslTrain(GcslTrainArgs),
    /// Run the baseline policy toward random goals.
    GcslEval(GcslEvalArgs),
    /// Compare an embedding (and optionally a planner) with exact distances.
    Eval(EvalArgs),
    /// Run every stage from a TOML config, skipping up-to-date stages.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long, default_value = "random", value_parser = ["random", "qtable"])]
    policy: String,
    /// Q-table written by `shape-train --qtable`; required with `--policy qtable`.
    #[arg(long, required_if_eq("policy", "qtable"))]
    qtable: Option<PathBuf>,
    /// Exploration rate of the Q-table policy.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long = "n-traj", default_value_t = 200)]
    n_traj: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainEmbedArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Comma-separated hidden widths.
    #[arg(long, default_value = "128,128", value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, default_value = "l1")]
    norm: Norm,
    /// Exponent of the `1 / d^alpha` pair weight.
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 100_000)]
    steps: usize,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long)]
    seed: u64,
    /// Drop the one-sided penalty on over-estimated distances.
    #[arg(long)]
    no_penalty: bool,
    /// Longest trajectory gap used for training pairs; unbounded when unset.
    #[arg(long)]
    max_gap: Option<usize>,
    /// Training curve output.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainDynArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    embed: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    embed: PathBuf,
    #[arg(long = "dyn")]
    dynamics: PathBuf,
    #[arg(long, default_value_t = 100)]
    goals: usize,
    #[arg(long, default_value_t = 5)]
    horizon: usize,
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    budget: usize,
    /// Embedded-distance goal tolerance for continuous environments.
    #[arg(long)]
    goal_eps: Option<f64>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["shaped", "unshaped"])))]
struct ShapeTrainArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long, required_if_eq("shaped", "true"))]
    embed: Option<PathBuf>,
    /// Goal cell as `x,y`.
    #[arg(long, value_parser = parse_cell)]
    goal: Cell,
    #[arg(long, default_value_t = 500)]
    episodes: usize,
    #[arg(long)]
    shaped: bool,
    #[arg(long)]
    unshaped: bool,
    #[arg(long, default_value_t = QConfig::default().gamma)]
    gamma: f64,
    #[arg(long)]
    seed: u64,
    /// Per-episode return and steps.
    #[arg(long)]
    curve: PathBuf,
    /// Also save the learned Q-table.
    #[arg(long)]
    qtable: Option<PathBuf>,
}

#[derive(Args)]
struct GcslTrainArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Train the horizon-less variant.
    #[arg(long)]
    no_horizon: bool,
    #[arg(long)]
    max_gap: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct GcslEvalArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    /// Embedding used to report the final distance to the goal.
    #[arg(long)]
    embed: PathBuf,
    #[arg(long, default_value_t = 100)]
    goals: usize,
    #[arg(long, default_value_t = 50)]
    budget: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    embed: PathBuf,
    /// Dynamics checkpoint; plans `--goals` episodes unless `--plan-report` is given.
    #[arg(long = "dyn", requires = "seed")]
    dynamics: Option<PathBuf>,
    /// Training data, for the violation rate and one-step error.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Planner report to score instead of planning.
    #[arg(long)]
    plan_report: Option<PathBuf>,
    /// Evaluate this many random pairs instead of every pair.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long, default_value_t = 100)]
    goals: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Re-run stages even when their outputs are current.
    #[arg(long)]
    force: bool,
}

fn parse_cell(s: &str) -> Result<Cell, String> {
    let (x, y) = s.split_once(',').ok_or("expected `x,y`")?;
    let x = x.trim().parse().map_err(|_| format!("bad x `{x}`"))?;
    let y = y.trim().parse().map_err(|_| format!("bad y `{y}`"))?;
    Ok(Cell::new(x, y))
}

fn load_env(path: &Path) -> Result<EnvSpec> {
    EnvSpec::load(path).with_context(|| format!("loading environment {}", path.display()))
}

fn stage_for(command: Command) -> Result<Stage> {
    Ok(match command {
        Command::Collect(a) => Stage::Collect {
            env: load_env(&a.env)?,
            policy: match a.qtable {
                Some(path) if a.policy == "qtable" => CollectPolicy::Qtable {
                    path,
                    epsilon: a.epsilon,
                },
                _ => CollectPolicy::Random,
            },
            n_traj: a.n_traj,
            seed: a.seed,
            out: a.out,
        },
        Command::TrainEmbed(a) => Stage::TrainEmbed {
            dataset: a.dataset,
            config: EmbedConfig {
                embed_dim: a.dim,
                hidden: a.hidden,
                norm: a.norm,
                alpha_exponent: a.alpha,
                penalty_enabled: !a.no_penalty,
                batch_size: a.batch,
                lr: a.lr,
                train_steps: a.steps,
                seed: a.seed,
                max_gap: a.max_gap,
                ..EmbedConfig::default()
            },
            out: a.out,
            log: a.log,
        },
        Command::TrainDyn(a) => Stage::TrainDyn {
            dataset: a.dataset,
            embed: a.embed,
            config: DynamicsConfig {
                train_steps: a.steps,
                batch_size: a.batch,
                lr: a.lr,
                seed: a.seed,
                ..DynamicsConfig::default()
            },
            out: a.out,
            log: a.log,
        },
        Command::Plan(a) => Stage::Plan {
            env: load_env(&a.env)?,
            embed: a.embed,
            dynamics: a.dynamics,
            goals: a.goals,
            config: PlanConfig {
                horizon: a.horizon,
                num_sequences: a.samples,
                goal_eps: a.goal_eps,
                max_env_steps: a.budget,
                seed: a.seed,
                ..PlanConfig::default()
            },
            report: a.report,
        },
        Command::ShapeTrain(a) => Stage::ShapeTrain {
            env: load_env(&a.env)?,
            embed: a.embed,
            goal: a.goal,
            episodes: a.episodes,
            shaped: a.shaped,
            q: QConfig {
                gamma: a.gamma,
                ..QConfig::default()
            },
            seed: a.seed,
            curve: a.curve,
            qtable: a.qtable,
        },
        Command::GcslTrain(a) => Stage::GcslTrain {
            env: load_env(&a.env)?,
            dataset: a.dataset,
            config: GcslConfig {
                horizon_conditioned: !a.no_horizon,
                max_gap: a.max_gap,
                train_steps: a.steps,
                batch_size: a.batch,
                lr: a.lr,
                seed: a.seed,
                ..GcslConfig::default()
            },
            out: a.out,
            log: a.log,
        },
        Command::GcslEval(a) => Stage::GcslEval {
            env: load_env(&a.env)?,
            policy: a.policy,
            embed: a.embed,
            goals: a.goals,
            budget: a.budget,
            seed: a.seed,
            report: a.report,
        },
        Command::Eval(a) => Stage::Eval {
            env: load_env(&a.env)?,
            embed: a.embed,
            dynamics: a.dynamics,
            dataset: a.dataset,
            plan_report: a.plan_report,
            pairs: a.pairs,
            goals: a.goals,
            seed: a.seed.unwrap_or(0),
            out: a.out,
        },
        Command::Pipeline(_) => unreachable!("handled by the caller"),
    })
}

/// One line per output plus a short digest of what was written.
fn summarise(stage: &Stage, outcome: &Outcome) -> Result<()> {
    let m = outcome.manifest();
    let verb = if outcome.skipped() {
        "up to date"
    } else {
        "wrote"
    };
    for a in &m.outputs {
        println!(
            "{}: {verb} {} (sha256 {})",
            m.command,
            a.path.display(),
            &a.sha256[..12]
        );
    }
    match stage {
        Stage::Plan { report, env, .. } | Stage::GcslEval { report, env, .. } => {
            let reports = read_reports(report)?;
            let ok = reports.iter().filter(|r| r.success).count();
            println!(
                "{}: {ok}/{} episodes reached the goal",
                m.command,
                reports.len()
            );
            if env.is_enumerable() {
                let mad = compute_mad(env, Exec::default())?;
                let r = evaluate_planner(&reports, &mad)?;
                if let Some(ratio) = r.mean_path_ratio {
                    println!("{}: mean steps / shortest path = {ratio:.3}", m.command);
                }
            }
        }
        Stage::Eval { out, .. } => {
            let text = std::fs::read_to_string(out)?;
            EvalReport::parse(&text)?;
            print!("{text}");
        }
        _ => {}
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };

    if let Command::Pipeline(a) = cli.command {
        let cfg = PipelineConfig::load(&a.config)?;
        if a.force {
            for stage in cfg.stages() {
                for out in stage.outputs() {
                    let _ = std::fs::remove_file(madist::pipeline::RunManifest::path_for(&out));
                }
            }
        }
        let outcomes = run_pipeline(&cfg, exec)?;
        for (stage, (_, outcome)) in cfg.stages().iter().zip(&outcomes) {
            summarise(stage, outcome)?;
        }
        return Ok(());
    }

    let stage = stage_for(cli.command)?;
    for out in stage.outputs() {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !dir.is_dir() {
                bail!("output directory {} does not exist", dir.display());
            }
        }
    }
    let outcome = stage.run(exec, false)?;
    summarise(&stage, &outcome)
}
