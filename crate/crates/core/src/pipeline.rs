//! Stage runner behind the command line: every stage reads and writes
//! files, records a [`RunManifest`] next to each output, and can be skipped
//! when its inputs and parameters are unchanged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collect::{collect, coverage, RandomPolicy};
use crate::embed::{train_embedding, EmbedConfig, EmbeddingModel, TrainRecord};
use crate::envs::{Cell, EnvSpec, State, HILL_GOAL_POS};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gcsl::{gcsl_report, gcsl_train, GcslConfig, GcslPolicy};
use crate::latent::{
    one_step_error, plan_dist_episode, train_dynamics, DynamicsConfig, LatentDynamics, PlanConfig,
};
use crate::oracle::{
    compute_mad, evaluate_embedding, evaluate_planner, EpisodeReport, EvalReport, PairSelection,
};
use crate::shaping::{
    q_learn, save_qtable, write_curve, QConfig, QTablePolicy, ShapedReward, ZeroPotential,
};
use crate::trajdata::{extract_all_pairs, load_dataset, save_dataset, PrioritizedBuffer};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Artifact {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Provenance of one stage run, written as `<output>.manifest.json` beside
/// every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The full stage parameters, including defaults.
    pub flags: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    /// Hash of the command, flags and input hashes; equal keys mean the
    /// stage would produce the same outputs.
    pub stage_key: String,
    pub duration_secs: f64,
    pub version: String,
}

impl RunManifest {
    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }

    fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serialisable");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// How `collect` picks actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectPolicy {
    Random,
    Qtable { path: PathBuf, epsilon: f64 },
}

/// One unit of work with explicit file inputs and outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
pub enum Stage {
    Collect {
        env: EnvSpec,
        policy: CollectPolicy,
        n_traj: usize,
        seed: u64,
        out: PathBuf,
    },
    TrainEmbed {
        dataset: PathBuf,
        config: EmbedConfig,
        out: PathBuf,
        log: Option<PathBuf>,
    },
    TrainDyn {
        dataset: PathBuf,
        embed: PathBuf,
        config: DynamicsConfig,
        out: PathBuf,
        log: Option<PathBuf>,
    },
    Plan {
        env: EnvSpec,
        embed: PathBuf,
        dynamics: PathBuf,
        goals: usize,
        config: PlanConfig,
        report: PathBuf,
    },
    ShapeTrain {
        env: EnvSpec,
        /// Required when `shaped`.
        embed: Option<PathBuf>,
        goal: Cell,
        episodes: usize,
        shaped: bool,
        q: QConfig,
        seed: u64,
        curve: PathBuf,
        qtable: Option<PathBuf>,
    },
    GcslTrain {
        env: EnvSpec,
        dataset: PathBuf,
        config: GcslConfig,
        out: PathBuf,
        log: Option<PathBuf>,
    },
    GcslEval {
        env: EnvSpec,
        policy: PathBuf,
        embed: PathBuf,
        goals: usize,
        budget: usize,
        seed: u64,
        report: PathBuf,
    },
    Eval {
        env: EnvSpec,
        embed: PathBuf,
        dynamics: Option<PathBuf>,
        dataset: Option<PathBuf>,
        plan_report: Option<PathBuf>,
        /// Random pair count, or every pair when unset.
        pairs: Option<usize>,
        goals: usize,
        seed: u64,
        out: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Ran(RunManifest),
    Skipped(RunManifest),
}

impl Outcome {
    pub fn manifest(&self) -> &RunManifest {
        match self {
            Outcome::Ran(m) | Outcome::Skipped(m) => m,
        }
    }

    pub fn skipped(&self) -> bool {
        matches!(self, Outcome::Skipped(_))
    }
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Collect { .. } => "collect",
            Stage::TrainEmbed { .. } => "train-embed",
            Stage::TrainDyn { .. } => "train-dyn",
            Stage::Plan { .. } => "plan",
            Stage::ShapeTrain { .. } => "shape-train",
            Stage::GcslTrain { .. } => "gcsl-train",
            Stage::GcslEval { .. } => "gcsl-eval",
            Stage::Eval { .. } => "eval",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Stage::Collect { seed, .. }
            | Stage::ShapeTrain { seed, .. }
            | Stage::GcslEval { seed, .. }
            | Stage::Eval { seed, .. } => Some(*seed),
            Stage::TrainEmbed { config, .. } => Some(config.seed),
            Stage::TrainDyn { config, .. } => Some(config.seed),
            Stage::Plan { config, .. } => Some(config.seed),
            Stage::GcslTrain { config, .. } => Some(config.seed),
        }
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        let mut v = Vec::new();
        match self {
            Stage::Collect { policy, .. } => {
                if let CollectPolicy::Qtable { path, .. } = policy {
                    v.push(path.clone());
                }
            }
            Stage::TrainEmbed { dataset, .. } | Stage::GcslTrain { dataset, .. } => {
                v.push(dataset.clone())
            }
            Stage::TrainDyn { dataset, embed, .. } => v.extend([dataset.clone(), embed.clone()]),
            Stage::Plan {
                embed, dynamics, ..
            } => v.extend([embed.clone(), dynamics.clone()]),
            Stage::ShapeTrain { embed, .. } => v.extend(embed.iter().cloned()),
            Stage::GcslEval { policy, embed, .. } => v.extend([policy.clone(), embed.clone()]),
            Stage::Eval {
                embed,
                dynamics,
                dataset,
                plan_report,
                ..
            } => {
                v.push(embed.clone());
                v.extend(dynamics.iter().chain(dataset).chain(plan_report).cloned());
            }
        }
        v
    }

    pub fn outputs(&self) -> Vec<PathBuf> {
        match self {
            Stage::Collect { out, .. } | Stage::Eval { out, .. } => vec![out.clone()],
            Stage::TrainEmbed { out, log, .. }
            | Stage::TrainDyn { out, log, .. }
            | Stage::GcslTrain { out, log, .. } => {
                std::iter::once(out.clone()).chain(log.clone()).collect()
            }
            Stage::Plan { report, .. } | Stage::GcslEval { report, .. } => vec![report.clone()],
            Stage::ShapeTrain { curve, qtable, .. } => std::iter::once(curve.clone())
                .chain(qtable.clone())
                .collect(),
        }
    }

    fn key(&self, inputs: &[Artifact]) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("serialisable"));
        for a in inputs {
            h.update(a.sha256.as_bytes());
        }
        format!("{:x}", h.finalize())
    }

    /// Runs the stage and writes a manifest beside each output. With
    /// `skip_current`, a stage whose recorded key and output hashes still
    /// match is not re-run.
    pub fn run(&self, exec: Exec, skip_current: bool) -> Result<Outcome> {
        let inputs = self
            .inputs()
            .iter()
            .map(|p| Artifact::of(p))
            .collect::<Result<Vec<_>>>()?;
        let key = self.key(&inputs);
        let outputs = self.outputs();
        if skip_current {
            if let Some(m) = current_manifest(&outputs, &key) {
                log::info!("{}: up to date, skipped", self.name());
                return Ok(Outcome::Skipped(m));
            }
        }
        let start = Instant::now();
        self.execute(exec)
            .map_err(|e| Error::Validation(format!("stage `{}` failed: {e}", self.name())))?;
        let manifest = RunManifest {
            command: self.name().to_string(),
            flags: serde_json::to_value(self).expect("serialisable"),
            seed: self.seed(),
            inputs,
            outputs: outputs
                .iter()
                .map(|p| Artifact::of(p))
                .collect::<Result<_>>()?,
            stage_key: key,
            duration_secs: start.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        for out in &outputs {
            manifest.save(&RunManifest::path_for(out))?;
        }
        Ok(Outcome::Ran(manifest))
    }

    fn execute(&self, exec: Exec) -> Result<()> {
        match self {
            Stage::Collect {
                env,
                policy,
                n_traj,
                seed,
                out,
            } => {
                let trajs = match policy {
                    CollectPolicy::Random => collect(
                        env,
                        &RandomPolicy {
                            num_actions: env.num_actions(),
                        },
                        *n_traj,
                        *seed,
                    )?,
                    CollectPolicy::Qtable { path, epsilon } => {
                        collect(env, &QTablePolicy::load(path, *epsilon)?, *n_traj, *seed)?
                    }
                };
                if env.is_enumerable() {
                    log::info!("collect: coverage {:.4}", coverage(env, &trajs)?);
                }
                save_dataset(&trajs, out)
            }
            Stage::TrainEmbed {
                dataset,
                config,
                out,
                log,
            } => {
                let trajs = load_dataset(dataset)?;
                let config = EmbedConfig {
                    exec,
                    ..config.clone()
                };
                let mut buffer = PrioritizedBuffer::new(config.per_alpha, config.per_eps)?;
                let (model, records) = train_embedding(&trajs, &config, &mut buffer)?;
                model.save(out)?;
                write_log(log.as_deref(), &records)
            }
            Stage::TrainDyn {
                dataset,
                embed,
                config,
                out,
                log,
            } => {
                let trajs = load_dataset(dataset)?;
                let embedding = load_embedding(embed, exec)?;
                let num_actions = dataset_actions(&trajs)?;
                let config = DynamicsConfig {
                    exec,
                    ..config.clone()
                };
                let (model, records) = train_dynamics(&trajs, &embedding, num_actions, &config)?;
                model.save(out)?;
                write_log(log.as_deref(), &records)
            }
            Stage::Plan {
                env,
                embed,
                dynamics,
                goals,
                config,
                report,
            } => {
                let embedding = load_embedding(embed, exec)?;
                let model = LatentDynamics::load(dynamics)?;
                let config = PlanConfig {
                    exec,
                    ..config.clone()
                };
                let reports = plan_tasks(env, &embedding, &model, *goals, &config)?;
                write_reports(report, &reports)
            }
            Stage::ShapeTrain {
                env,
                embed,
                goal,
                episodes,
                shaped,
                q,
                seed,
                curve,
                qtable,
            } => {
                let env = env.clone().with_goal(*goal);
                env.validate()?;
                let (table, stats) = if *shaped {
                    let path = embed.as_ref().ok_or_else(|| {
                        Error::Config("shaped training needs an embedding".into())
                    })?;
                    let goal_state = env.goal_state().expect("goal set");
                    let sr = ShapedReward::new(load_embedding(path, exec)?, goal_state, q.gamma)?;
                    q_learn(&env, Some(&sr), *episodes, q, *seed)?
                } else {
                    q_learn::<ZeroPotential>(&env, None, *episodes, q, *seed)?
                };
                write_curve(&stats, curve)?;
                match qtable {
                    Some(path) => save_qtable(&env, &table, path),
                    None => Ok(()),
                }
            }
            Stage::GcslTrain {
                env,
                dataset,
                config,
                out,
                log,
            } => {
                let trajs = load_dataset(dataset)?;
                let config = GcslConfig {
                    exec,
                    ..config.clone()
                };
                let (policy, records) = gcsl_train(&trajs, env, &config)?;
                policy.save(out)?;
                write_log(log.as_deref(), &records)
            }
            Stage::GcslEval {
                env,
                policy,
                embed,
                goals,
                budget,
                seed,
                report,
            } => {
                let policy = GcslPolicy::load(policy)?;
                let embedding = load_embedding(embed, exec)?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let reports = (0..*goals)
                    .map(|_| {
                        let (start, goal) = sample_task(env, &mut rng)?;
                        gcsl_report(env, &policy, &embedding, &start, &goal, *budget)
                    })
                    .collect::<Result<Vec<_>>>()?;
                write_reports(report, &reports)
            }
            Stage::Eval {
                env,
                embed,
                dynamics,
                dataset,
                plan_report,
                pairs,
                goals,
                seed,
                out,
            } => {
                let embedding = load_embedding(embed, exec)?;
                let trajs = dataset.as_ref().map(load_dataset).transpose()?;
                let model = dynamics.as_ref().map(LatentDynamics::load).transpose()?;
                let mut report = EvalReport::default();
                let mad = if env.is_enumerable() {
                    Some(compute_mad(env, exec)?)
                } else {
                    None
                };
                if let Some(mad) = &mad {
                    let selection = match pairs {
                        None => PairSelection::All,
                        Some(count) => PairSelection::Sampled {
                            count: *count,
                            seed: *seed,
                        },
                    };
                    let training_pairs = trajs
                        .as_ref()
                        .map(|t| extract_all_pairs(t, embedding.config.max_gap));
                    report =
                        evaluate_embedding(&embedding, mad, selection, training_pairs.as_deref())?;
                    let episodes = match (plan_report, &model) {
                        (Some(path), _) => Some(read_reports(path)?),
                        (None, Some(model)) => {
                            let config = PlanConfig {
                                seed: *seed,
                                exec,
                                ..PlanConfig::default()
                            };
                            Some(plan_tasks(env, &embedding, model, *goals, &config)?)
                        }
                        (None, None) => None,
                    };
                    if let Some(episodes) = episodes {
                        let planner = evaluate_planner(&episodes, mad)?;
                        report.success_rate = planner.success_rate;
                        report.mean_path_ratio = planner.mean_path_ratio;
                    }
                }
                if let Some(trajs) = &trajs {
                    report.adjacent_distance =
                        Some(crate::embed::mean_adjacent_distance(&embedding, trajs)?);
                    if let Some(model) = &model {
                        report.dynamics_error = Some(one_step_error(model, &embedding, trajs)?);
                    }
                }
                report.save(out)
            }
        }
    }
}

fn current_manifest(outputs: &[PathBuf], key: &str) -> Option<RunManifest> {
    let first = outputs.first()?;
    let m = RunManifest::load(&RunManifest::path_for(first)).ok()?;
    if m.stage_key != key || m.outputs.len() != outputs.len() {
        return None;
    }
    for (art, path) in m.outputs.iter().zip(outputs) {
        if &art.path != path || sha256_file(path).ok()? != art.sha256 {
            return None;
        }
    }
    Some(m)
}

pub fn load_embedding(path: &Path, exec: Exec) -> Result<EmbeddingModel> {
    let mut model = EmbeddingModel::load(path)?;
    model.config.exec = exec;
    Ok(model)
}

fn dataset_actions(trajs: &[crate::trajdata::Trajectory]) -> Result<usize> {
    trajs
        .iter()
        .flat_map(|t| t.actions.iter())
        .map(|a| a.0 + 1)
        .max()
        .ok_or_else(|| Error::Validation("dataset has no transitions".into()))
}

fn write_log(path: Option<&Path>, records: &[TrainRecord]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let mut out = String::from("step loss mean_violation\n");
    for r in records {
        writeln!(out, "{} {:?} {:?}", r.step, r.loss, r.mean_violation).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_reports(path: &Path, reports: &[EpisodeReport]) -> Result<()> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("finite report"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: &Path) -> Result<Vec<EpisodeReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}

/// A start from the environment's reset distribution and a goal: uniform
/// over enumerable states, or the hilltop for the hill task.
pub fn sample_task<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Result<(State, State)> {
    let start = spec.reset_with(rng)?;
    let goal = if spec.is_enumerable() {
        let states = spec.enumerate_states()?;
        states[rng.gen_range(0..states.len())].clone()
    } else {
        State(vec![HILL_GOAL_POS, 0.0])
    };
    Ok((start, goal))
}

/// Plans toward `goals` random tasks; episode `k` uses its own seed drawn
/// from `config.seed`.
pub fn plan_tasks(
    spec: &EnvSpec,
    embedding: &EmbeddingModel,
    model: &LatentDynamics,
    goals: usize,
    config: &PlanConfig,
) -> Result<Vec<EpisodeReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..goals)
        .map(|_| {
            let (start, goal) = sample_task(spec, &mut rng)?;
            let episode_config = PlanConfig {
                seed: rng.gen(),
                ..config.clone()
            };
            Ok(
                plan_dist_episode(spec, embedding, model, &start, &goal, &episode_config)?
                    .report(&goal),
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectSection {
    pub n_traj: usize,
}

impl Default for CollectSection {
    fn default() -> Self {
        CollectSection { n_traj: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub goals: usize,
    pub horizon: usize,
    pub num_sequences: usize,
    pub goal_eps: Option<f64>,
    pub budget: usize,
}

impl Default for PlanSection {
    fn default() -> Self {
        let p = PlanConfig::default();
        PlanSection {
            goals: 100,
            horizon: p.horizon,
            num_sequences: p.num_sequences,
            goal_eps: p.goal_eps,
            budget: p.max_env_steps,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Random pair count; every pair when unset.
    pub pairs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcslSection {
    #[serde(default = "default_goals")]
    pub goals: usize,
    #[serde(default)]
    pub train: GcslConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapingSection {
    pub goal: Cell,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub q: QConfig,
}

fn default_goals() -> usize {
    100
}

fn default_episodes() -> usize {
    500
}

/// Whole-pipeline configuration. One `seed` overrides the seed of every
/// stage; relative `out_dir` is resolved against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub env: EnvSpec,
    #[serde(default)]
    pub collect: CollectSection,
    #[serde(default)]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub gcsl: Option<GcslSection>,
    pub shaping: Option<ShapingSection>,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.env.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if cfg.out_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    /// The stages in execution order.
    pub fn stages(&self) -> Vec<Stage> {
        let dir = &self.out_dir;
        let seed = self.seed;
        let dataset = dir.join("dataset.jsonl");
        let embed = dir.join("embed.ckpt");
        let dynamics = dir.join("dynamics.ckpt");
        let plan_report = dir.join("plan_report.jsonl");
        let mut stages = vec![
            Stage::Collect {
                env: self.env.clone(),
                policy: CollectPolicy::Random,
                n_traj: self.collect.n_traj,
                seed,
                out: dataset.clone(),
            },
            Stage::TrainEmbed {
                dataset: dataset.clone(),
                config: EmbedConfig {
                    seed,
                    ..self.embed.clone()
                },
                out: embed.clone(),
                log: Some(dir.join("embed_log.txt")),
            },
            Stage::TrainDyn {
                dataset: dataset.clone(),
                embed: embed.clone(),
                config: DynamicsConfig {
                    seed,
                    ..self.dynamics.clone()
                },
                out: dynamics.clone(),
                log: Some(dir.join("dynamics_log.txt")),
            },
            Stage::Plan {
                env: self.env.clone(),
                embed: embed.clone(),
                dynamics: dynamics.clone(),
                goals: self.plan.goals,
                config: PlanConfig {
                    horizon: self.plan.horizon,
                    num_sequences: self.plan.num_sequences,
                    goal_eps: self.plan.goal_eps,
                    max_env_steps: self.plan.budget,
                    seed,
                    exec: Exec::default(),
                },
                report: plan_report.clone(),
            },
            Stage::Eval {
                env: self.env.clone(),
                embed: embed.clone(),
                dynamics: Some(dynamics),
                dataset: Some(dataset.clone()),
                plan_report: Some(plan_report),
                pairs: self.eval.pairs,
                goals: self.plan.goals,
                seed,
                out: dir.join("eval_report.txt"),
            },
        ];
        if let Some(g) = &self.gcsl {
            let policy = dir.join("gcsl.ckpt");
            stages.push(Stage::GcslTrain {
                env: self.env.clone(),
                dataset: dataset.clone(),
                config: GcslConfig {
                    seed,
                    ..g.train.clone()
                },
                out: policy.clone(),
                log: Some(dir.join("gcsl_log.txt")),
            });
            stages.push(Stage::GcslEval {
                env: self.env.clone(),
                policy,
                embed: embed.clone(),
                goals: g.goals,
                budget: self.plan.budget,
                seed,
                report: dir.join("gcsl_report.jsonl"),
            });
        }
        if let Some(s) = &self.shaping {
            for shaped in [false, true] {
                let tag = if shaped { "shaped" } else { "unshaped" };
                stages.push(Stage::ShapeTrain {
                    env: self.env.clone(),
                    embed: shaped.then(|| embed.clone()),
                    goal: s.goal,
                    episodes: s.episodes,
                    shaped,
                    q: s.q.clone(),
                    seed,
                    curve: dir.join(format!("curve_{tag}.txt")),
                    qtable: None,
                });
            }
        }
        stages
    }
}

/// Runs every stage in order, skipping stages whose outputs are current.
/// The first failure aborts with the stage name.
pub fn run_pipeline(config: &PipelineConfig, exec: Exec) -> Result<Vec<(String, Outcome)>> {
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    config
        .stages()
        .into_iter()
        .map(|stage| {
            let outcome = stage.run(exec, true)?;
            Ok((stage.name().to_string(), outcome))
        })
        .collect()
}

/// Stage name to the hashes of every artifact it produced, for comparing
/// runs.
pub fn artifact_digest(outcomes: &[(String, Outcome)]) -> BTreeMap<String, String> {
    outcomes
        .iter()
        .flat_map(|(_, o)| o.manifest().outputs.iter())
        .map(|a| {
            let name = a
                .path
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            (name, a.sha256.clone())
        })
        .collect()
}
