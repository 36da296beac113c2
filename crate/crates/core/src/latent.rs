//! Latent transition model `rho(z, a) ~ phi(s')` and Plan-Dist, a
//! random-shooting MPC planner that scores action sequences by their
//! cumulative latent distance to the goal.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{mean_adjacent_distance, EmbeddingModel, TrainRecord, CHUNK_ROWS};
use crate::envs::{Action, EnvSpec, State, StateKey};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::neural::{
    prefixed_views, Activation, AdamW, AdamWConfig, Checkpoint, ForwardCache, Mlp, MlpGrads,
    Parameters,
};
use crate::oracle::EpisodeReport;
use crate::trajdata::Trajectory;

/// `rho(z, a) = head([state_branch(z), action_branch(onehot(a))])`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDynamics {
    pub state_branch: Mlp,
    pub action_branch: Mlp,
    pub head: Mlp,
    /// Mean embedded distance between adjacent training states, when known.
    /// Half of it is the default goal tolerance of the planner.
    pub adjacent_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsGrads {
    pub state_branch: MlpGrads,
    pub action_branch: MlpGrads,
    pub head: MlpGrads,
}

pub struct DynamicsCache {
    state: ForwardCache,
    action: ForwardCache,
    head: ForwardCache,
}

impl DynamicsCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.head.output
    }
}

fn one_hot(actions: &[Action], num_actions: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((actions.len(), num_actions));
    for (i, a) in actions.iter().enumerate() {
        if a.0 >= num_actions {
            return Err(Error::IndexOutOfRange {
                index: a.0,
                len: num_actions,
            });
        }
        m[[i, a.0]] = 1.0;
    }
    Ok(m)
}

impl LatentDynamics {
    pub fn new<R: Rng + ?Sized>(
        embed_dim: usize,
        num_actions: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let sel = Activation::Selu;
        Ok(LatentDynamics {
            state_branch: Mlp::new(&[embed_dim, hidden, hidden], sel, sel, rng)?,
            action_branch: Mlp::new(&[num_actions, hidden, hidden], sel, sel, rng)?,
            head: Mlp::new(
                &[2 * hidden, hidden, hidden, embed_dim],
                sel,
                Activation::Identity,
                rng,
            )?,
            adjacent_distance: None,
        })
    }

    pub fn from_parts(state_branch: Mlp, action_branch: Mlp, head: Mlp) -> Result<Self> {
        let joint = state_branch.output_dim() + action_branch.output_dim();
        if head.input_dim() != joint {
            return Err(Error::Dimension {
                expected: joint,
                got: head.input_dim(),
            });
        }
        if head.output_dim() != state_branch.input_dim() {
            return Err(Error::Dimension {
                expected: state_branch.input_dim(),
                got: head.output_dim(),
            });
        }
        Ok(LatentDynamics {
            state_branch,
            action_branch,
            head,
            adjacent_distance: None,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.state_branch.input_dim()
    }

    pub fn num_actions(&self) -> usize {
        self.action_branch.input_dim()
    }

    /// Predicted next embedding.
    pub fn predict(&self, z: &[f64], a: Action) -> Result<Vec<f64>> {
        if a.0 >= self.num_actions() {
            return Err(Error::IndexOutOfRange {
                index: a.0,
                len: self.num_actions(),
            });
        }
        let mut onehot = vec![0.0; self.num_actions()];
        onehot[a.0] = 1.0;
        let mut joint = self.state_branch.forward(z)?;
        joint.extend(self.action_branch.forward(&onehot)?);
        self.head.forward(&joint)
    }

    /// `[z_1, ..., z_H]` by recursive application of the model.
    pub fn rollout(&self, z0: &[f64], actions: &[Action]) -> Result<Vec<Vec<f64>>> {
        if z0.len() != self.embed_dim() {
            return Err(Error::Dimension {
                expected: self.embed_dim(),
                got: z0.len(),
            });
        }
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(actions.len());
        for &a in actions {
            let next = self.predict(out.last().map_or(z0, |z| z), a)?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn forward_batch(&self, z: ArrayView2<f64>, actions: &[Action]) -> Result<DynamicsCache> {
        if z.nrows() != actions.len() {
            return Err(Error::Dimension {
                expected: z.nrows(),
                got: actions.len(),
            });
        }
        let state = self.state_branch.forward_batch(z)?;
        let action = self
            .action_branch
            .forward_batch(one_hot(actions, self.num_actions())?.view())?;
        let joint = concatenate(Axis(1), &[state.output.view(), action.output.view()])
            .expect("matching rows");
        let head = self.head.forward_batch(joint.view())?;
        Ok(DynamicsCache {
            state,
            action,
            head,
        })
    }

    pub fn backward(
        &self,
        cache: &DynamicsCache,
        upstream: ArrayView2<f64>,
    ) -> Result<DynamicsGrads> {
        let (head, d_joint) = self.head.backward(&cache.head, upstream)?;
        let split = self.state_branch.output_dim();
        let (state_branch, _) = self
            .state_branch
            .backward(&cache.state, d_joint.slice(s![.., ..split]))?;
        let (action_branch, _) = self
            .action_branch
            .backward(&cache.action, d_joint.slice(s![.., split..]))?;
        Ok(DynamicsGrads {
            state_branch,
            action_branch,
            head,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new("dynamics");
        if let Some(d) = self.adjacent_distance {
            ckpt = ckpt.with_meta("adjacent_distance", format!("{d:?}"));
        }
        ckpt.with_net("state_branch", self.state_branch.clone())
            .with_net("action_branch", self.action_branch.clone())
            .with_net("head", self.head.clone())
    }

    pub fn from_checkpoint(mut ckpt: Checkpoint) -> Result<Self> {
        ckpt.expect_kind("dynamics")?;
        let adjacent_distance = match ckpt.meta("adjacent_distance") {
            Some(_) => Some(ckpt.require_meta::<f64>("adjacent_distance")?),
            None => None,
        };
        let state_branch = ckpt.take_net("state_branch")?;
        let action_branch = ckpt.take_net("action_branch")?;
        let head = ckpt.take_net("head")?;
        let mut model = Self::from_parts(state_branch, action_branch, head)?;
        model.adjacent_distance = adjacent_distance;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_checkpoint(Checkpoint::load(path)?).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

impl Parameters for LatentDynamics {
    fn param_views(&self) -> Vec<(String, &[f64])> {
        prefixed_views(&[
            ("state_branch", &self.state_branch),
            ("action_branch", &self.action_branch),
            ("head", &self.head),
        ])
    }

    fn param_views_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.state_branch.param_views_mut();
        v.extend(self.action_branch.param_views_mut());
        v.extend(self.head.param_views_mut());
        v
    }
}

impl Parameters for DynamicsGrads {
    fn param_views(&self) -> Vec<(String, &[f64])> {
        prefixed_views(&[
            ("state_branch", &self.state_branch),
            ("action_branch", &self.action_branch),
            ("head", &self.head),
        ])
    }

    fn param_views_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.state_branch.param_views_mut();
        v.extend(self.action_branch.param_views_mut());
        v.extend(self.head.param_views_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub hidden: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            hidden: 128,
            train_steps: 10_000,
            batch_size: 512,
            lr: 5e-4,
            weight_decay: 0.0,
            seed: 0,
            log_every: 100,
            exec: Exec::default(),
        }
    }
}

/// Embedded `(z, a, z')` training triples. `z` holds each distinct state
/// once; row `r` of the `(state, action)` inputs is `(z[row_state[r]],
/// actions[r])`, and `input[i]` maps triple `i` to its row.
pub struct LatentTriples {
    pub z: Array2<f64>,
    pub row_state: Vec<usize>,
    pub actions: Vec<Action>,
    pub input: Vec<usize>,
    pub target: Array2<f64>,
}

impl LatentTriples {
    pub fn new(trajs: &[Trajectory], embedding: &EmbeddingModel) -> Result<Self> {
        let mut state_ids: HashMap<StateKey, usize> = HashMap::new();
        let mut row_ids: HashMap<(usize, Action), usize> = HashMap::new();
        let mut uniq_states: Vec<State> = Vec::new();
        let mut row_state = Vec::new();
        let mut actions = Vec::new();
        let mut input = Vec::new();
        let mut next_states = Vec::new();
        for t in trajs {
            for (s, a, next) in t.transitions() {
                let fresh = uniq_states.len();
                let sid = *state_ids.entry(s.key()).or_insert_with(|| {
                    uniq_states.push(s.clone());
                    fresh
                });
                let fresh = row_state.len();
                let row = *row_ids.entry((sid, a)).or_insert_with(|| {
                    row_state.push(sid);
                    actions.push(a);
                    fresh
                });
                input.push(row);
                next_states.push(next.clone());
            }
        }
        if input.is_empty() {
            return Err(Error::Validation("dataset has no transitions".into()));
        }
        Ok(LatentTriples {
            z: embedding.embed_batch(&uniq_states)?,
            row_state,
            actions,
            input,
            target: embedding.embed_batch(&next_states)?,
        })
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// Model predictions for every `(state, action)` row.
    pub fn predict_rows(&self, model: &LatentDynamics) -> Result<Array2<f64>> {
        let z = self.z.select(Axis(0), &self.row_state);
        Ok(model.forward_batch(z.view(), &self.actions)?.head.output)
    }
}

fn dedup_indices(items: impl Iterator<Item = usize>) -> (Vec<usize>, Vec<usize>) {
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut uniq = Vec::new();
    let slots = items
        .map(|v| {
            let next = uniq.len();
            *local.entry(v).or_insert_with(|| {
                uniq.push(v);
                next
            })
        })
        .collect();
    (uniq, slots)
}

fn chunk_rows<T>(parts: &[T], rows: impl Fn(&T) -> usize) -> Vec<std::ops::Range<usize>> {
    let mut lo = 0;
    parts
        .iter()
        .map(|p| {
            let r = lo..lo + rows(p);
            lo = r.end;
            r
        })
        .collect()
}

/// Squared-error loss over a batch of triple indices, with gradients. Each
/// distinct state goes through the state branch once and each action through
/// the action branch once; their gradients are accumulated in row order.
pub fn dynamics_loss(
    model: &LatentDynamics,
    data: &LatentTriples,
    batch: &[usize],
    exec: Exec,
) -> Result<(f64, DynamicsGrads)> {
    let (rows, row_slot) = dedup_indices(batch.iter().map(|&i| data.input[i]));
    let (states, state_slot) = dedup_indices(rows.iter().map(|&r| data.row_state[r]));
    let na = model.num_actions();
    let hidden_s = model.state_branch.output_dim();

    let z = data.z.select(Axis(0), &states);
    let state_caches = exec
        .map_chunks(states.len(), CHUNK_ROWS, |r| {
            model.state_branch.forward_batch(z.slice(s![r, ..]))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let state_out: Vec<_> = state_caches.iter().map(|c| c.output.view()).collect();
    let state_out = concatenate(Axis(0), &state_out).expect("matching widths");
    let action_cache = model.action_branch.forward_batch(Array2::eye(na).view())?;

    let mut joint = Array2::zeros((rows.len(), model.head.input_dim()));
    for (k, &r) in rows.iter().enumerate() {
        let mut row = joint.row_mut(k);
        row.slice_mut(s![..hidden_s])
            .assign(&state_out.row(state_slot[k]));
        row.slice_mut(s![hidden_s..])
            .assign(&action_cache.output.row(data.actions[r].0));
    }
    let head_caches = exec
        .map_chunks(rows.len(), CHUNK_ROWS, |r| {
            model.head.forward_batch(joint.slice(s![r, ..]))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let k = model.embed_dim();
    let mut upstream = Array2::<f64>::zeros((rows.len(), k));
    let mut loss = 0.0;
    for (&i, &u) in batch.iter().zip(&row_slot) {
        let pred = head_caches[u / CHUNK_ROWS].output.row(u % CHUNK_ROWS);
        let target = data.target.row(i);
        let mut up = upstream.row_mut(u);
        for ((g, p), t) in up.iter_mut().zip(pred).zip(target) {
            let e = p - t;
            loss += e * e;
            *g += 2.0 * e;
        }
    }

    let head_ranges = chunk_rows(&head_caches, |c| c.output.nrows());
    let head_parts = exec
        .map_range(head_caches.len(), |c| {
            model.head.backward(
                &head_caches[c],
                upstream.slice(s![head_ranges[c].clone(), ..]),
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut d_state = Array2::<f64>::zeros((states.len(), hidden_s));
    let mut d_action = Array2::<f64>::zeros((na, model.action_branch.output_dim()));
    let mut head_grads = Vec::with_capacity(head_parts.len());
    for (c, (g, d_joint)) in head_parts.into_iter().enumerate() {
        for (off, row) in d_joint.rows().into_iter().enumerate() {
            let k = head_ranges[c].start + off;
            let mut ds = d_state.row_mut(state_slot[k]);
            ds += &row.slice(s![..hidden_s]);
            let mut da = d_action.row_mut(data.actions[rows[k]].0);
            da += &row.slice(s![hidden_s..]);
        }
        head_grads.push(g);
    }

    let state_ranges = chunk_rows(&state_caches, |c| c.output.nrows());
    let state_grads = exec
        .map_range(state_caches.len(), |c| {
            model
                .state_branch
                .backward(
                    &state_caches[c],
                    d_state.slice(s![state_ranges[c].clone(), ..]),
                )
                .map(|(g, _)| g)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (action_branch, _) = model
        .action_branch
        .backward(&action_cache, d_action.view())?;

    Ok((
        loss,
        DynamicsGrads {
            state_branch: MlpGrads::sum_ordered(state_grads).expect("non-empty batch"),
            action_branch,
            head: MlpGrads::sum_ordered(head_grads).expect("non-empty batch"),
        },
    ))
}

/// Fits the transition model on every `(s, a, s')` in `trajs` with the
/// embedding held fixed.
pub fn train_dynamics(
    trajs: &[Trajectory],
    embedding: &EmbeddingModel,
    num_actions: usize,
    config: &DynamicsConfig,
) -> Result<(LatentDynamics, Vec<TrainRecord>)> {
    let data = LatentTriples::new(trajs, embedding)?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LatentDynamics::new(
        embedding.config.embed_dim,
        num_actions,
        config.hidden,
        &mut rng,
    )?;
    model.adjacent_distance = Some(mean_adjacent_distance(embedding, trajs)?);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::with_lr(config.lr)
    });
    let mut log = Vec::new();
    let (mut acc, mut acc_n) = (0.0, 0usize);
    for step in 1..=config.train_steps {
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.gen_range(0..data.len()))
            .collect();
        let (loss, grads) = dynamics_loss(&model, &data, &batch, config.exec)?;
        opt.step(&mut model, &grads)?;
        acc += loss / config.batch_size as f64;
        acc_n += 1;
        if config.log_every > 0 && (step % config.log_every == 0 || step == config.train_steps) {
            let rec = TrainRecord {
                step,
                loss: acc / acc_n as f64,
                mean_violation: 0.0,
            };
            log::debug!("dynamics step {}: loss {:.6}", rec.step, rec.loss);
            log.push(rec);
            (acc, acc_n) = (0.0, 0);
        }
    }
    Ok((model, log))
}

/// Mean `||rho(phi(s), a) - phi(s')||` under the embedding's norm.
pub fn one_step_error(
    model: &LatentDynamics,
    embedding: &EmbeddingModel,
    trajs: &[Trajectory],
) -> Result<f64> {
    let data = LatentTriples::new(trajs, embedding)?;
    let pred = data.predict_rows(model)?;
    let total: f64 = (0..data.len())
        .map(|i| {
            embedding.latent_distance(
                pred.row(data.input[i]).as_slice().expect("row"),
                data.target.row(i).as_slice().expect("row"),
            )
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Cumulative negative latent distance to `z_goal`, starting with the
/// current embedding and adding each predicted step.
pub fn score_latent(
    model: &LatentDynamics,
    embedding: &EmbeddingModel,
    z0: &[f64],
    z_goal: &[f64],
    actions: &[Action],
) -> Result<f64> {
    let mut r = -embedding.latent_distance(z0, z_goal);
    for z in model.rollout(z0, actions)? {
        r -= embedding.latent_distance(&z, z_goal);
    }
    Ok(r)
}

pub fn score_sequence(
    model: &LatentDynamics,
    embedding: &EmbeddingModel,
    s: &State,
    goal: &State,
    actions: &[Action],
) -> Result<f64> {
    score_latent(
        model,
        embedding,
        &embedding.embed(s)?,
        &embedding.embed(goal)?,
        actions,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub horizon: usize,
    pub num_sequences: usize,
    /// Embedded-distance goal tolerance for non-enumerable environments.
    /// Defaults to half the dynamics model's adjacent distance.
    pub goal_eps: Option<f64>,
    pub max_env_steps: usize,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            horizon: 5,
            num_sequences: 20,
            goal_eps: None,
            max_env_steps: 50,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.num_sequences == 0 {
            return Err(Error::Config(
                "horizon and num_sequences must be at least 1".into(),
            ));
        }
        if self.goal_eps.is_some_and(|e| e.is_nan() || e < 0.0) {
            return Err(Error::Config("goal_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// One planning decision: the winning sequence and its score.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanStep {
    pub sequence: Vec<Action>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanEpisode {
    pub trajectory: Trajectory,
    pub decisions: Vec<PlanStep>,
    pub success: bool,
    pub final_distance: f64,
}

impl PlanEpisode {
    pub fn report(&self, goal: &State) -> EpisodeReport {
        EpisodeReport {
            start: self.trajectory.states[0].clone(),
            goal: goal.clone(),
            steps: self.trajectory.len(),
            success: self.success,
            final_distance: self.final_distance,
        }
    }
}

/// Samples `N` uniform action sequences, scores them, and returns the first
/// one with the highest score.
pub fn choose_sequence<R: Rng + ?Sized>(
    model: &LatentDynamics,
    embedding: &EmbeddingModel,
    z: &[f64],
    z_goal: &[f64],
    config: &PlanConfig,
    rng: &mut R,
) -> Result<PlanStep> {
    let a = model.num_actions();
    let sequences: Vec<Vec<Action>> = (0..config.num_sequences)
        .map(|_| {
            (0..config.horizon)
                .map(|_| Action(rng.gen_range(0..a)))
                .collect()
        })
        .collect();
    let scores = config
        .exec
        .map(&sequences, |seq| {
            score_latent(model, embedding, z, z_goal, seq)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(PlanStep {
        sequence: sequences[best].clone(),
        score: scores[best],
    })
}

/// Runs Plan-Dist from `start` until the goal is reached, the environment
/// terminates, or `max_env_steps` actions have been taken. On enumerable
/// environments the goal test is exact state equality, otherwise embedded
/// distance `<= goal_eps`.
pub fn plan_dist_episode(
    spec: &EnvSpec,
    embedding: &EmbeddingModel,
    model: &LatentDynamics,
    start: &State,
    goal: &State,
    config: &PlanConfig,
) -> Result<PlanEpisode> {
    config.validate()?;
    if model.num_actions() != spec.num_actions() {
        return Err(Error::Dimension {
            expected: spec.num_actions(),
            got: model.num_actions(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let z_goal = embedding.embed(goal)?;
    let exact = spec.is_enumerable();
    let goal_eps = match config.goal_eps.or(model.adjacent_distance.map(|d| d / 2.0)) {
        Some(e) => e,
        None if exact => 0.0,
        None => {
            return Err(Error::Config(
                "goal_eps is required when the dynamics model has no adjacent distance".into(),
            ))
        }
    };
    let mut s = start.clone();
    let mut z = embedding.embed(&s)?;
    let mut states = vec![s.clone()];
    let mut actions = Vec::new();
    let mut decisions = Vec::new();
    let reached = |s: &State, z: &[f64]| {
        if exact {
            s == goal
        } else {
            embedding.latent_distance(z, &z_goal) <= goal_eps
        }
    };
    let mut success = reached(&s, &z);
    while !success && actions.len() < config.max_env_steps {
        let step = choose_sequence(model, embedding, &z, &z_goal, config, &mut rng)?;
        let a = step.sequence[0];
        decisions.push(step);
        let t = spec.step(&s, a);
        actions.push(a);
        states.push(t.next.clone());
        s = t.next;
        z = embedding.embed(&s)?;
        success = reached(&s, &z);
        if t.done {
            break;
        }
    }
    Ok(PlanEpisode {
        trajectory: Trajectory::new(states, actions)?,
        decisions,
        success,
        final_distance: embedding.latent_distance(&z, &z_goal),
    })
}
