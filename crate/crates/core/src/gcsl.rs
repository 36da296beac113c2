//! Goal-conditioned supervised learning baseline: behaviour cloning on
//! hindsight-relabelled sub-trajectories, with or without a horizon input.

use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingModel, TrainRecord, CHUNK_ROWS};
use crate::envs::{Action, EnvSpec, State};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::neural::{Activation, AdamW, AdamWConfig, Checkpoint, Mlp, MlpGrads};
use crate::oracle::EpisodeReport;
use crate::trajdata::Trajectory;

/// `(s, a, g, h)`: from `s`, action `a` was taken and `g` was reached `h`
/// steps later.
#[derive(Clone, Debug, PartialEq)]
pub struct RelabeledTuple {
    pub s: State,
    pub a: Action,
    pub g: State,
    pub h: usize,
}

/// Position of a relabelled tuple inside a dataset: trajectory `traj`,
/// start index `i`, goal index `i + h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TupleRef {
    pub traj: usize,
    pub i: usize,
    pub h: usize,
}

/// Every sub-trajectory of length `1..=max_gap` starting at each step. A
/// trajectory with `n` actions yields `n(n+1)/2` tuples when unbounded.
pub fn relabel_refs(trajs: &[Trajectory], max_gap: Option<usize>) -> Vec<TupleRef> {
    let mut out = Vec::new();
    for (traj, t) in trajs.iter().enumerate() {
        let n = t.len();
        for i in 0..n {
            let last = max_gap.map_or(n, |g| n.min(i + g));
            out.extend((i + 1..=last).map(|j| TupleRef { traj, i, h: j - i }));
        }
    }
    out
}

pub fn relabel(t: &Trajectory, max_gap: Option<usize>) -> Vec<RelabeledTuple> {
    relabel_refs(std::slice::from_ref(t), max_gap)
        .into_iter()
        .map(|r| RelabeledTuple {
            s: t.states[r.i].clone(),
            a: t.actions[r.i],
            g: t.states[r.i + r.h].clone(),
            h: r.h,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcslConfig {
    pub horizon_conditioned: bool,
    pub hidden: Vec<usize>,
    pub max_gap: Option<usize>,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for GcslConfig {
    fn default() -> Self {
        GcslConfig {
            horizon_conditioned: true,
            hidden: vec![128, 128],
            max_gap: None,
            train_steps: 5000,
            batch_size: 512,
            lr: 5e-4,
            weight_decay: 0.0,
            seed: 0,
            log_every: 100,
            exec: Exec::default(),
        }
    }
}

/// `pi(a | s, g[, h])` as logits of an MLP over `s ++ g [++ h / max_horizon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcslPolicy {
    pub net: Mlp,
    pub horizon_conditioned: bool,
    /// Horizon normaliser, the environment's episode budget.
    pub max_horizon: usize,
}

impl GcslPolicy {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        num_actions: usize,
        hidden: &[usize],
        horizon_conditioned: bool,
        max_horizon: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if max_horizon == 0 {
            return Err(Error::Config("max_horizon must be at least 1".into()));
        }
        let mut dims = vec![2 * state_dim + horizon_conditioned as usize];
        dims.extend(hidden);
        dims.push(num_actions);
        Ok(GcslPolicy {
            net: Mlp::new(&dims, Activation::Selu, Activation::Identity, rng)?,
            horizon_conditioned,
            max_horizon,
        })
    }

    pub fn state_dim(&self) -> usize {
        (self.net.input_dim() - self.horizon_conditioned as usize) / 2
    }

    pub fn num_actions(&self) -> usize {
        self.net.output_dim()
    }

    fn write_input(&self, s: &State, g: &State, h: usize, out: &mut [f64]) -> Result<()> {
        let d = self.state_dim();
        if s.dim() != d || g.dim() != d {
            return Err(Error::Dimension {
                expected: d,
                got: if s.dim() != d { s.dim() } else { g.dim() },
            });
        }
        out[..d].copy_from_slice(s.features());
        out[d..2 * d].copy_from_slice(g.features());
        if self.horizon_conditioned {
            out[2 * d] = h.min(self.max_horizon) as f64 / self.max_horizon as f64;
        }
        Ok(())
    }

    pub fn logits(&self, s: &State, g: &State, h: usize) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.net.input_dim()];
        self.write_input(s, g, h, &mut x)?;
        self.net.forward(&x)
    }

    pub fn probabilities(&self, s: &State, g: &State, h: usize) -> Result<Vec<f64>> {
        let mut p = self.logits(s, g, h)?;
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Argmax action, ties to the lowest index. `h` is ignored by a
    /// horizon-less policy.
    pub fn act(&self, s: &State, g: &State, h: usize) -> Result<Action> {
        let logits = self.logits(s, g, h)?;
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        Ok(Action(best))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("gcsl")
            .with_meta("horizon_conditioned", self.horizon_conditioned)
            .with_meta("max_horizon", self.max_horizon)
            .with_net("policy", self.net.clone())
    }

    pub fn from_checkpoint(mut ckpt: Checkpoint) -> Result<Self> {
        ckpt.expect_kind("gcsl")?;
        let horizon_conditioned = ckpt.require_meta("horizon_conditioned")?;
        let max_horizon: usize = ckpt.require_meta("max_horizon")?;
        let net = ckpt.take_net("policy")?;
        let extra = horizon_conditioned as usize;
        if net.input_dim() < extra + 2
            || !(net.input_dim() - extra).is_multiple_of(2)
            || max_horizon == 0
        {
            return Err(Error::Validation(format!(
                "policy input width {} does not fit a state/goal pair",
                net.input_dim()
            )));
        }
        Ok(GcslPolicy {
            net,
            horizon_conditioned,
            max_horizon,
        })
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

fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    x.iter_mut().for_each(|v| *v /= z);
}

/// Mean cross-entropy of the taken actions and its gradient.
pub fn cross_entropy(
    policy: &GcslPolicy,
    trajs: &[Trajectory],
    batch: &[TupleRef],
    exec: Exec,
) -> Result<(f64, MlpGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let width = policy.net.input_dim();
    let mut x = Array2::zeros((batch.len(), width));
    let mut targets = Vec::with_capacity(batch.len());
    for (row, r) in batch.iter().enumerate() {
        let t = trajs.get(r.traj).ok_or(Error::IndexOutOfRange {
            index: r.traj,
            len: trajs.len(),
        })?;
        if r.h == 0 || r.i + r.h >= t.states.len() {
            return Err(Error::Validation(format!(
                "tuple {r:?} lies outside its trajectory"
            )));
        }
        let mut out = x.row_mut(row);
        policy.write_input(
            &t.states[r.i],
            &t.states[r.i + r.h],
            r.h,
            out.as_slice_mut().expect("contiguous row"),
        )?;
        targets.push(t.actions[r.i].0);
    }
    let n = batch.len() as f64;
    let parts = exec
        .map_chunks(
            batch.len(),
            CHUNK_ROWS,
            |range| -> Result<(f64, MlpGrads)> {
                let cache = policy.net.forward_batch(x.slice(s![range.clone(), ..]))?;
                let mut upstream = cache.output.clone();
                let mut loss = 0.0;
                for (k, mut row) in upstream.rows_mut().into_iter().enumerate() {
                    let p = row.as_slice_mut().expect("contiguous row");
                    let a = targets[range.start + k];
                    let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + p.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    loss -= p[a] - lse;
                    softmax_in_place(p);
                    p[a] -= 1.0;
                    p.iter_mut().for_each(|v| *v /= n);
                }
                let (grads, _) = policy.net.backward(&cache, upstream.view())?;
                Ok((loss, grads))
            },
        )
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / n;
    let grads = MlpGrads::sum_ordered(parts.into_iter().map(|(_, g)| g)).expect("non-empty batch");
    Ok((loss, grads))
}

/// Trains a policy by maximum likelihood on relabelled tuples sampled
/// uniformly from `trajs`.
pub fn gcsl_train(
    trajs: &[Trajectory],
    spec: &EnvSpec,
    config: &GcslConfig,
) -> Result<(GcslPolicy, Vec<TrainRecord>)> {
    let refs = relabel_refs(trajs, config.max_gap);
    if refs.is_empty() {
        return Err(Error::Validation(
            "dataset has no transitions to relabel".into(),
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut policy = GcslPolicy::new(
        spec.state_dim(),
        spec.num_actions(),
        &config.hidden,
        config.horizon_conditioned,
        spec.max_episode_steps,
        &mut rng,
    )?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::with_lr(config.lr)
    });
    let mut log = Vec::new();
    let (mut acc, mut acc_n) = (0.0, 0usize);
    for step in 1..=config.train_steps {
        let batch: Vec<TupleRef> = (0..config.batch_size)
            .map(|_| refs[rng.gen_range(0..refs.len())])
            .collect();
        let (loss, grads) = cross_entropy(&policy, trajs, &batch, config.exec)?;
        opt.step(&mut policy.net, &grads)?;
        acc += loss;
        acc_n += 1;
        if config.log_every > 0 && (step % config.log_every == 0 || step == config.train_steps) {
            let rec = TrainRecord {
                step,
                loss: acc / acc_n as f64,
                mean_violation: 0.0,
            };
            log::debug!("gcsl step {}: cross-entropy {:.5}", rec.step, rec.loss);
            log.push(rec);
            (acc, acc_n) = (0.0, 0);
        }
    }
    Ok((policy, log))
}

/// Runs the greedy policy from `start` towards `goal` for at most `budget`
/// steps, passing the remaining budget as the horizon.
pub fn gcsl_episode(
    spec: &EnvSpec,
    policy: &GcslPolicy,
    start: &State,
    goal: &State,
    budget: usize,
) -> Result<(Trajectory, bool)> {
    let mut s = start.clone();
    let mut states = vec![s.clone()];
    let mut actions = Vec::new();
    let mut success = s == *goal;
    while !success && actions.len() < budget {
        let a = policy.act(&s, goal, budget - actions.len())?;
        let t = spec.step(&s, a);
        actions.push(a);
        states.push(t.next.clone());
        s = t.next;
        success = s == *goal;
        if t.done {
            break;
        }
    }
    Ok((Trajectory::new(states, actions)?, success))
}

/// Episode summary; `final_distance` is measured in `embedding`'s space so
/// reports are comparable with the planner's.
pub fn gcsl_report(
    spec: &EnvSpec,
    policy: &GcslPolicy,
    embedding: &EmbeddingModel,
    start: &State,
    goal: &State,
    budget: usize,
) -> Result<EpisodeReport> {
    let (traj, success) = gcsl_episode(spec, policy, start, goal, budget)?;
    Ok(EpisodeReport {
        start: start.clone(),
        goal: goal.clone(),
        steps: traj.len(),
        success,
        final_distance: embedding.dist(traj.states.last().expect("non-empty"), goal)?,
    })
}
