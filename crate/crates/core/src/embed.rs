//! Learned state embedding whose norm distances approximate the minimum
//! action distance.
//!
//! Training regresses `||phi(s) - phi(s')||` onto the trajectory distance
//! `d` of each pair with weight `1 / d^alpha`, plus a one-sided quadratic
//! penalty on pairs whose embedded distance exceeds `d` (trajectory
//! distances are upper bounds on the true action distance).

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::State;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::neural::{stack_states, Activation, AdamW, AdamWConfig, Checkpoint, Mlp, MlpGrads};
use crate::trajdata::{extract_all_pairs, PairSample, PrioritizedBuffer, Trajectory};

/// Rows per forward/backward chunk. Fixed so results do not depend on the
/// execution policy.
pub const CHUNK_ROWS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Norm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Norm::L2 => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Subgradient of `||delta||` with respect to `delta`, scaled by `k`,
    /// accumulated into `out`. Zero at the origin (coordinate-wise for L1).
    fn accumulate_grad(self, delta: &[f64], norm: f64, k: f64, out: &mut [f64]) {
        match self {
            Norm::L1 => {
                for (o, d) in out.iter_mut().zip(delta) {
                    if *d > 0.0 {
                        *o += k;
                    } else if *d < 0.0 {
                        *o -= k;
                    }
                }
            }
            Norm::L2 => {
                if norm > 0.0 {
                    for (o, d) in out.iter_mut().zip(delta) {
                        *o += k * d / norm;
                    }
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            other => Err(Error::Config(format!("unknown norm `{other}`"))),
        }
    }
}

/// Which per-sample quantity becomes the replay priority.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrioritySource {
    Penalty,
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub norm: Norm,
    pub alpha_exponent: f64,
    pub penalty_enabled: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub train_steps: usize,
    pub seed: u64,
    pub max_gap: Option<usize>,
    pub per_alpha: f64,
    pub per_eps: f64,
    pub priority: PrioritySource,
    pub log_every: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            embed_dim: 64,
            hidden: vec![128, 128],
            norm: Norm::L1,
            alpha_exponent: 2.0,
            penalty_enabled: true,
            batch_size: 512,
            lr: 5e-4,
            weight_decay: 0.0,
            train_steps: 100_000,
            seed: 0,
            max_gap: None,
            per_alpha: PrioritizedBuffer::DEFAULT_ALPHA,
            per_eps: PrioritizedBuffer::DEFAULT_EPS,
            priority: PrioritySource::Penalty,
            log_every: 100,
            exec: Exec::default(),
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        if !(self.alpha_exponent >= 0.0 && self.alpha_exponent.is_finite()) {
            return Err(Error::Config(format!(
                "alpha_exponent {} must be finite and non-negative",
                self.alpha_exponent
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Weight `1 / d^alpha` of a pair with trajectory distance `d`.
pub fn sample_weight(d_td: u32, alpha: f64) -> f64 {
    (d_td as f64).powf(-alpha)
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// Penalty term of each sample, in batch order.
    pub per_sample_penalty: Vec<f64>,
    /// Full loss (regression + penalty) of each sample.
    pub per_sample_loss: Vec<f64>,
    /// Mean of `max(0, dist - d)` over the batch.
    pub mean_violation: f64,
    pub grads: MlpGrads,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_violation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    pub net: Mlp,
    pub config: EmbedConfig,
}

/// Unique-row view of a set of states: identical states are embedded once.
pub(crate) struct Dedup {
    pub rows: Vec<usize>,
    pub matrix: Array2<f64>,
}

impl Dedup {
    pub fn new<'a>(states: impl IntoIterator<Item = &'a State>, dim: usize) -> Result<Self> {
        let mut index = HashMap::new();
        let mut uniq: Vec<&State> = Vec::new();
        let mut rows = Vec::new();
        for s in states {
            if s.dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: s.dim(),
                });
            }
            let next = uniq.len();
            let r = *index.entry(s.key()).or_insert_with(|| {
                uniq.push(s);
                next
            });
            rows.push(r);
        }
        let matrix = stack_states(uniq, dim);
        Ok(Dedup { rows, matrix })
    }
}

impl EmbeddingModel {
    pub fn new(state_dim: usize, config: EmbedConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut dims = vec![state_dim];
        dims.extend(&config.hidden);
        dims.push(config.embed_dim);
        let net = Mlp::new(&dims, Activation::Selu, Activation::Identity, &mut rng)?;
        Ok(EmbeddingModel { net, config })
    }

    pub fn from_net(net: Mlp, config: EmbedConfig) -> Result<Self> {
        if net.output_dim() != config.embed_dim {
            return Err(Error::Dimension {
                expected: config.embed_dim,
                got: net.output_dim(),
            });
        }
        Ok(EmbeddingModel { net, config })
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn norm(&self) -> Norm {
        self.config.norm
    }

    pub fn embed(&self, s: &State) -> Result<Vec<f64>> {
        self.net.forward(s.features())
    }

    pub fn dist(&self, s: &State, s_prime: &State) -> Result<f64> {
        Ok(self.latent_distance(&self.embed(s)?, &self.embed(s_prime)?))
    }

    pub fn latent_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.config.norm.distance(a, b)
    }

    /// Embeds many states through the batched path, one row per state.
    pub fn embed_batch(&self, states: &[State]) -> Result<Array2<f64>> {
        let d = Dedup::new(states, self.state_dim())?;
        let uniq = self.forward_unique(&d.matrix)?;
        Ok(uniq.select(Axis(0), &d.rows))
    }

    fn forward_unique(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let parts = self.config.exec.map_chunks(x.nrows(), CHUNK_ROWS, |r| {
            self.net
                .forward_batch(x.slice(ndarray::s![r, ..]))
                .map(|c| c.output)
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        if views.is_empty() {
            return Ok(Array2::zeros((0, self.config.embed_dim)));
        }
        Ok(ndarray::concatenate(Axis(0), &views).expect("matching widths"))
    }

    pub fn loss_batch(&self, batch: &[PairSample]) -> Result<LossOutput> {
        let refs: Vec<&PairSample> = batch.iter().collect();
        self.loss_refs(&refs)
    }

    pub(crate) fn loss_refs(&self, batch: &[&PairSample]) -> Result<LossOutput> {
        if let Some(p) = batch.iter().find(|p| p.d_td == 0) {
            return Err(Error::Validation(format!(
                "pair with zero trajectory distance (d_td = {})",
                p.d_td
            )));
        }
        let dim = self.state_dim();
        let dedup = Dedup::new(batch.iter().flat_map(|p| [&p.s, &p.s_prime]), dim)?;
        let x = &dedup.matrix;
        let exec = self.config.exec;
        let caches = exec
            .map_chunks(x.nrows(), CHUNK_ROWS, |r| {
                self.net.forward_batch(x.slice(ndarray::s![r, ..]))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let row = |u: usize| caches[u / CHUNK_ROWS].output.row(u % CHUNK_ROWS);

        let k = self.config.embed_dim;
        let norm = self.config.norm;
        let alpha = self.config.alpha_exponent;
        let mut upstream = Array2::<f64>::zeros((x.nrows(), k));
        let mut delta = vec![0.0; k];
        let mut grad = vec![0.0; k];
        let mut loss = 0.0;
        let mut violation = 0.0;
        let mut per_sample_penalty = Vec::with_capacity(batch.len());
        let mut per_sample_loss = Vec::with_capacity(batch.len());
        for (i, p) in batch.iter().enumerate() {
            let (ua, ub) = (dedup.rows[2 * i], dedup.rows[2 * i + 1]);
            let (za, zb) = (row(ua), row(ub));
            for ((d, a), b) in delta.iter_mut().zip(za).zip(zb) {
                *d = a - b;
            }
            let dist = match norm {
                Norm::L1 => delta.iter().map(|v| v.abs()).sum::<f64>(),
                Norm::L2 => delta.iter().map(|v| v * v).sum::<f64>().sqrt(),
            };
            let target = p.d_td as f64;
            let w = sample_weight(p.d_td, alpha);
            let resid = dist - target;
            let over = resid.max(0.0);
            let penalty = if self.config.penalty_enabled {
                w * over * over
            } else {
                0.0
            };
            let sample_loss = w * resid * resid + penalty;
            loss += sample_loss;
            violation += over;
            per_sample_penalty.push(penalty);
            per_sample_loss.push(sample_loss);

            let mut d_dist = 2.0 * w * resid;
            if self.config.penalty_enabled {
                d_dist += 2.0 * w * over;
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            norm.accumulate_grad(&delta, dist, d_dist, &mut grad);
            {
                let mut ra = upstream.row_mut(ua);
                ra.iter_mut().zip(&grad).for_each(|(u, g)| *u += g);
            }
            let mut rb = upstream.row_mut(ub);
            rb.iter_mut().zip(&grad).for_each(|(u, g)| *u -= g);
        }

        let parts = exec
            .map_range(caches.len(), |c| {
                let lo = c * CHUNK_ROWS;
                let hi = lo + caches[c].output.nrows();
                self.net
                    .backward(&caches[c], upstream.slice(ndarray::s![lo..hi, ..]))
                    .map(|(g, _)| g)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let grads = MlpGrads::sum_ordered(parts).unwrap_or_else(|| MlpGrads::zeros_like(&self.net));
        let n = batch.len().max(1) as f64;
        Ok(LossOutput {
            loss,
            per_sample_penalty,
            per_sample_loss,
            mean_violation: violation / n,
            grads,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        Checkpoint::new("embedding")
            .with_meta("embed_dim", c.embed_dim)
            .with_meta("norm", c.norm.name())
            .with_meta("alpha_exponent", format!("{:?}", c.alpha_exponent))
            .with_meta("penalty_enabled", c.penalty_enabled)
            .with_meta("seed", c.seed)
            .with_net("phi", self.net.clone())
    }

    pub fn from_checkpoint(mut ckpt: Checkpoint) -> Result<Self> {
        ckpt.expect_kind("embedding")?;
        let net = ckpt.take_net("phi")?;
        let config = EmbedConfig {
            embed_dim: ckpt.require_meta("embed_dim")?,
            hidden: net.layer_dims()[1..net.layer_dims().len() - 1].to_vec(),
            norm: ckpt.require_meta::<String>("norm")?.parse()?,
            alpha_exponent: ckpt.require_meta("alpha_exponent")?,
            penalty_enabled: ckpt.require_meta("penalty_enabled")?,
            seed: ckpt.require_meta("seed")?,
            ..EmbedConfig::default()
        };
        Self::from_net(net, config)
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

/// Trains an embedding on every pair extracted from `trajs`.
///
/// The pairs are appended to `buffer`; each step samples a prioritized batch,
/// applies one AdamW update, and writes the per-sample penalty (or loss, see
/// [`PrioritySource`]) back as the new priorities.
pub fn train_embedding(
    trajs: &[Trajectory],
    config: &EmbedConfig,
    buffer: &mut PrioritizedBuffer,
) -> Result<(EmbeddingModel, Vec<TrainRecord>)> {
    config.validate()?;
    let state_dim = trajs
        .first()
        .map(|t| t.states[0].dim())
        .ok_or_else(|| Error::Validation("no trajectories to train on".into()))?;
    let pairs = extract_all_pairs(trajs, config.max_gap);
    if pairs.is_empty() {
        return Err(Error::Validation(
            "trajectories yield no state pairs".into(),
        ));
    }
    buffer.extend(pairs);

    let mut model = EmbeddingModel::new(state_dim, config.clone())?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::with_lr(config.lr)
    });
    // Sampling uses its own stream so it does not depend on init draws.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = Vec::new();
    let (mut acc_loss, mut acc_viol, mut acc_n) = (0.0, 0.0, 0usize);
    for step in 1..=config.train_steps {
        let idx = buffer.sample_indices(config.batch_size, &mut rng)?;
        let batch: Vec<&PairSample> = idx.iter().map(|&i| &buffer.samples()[i]).collect();
        let out = model.loss_refs(&batch)?;
        opt.step(&mut model.net, &out.grads)?;
        let priorities = match config.priority {
            PrioritySource::Penalty => &out.per_sample_penalty,
            PrioritySource::Loss => &out.per_sample_loss,
        };
        buffer.update_priorities(&idx, priorities)?;

        acc_loss += out.loss;
        acc_viol += out.mean_violation;
        acc_n += 1;
        if config.log_every > 0 && (step % config.log_every == 0 || step == config.train_steps) {
            let rec = TrainRecord {
                step,
                loss: acc_loss / acc_n as f64,
                mean_violation: acc_viol / acc_n as f64,
            };
            log::debug!(
                "embed step {}: loss {:.5} mean violation {:.5}",
                rec.step,
                rec.loss,
                rec.mean_violation
            );
            log.push(rec);
            (acc_loss, acc_viol, acc_n) = (0.0, 0.0, 0);
        }
    }
    Ok((model, log))
}

/// Mean embedded distance between consecutive dataset states.
pub fn mean_adjacent_distance(model: &EmbeddingModel, trajs: &[Trajectory]) -> Result<f64> {
    let mut states = Vec::new();
    for t in trajs {
        for w in t.states.windows(2) {
            states.push(w[0].clone());
            states.push(w[1].clone());
        }
    }
    if states.is_empty() {
        return Err(Error::Validation("dataset has no transitions".into()));
    }
    let z = model.embed_batch(&states)?;
    let n = states.len() / 2;
    let total: f64 = (0..n)
        .map(|i| {
            model.latent_distance(
                z.row(2 * i).as_slice().expect("row"),
                z.row(2 * i + 1).as_slice().expect("row"),
            )
        })
        .sum();
    Ok(total / n as f64)
}
