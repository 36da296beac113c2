//! Finite-difference gradient oracle shared by the gradient tests and the
//! acceptance runner.

#![allow(dead_code)]

use madist::embed::{EmbedConfig, EmbeddingModel, Norm};
use madist::envs::{Action, State};
use madist::gcsl::{cross_entropy, relabel_refs, GcslPolicy};
use madist::latent::{dynamics_loss, LatentDynamics, LatentTriples};
use madist::neural::{Activation, Mlp, Parameters};
use madist::trajdata::{PairSample, Trajectory};
use madist::Exec;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Central differences carry roughly `eps * |L| / h` of rounding noise;
/// gradients below this floor are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
pub struct GradStats {
    pub name: String,
    pub points: usize,
    pub coords: usize,
    /// Coordinates skipped because a kink (SELU at 0, `|x|` at 0) lies
    /// within the finite-difference window.
    pub kinks: usize,
    /// Coordinates outside tolerance at h whose Richardson-extrapolated
    /// difference agrees with the analytic value.
    pub truncation_limited: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl GradStats {
    fn new(name: &str) -> Self {
        GradStats {
            name: name.into(),
            ..GradStats::default()
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.coords > 0
    }
}

/// Compares `analytic` with central differences of `loss` around `model`
/// on every parameter. A coordinate counts as kinked when the gap between
/// the one-sided slopes does not shrink linearly over steps h, h/2 and h/4,
/// as it must for a twice-differentiable loss. A single kink cannot fake
/// that over three scales.
pub fn check<M, F>(model: &M, analytic: &dyn Parameters, loss: F, stats: &mut GradStats)
where
    M: Parameters + Clone,
    F: Fn(&M) -> f64,
{
    let grads = analytic.param_views();
    let sizes: Vec<usize> = model.param_views().iter().map(|(_, v)| v.len()).collect();
    let grad_sizes: Vec<usize> = grads.iter().map(|(_, v)| v.len()).collect();
    assert_eq!(sizes, grad_sizes, "{}: gradient shapes", stats.name);
    stats.points += 1;
    let l0 = loss(model);
    for (b, (name, g)) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let at = |delta: f64| {
                let mut m = model.clone();
                m.param_views_mut()[b][i] += delta;
                loss(&m)
            };
            let steps = [STEP, STEP / 2.0, STEP / 4.0];
            let evals = steps.map(|h| (at(h), at(-h)));
            // gap between the one-sided slopes at step h is h * L'' when smooth
            let gaps: Vec<f64> = steps
                .iter()
                .zip(&evals)
                .map(|(h, (p, m))| ((p - l0) - (l0 - m)) / h)
                .collect();
            let central: Vec<f64> = steps
                .iter()
                .zip(&evals)
                .map(|(h, (p, m))| (p - m) / (2.0 * h))
                .collect();
            let noise = 1e-6 * (1.0 + a.abs());
            let linear = |r: f64| (r - 2.0).abs() <= 0.3;
            if gaps[0].abs() > noise && !(linear(gaps[0] / gaps[1]) && linear(gaps[1] / gaps[2])) {
                stats.kinks += 1;
                continue;
            }
            stats.coords += 1;
            let numeric = central[0];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if scale > ABS_FLOOR {
                stats.worst_rel = stats.worst_rel.max(err / scale);
            }
            if err <= REL_TOL * scale + ABS_FLOOR {
                continue;
            }
            // strong curvature: the h^2 truncation term of the central
            // difference exceeds the tolerance, but the estimate converges
            // on the analytic value as h shrinks
            let half = central[1];
            let extrapolated = (4.0 * half - numeric) / 3.0;
            if (half - a).abs() < err / 2.0
                && (extrapolated - a).abs() <= REL_TOL * a.abs().max(extrapolated.abs()) + ABS_FLOOR
            {
                stats.truncation_limited += 1;
            } else {
                stats.failures.push(format!(
                    "{name}[{i}]: analytic {a:.6e} vs numeric {numeric:.6e}"
                ));
            }
        }
    }
}

fn random_state(rng: &mut ChaCha8Rng, dim: usize) -> State {
    State((0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

fn random_mlp(rng: &mut ChaCha8Rng, input: usize, output: usize, hidden: Activation) -> Mlp {
    let mut dims = vec![input];
    for _ in 0..rng.gen_range(0..3) {
        dims.push(rng.gen_range(1..6));
    }
    dims.push(output);
    let out = if rng.gen_bool(0.5) {
        Activation::Identity
    } else {
        Activation::Selu
    };
    Mlp::new(&dims, hidden, out, rng).unwrap()
}

/// Input matrix as a parameter block, for checking `dL/dx`.
#[derive(Clone)]
struct Input(Array2<f64>);

impl Parameters for Input {
    fn param_views(&self) -> Vec<(String, &[f64])> {
        vec![("x".into(), self.0.as_slice().unwrap())]
    }

    fn param_views_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.0.as_slice_mut().unwrap()]
    }
}

/// Random nets of both hidden activations under a random linear loss, on
/// parameters and inputs.
pub fn mlp_gradients(points: usize, seed: u64) -> GradStats {
    let mut stats = GradStats::new("mlp");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in 0..points {
        let hidden = if p % 2 == 0 {
            Activation::Selu
        } else {
            Activation::Identity
        };
        let (din, dout, n) = (
            rng.gen_range(1..5),
            rng.gen_range(1..4),
            rng.gen_range(1..5),
        );
        let net = random_mlp(&mut rng, din, dout, hidden);
        let x = Array2::from_shape_fn((n, din), |_| rng.gen_range(-2.0..2.0));
        let up = Array2::from_shape_fn((n, dout), |_| rng.gen_range(-1.0..1.0));
        let linear =
            |net: &Mlp, x: &Array2<f64>| (&net.forward_batch(x.view()).unwrap().output * &up).sum();
        let cache = net.forward_batch(x.view()).unwrap();
        let (grads, dx) = net.backward(&cache, up.view()).unwrap();
        check(&net, &grads, |m| linear(m, &x), &mut stats);
        check(
            &Input(x.clone()),
            &Input(dx.as_standard_layout().into_owned()),
            |xi| linear(&net, &xi.0),
            &mut stats,
        );
    }
    stats
}

/// Pair-regression loss with the one-sided penalty, both norms, random
/// weighting exponents and a random execution mode.
pub fn embedding_gradients(points: usize, seed: u64) -> GradStats {
    let mut stats = GradStats::new("embedding loss");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in 0..points {
        let dim = rng.gen_range(1..4);
        let k = rng.gen_range(1..4);
        let config = EmbedConfig {
            embed_dim: k,
            hidden: vec![],
            norm: if p % 2 == 0 { Norm::L1 } else { Norm::L2 },
            alpha_exponent: rng.gen_range(0.0..3.0),
            penalty_enabled: rng.gen_bool(0.7),
            exec: if rng.gen_bool(0.5) {
                Exec::Parallel
            } else {
                Exec::Sequential
            },
            ..EmbedConfig::default()
        };
        let net = random_mlp(&mut rng, dim, k, Activation::Selu);
        let pool: Vec<State> = (0..5).map(|_| random_state(&mut rng, dim)).collect();
        let batch: Vec<PairSample> = (0..rng.gen_range(1..8))
            .map(|_| PairSample {
                s: pool.choose(&mut rng).unwrap().clone(),
                s_prime: random_state(&mut rng, dim),
                d_td: rng.gen_range(1..6),
            })
            .collect();
        let model = EmbeddingModel::from_net(net, config.clone()).unwrap();
        let out = model.loss_batch(&batch).unwrap();
        let loss = |net: &Mlp| {
            EmbeddingModel::from_net(net.clone(), config.clone())
                .unwrap()
                .loss_batch(&batch)
                .unwrap()
                .loss
        };
        check(&model.net, &out.grads, loss, &mut stats);
    }
    stats
}

/// Squared next-embedding error of the two-branch transition model.
pub fn dynamics_gradients(points: usize, seed: u64) -> GradStats {
    let mut stats = GradStats::new("dynamics loss");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..points {
        let k = rng.gen_range(1..4);
        let na = rng.gen_range(1..5);
        let hidden = rng.gen_range(1..5);
        let model = LatentDynamics::new(k, na, hidden, &mut rng).unwrap();
        let n_states = rng.gen_range(1..5);
        let n_rows = rng.gen_range(1..7);
        let n = rng.gen_range(1..10);
        let data = LatentTriples {
            z: Array2::from_shape_fn((n_states, k), |_| rng.gen_range(-2.0..2.0)),
            row_state: (0..n_rows).map(|_| rng.gen_range(0..n_states)).collect(),
            actions: (0..n_rows).map(|_| Action(rng.gen_range(0..na))).collect(),
            input: (0..n).map(|_| rng.gen_range(0..n_rows)).collect(),
            target: Array2::from_shape_fn((n, k), |_| rng.gen_range(-2.0..2.0)),
        };
        let batch: Vec<usize> = (0..rng.gen_range(1..12))
            .map(|_| rng.gen_range(0..n))
            .collect();
        let exec = if rng.gen_bool(0.5) {
            Exec::Parallel
        } else {
            Exec::Sequential
        };
        let (_, grads) = dynamics_loss(&model, &data, &batch, exec).unwrap();
        let loss = |m: &LatentDynamics| dynamics_loss(m, &data, &batch, exec).unwrap().0;
        check(&model, &grads, loss, &mut stats);
    }
    stats
}

/// Mean cross-entropy of the goal-conditioned policy, with and without the
/// horizon input.
pub fn gcsl_gradients(points: usize, seed: u64) -> GradStats {
    let mut stats = GradStats::new("gcsl cross-entropy");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in 0..points {
        let dim = rng.gen_range(1..4);
        let na = rng.gen_range(2..5);
        let trajs: Vec<Trajectory> = (0..rng.gen_range(1..3))
            .map(|_| {
                let n = rng.gen_range(1..5);
                let states = (0..=n).map(|_| random_state(&mut rng, dim)).collect();
                let actions = (0..n).map(|_| Action(rng.gen_range(0..na))).collect();
                Trajectory::new(states, actions).unwrap()
            })
            .collect();
        let refs = relabel_refs(&trajs, None);
        let batch: Vec<_> = (0..rng.gen_range(1..8))
            .map(|_| *refs.choose(&mut rng).unwrap())
            .collect();
        let hidden: Vec<usize> = (0..rng.gen_range(0..3))
            .map(|_| rng.gen_range(1..5))
            .collect();
        let policy = GcslPolicy::new(dim, na, &hidden, p % 2 == 0, 6, &mut rng).unwrap();
        let (_, grads) = cross_entropy(&policy, &trajs, &batch, Exec::default()).unwrap();
        let loss = |net: &Mlp| {
            let candidate = GcslPolicy {
                net: net.clone(),
                ..policy.clone()
            };
            cross_entropy(&candidate, &trajs, &batch, Exec::default())
                .unwrap()
                .0
        };
        check(&policy.net, &grads, loss, &mut stats);
    }
    stats
}

pub fn all_gradients(points: usize, seed: u64) -> Vec<GradStats> {
    vec![
        mlp_gradients(points, seed),
        embedding_gradients(points, seed + 1),
        dynamics_gradients(points, seed + 2),
        gcsl_gradients(points, seed + 3),
    ]
}
