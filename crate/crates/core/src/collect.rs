//! Dataset collection by rolling out a behaviour policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::{Action, EnvSpec, State, StateSpace};
use crate::error::Result;
use crate::trajdata::Trajectory;

/// Behaviour used to pick actions during collection.
pub trait BehaviourPolicy {
    fn act(&self, s: &State, rng: &mut ChaCha8Rng) -> Action;
}

#[derive(Clone, Copy, Debug)]
pub struct RandomPolicy {
    pub num_actions: usize,
}

impl BehaviourPolicy for RandomPolicy {
    fn act(&self, _s: &State, rng: &mut ChaCha8Rng) -> Action {
        Action(rng.gen_range(0..self.num_actions))
    }
}

/// Rolls out one episode from a fresh reset until the goal or the step budget.
/// A start on the goal gives an empty trajectory.
pub fn rollout_episode<P: BehaviourPolicy + ?Sized>(
    spec: &EnvSpec,
    policy: &P,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut s = spec.reset_with(rng)?;
    let mut states = vec![s.clone()];
    let mut actions = Vec::new();
    for _ in 0..spec.max_episode_steps {
        if spec.is_goal(&s) {
            break;
        }
        let a = policy.act(&s, rng);
        let t = spec.step(&s, a);
        actions.push(a);
        states.push(t.next.clone());
        s = t.next;
        if t.done {
            break;
        }
    }
    Trajectory::new(states, actions)
}

pub fn collect<P: BehaviourPolicy + ?Sized>(
    spec: &EnvSpec,
    policy: &P,
    n_traj: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_traj)
        .map(|_| rollout_episode(spec, policy, &mut rng))
        .collect()
}

pub fn collect_random(spec: &EnvSpec, n_traj: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let policy = RandomPolicy {
        num_actions: spec.num_actions(),
    };
    collect(spec, &policy, n_traj, seed)
}

/// Fraction of enumerable states visited by the dataset.
pub fn coverage(spec: &EnvSpec, trajs: &[Trajectory]) -> Result<f64> {
    let space = StateSpace::new(spec)?;
    let mut seen = vec![false; space.len()];
    for s in trajs.iter().flat_map(|t| &t.states) {
        if let Some(i) = space.index_of(s) {
            seen[i] = true;
        }
    }
    Ok(seen.iter().filter(|&&v| v).count() as f64 / space.len() as f64)
}
