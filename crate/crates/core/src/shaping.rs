//! Potential-based reward shaping with the learned distance, and a tabular
//! Q-learning agent that consumes it.
//!
//! The shaping term is `F(s, s') = gamma * Phi(s') - Phi(s)` with
//! `Phi(s) = -d(phi(s), phi(goal))`, so `Phi(goal) = 0` and optimal policies
//! are unchanged.

use std::collections::{HashMap, VecDeque};
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collect::BehaviourPolicy;
use crate::embed::EmbeddingModel;
use crate::envs::{Action, EnvSpec, State, StateKey, StateSpace};
use crate::error::{Error, Result};

pub trait Potential {
    fn potential(&self, s: &State) -> Result<f64>;
}

/// `Phi = 0`: shaping that changes nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPotential;

impl Potential for ZeroPotential {
    fn potential(&self, _: &State) -> Result<f64> {
        Ok(0.0)
    }
}

/// `Phi(s) = -d(phi(s), phi(goal))`.
#[derive(Clone, Debug)]
pub struct DistancePotential {
    pub embedding: EmbeddingModel,
    pub goal: State,
    z_goal: Vec<f64>,
}

impl DistancePotential {
    pub fn new(embedding: EmbeddingModel, goal: State) -> Result<Self> {
        let z_goal = embedding.embed(&goal)?;
        if z_goal.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("goal embedding is not finite".into()));
        }
        Ok(DistancePotential {
            embedding,
            goal,
            z_goal,
        })
    }
}

impl Potential for DistancePotential {
    fn potential(&self, s: &State) -> Result<f64> {
        let z = self.embedding.embed(s)?;
        Ok(-self.embedding.latent_distance(&z, &self.z_goal))
    }
}

#[derive(Clone, Debug)]
pub struct ShapedReward<P = DistancePotential> {
    pub gamma: f64,
    pub potential: P,
}

impl ShapedReward<DistancePotential> {
    pub fn new(embedding: EmbeddingModel, goal: State, gamma: f64) -> Result<Self> {
        Self::with_potential(DistancePotential::new(embedding, goal)?, gamma)
    }
}

impl<P: Potential> ShapedReward<P> {
    pub fn with_potential(potential: P, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must be in (0, 1], got {gamma}"
            )));
        }
        Ok(ShapedReward { gamma, potential })
    }

    /// `F(s, s') = gamma * Phi(s') - Phi(s)`.
    pub fn shaping(&self, s: &State, s_prime: &State) -> Result<f64> {
        Ok(self.gamma * self.potential.potential(s_prime)? - self.potential.potential(s)?)
    }

    /// `r + F(s, s')`.
    pub fn shaped_reward(&self, s: &State, r: f64, s_prime: &State) -> Result<f64> {
        Ok(r + self.shaping(s, s_prime)?)
    }

    /// Potentials of every state in `space`, in index order.
    pub fn potential_table(&self, space: &StateSpace) -> Result<Vec<f64>> {
        let table = space
            .states
            .iter()
            .map(|s| self.potential.potential(s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(i) = table.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "potential of state {:?} is not finite",
                space.states[i].features()
            )));
        }
        Ok(table)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes over which epsilon decays linearly from start to end.
    pub epsilon_decay_episodes: usize,
    pub initial_q: f64,
}

impl Default for QConfig {
    fn default() -> Self {
        QConfig {
            learning_rate: 0.5,
            gamma: 0.99,
            epsilon_start: 0.2,
            epsilon_end: 0.01,
            epsilon_decay_episodes: 200,
            initial_q: 0.0,
        }
    }
}

impl QConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config("learning_rate must be in (0, 1]".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must be in (0, 1]".into()));
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config("epsilon must be in [0, 1]".into()));
            }
        }
        if !self.initial_q.is_finite() {
            return Err(Error::Config("initial_q must be finite".into()));
        }
        Ok(())
    }

    pub fn epsilon(&self, episode: usize) -> f64 {
        if episode >= self.epsilon_decay_episodes {
            return self.epsilon_end;
        }
        let t = episode as f64 / self.epsilon_decay_episodes as f64;
        self.epsilon_start + t * (self.epsilon_end - self.epsilon_start)
    }
}

/// Action values over the enumerable states of an environment.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    pub values: Vec<f64>,
    pub num_actions: usize,
}

impl QTable {
    pub fn new(num_states: usize, num_actions: usize, init: f64) -> Self {
        QTable {
            values: vec![init; num_states * num_actions],
            num_actions,
        }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn get(&self, s: usize, a: Action) -> f64 {
        self.values[s * self.num_actions + a.0]
    }

    /// Greedy action, ties to the lowest index.
    pub fn greedy(&self, s: usize) -> Action {
        Action(argmax_first(self.row(s)))
    }

    pub fn max(&self, s: usize) -> f64 {
        self.row(s)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedQ {
    num_actions: usize,
    entries: Vec<(State, Vec<f64>)>,
}

/// Writes `q` as JSON keyed by the states of `spec`, so it can be reloaded
/// without the index order.
pub fn save_qtable(spec: &EnvSpec, q: &QTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let space = StateSpace::new(spec)?;
    if space.len() * q.num_actions != q.values.len() {
        return Err(Error::Dimension {
            expected: space.len() * q.num_actions,
            got: q.values.len(),
        });
    }
    let saved = SavedQ {
        num_actions: q.num_actions,
        entries: (0..space.len())
            .map(|i| (space.states[i].clone(), q.row(i).to_vec()))
            .collect(),
    };
    let text = serde_json::to_string(&saved).expect("serialisable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Epsilon-greedy behaviour from a saved Q-table. States missing from the
/// table get a uniformly random action.
#[derive(Clone, Debug)]
pub struct QTablePolicy {
    values: HashMap<StateKey, Vec<f64>>,
    pub num_actions: usize,
    pub epsilon: f64,
}

impl QTablePolicy {
    pub fn load(path: impl AsRef<Path>, epsilon: f64) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let saved: SavedQ =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        if saved
            .entries
            .iter()
            .any(|(_, q)| q.len() != saved.num_actions)
        {
            return Err(Error::parse(
                path,
                1,
                "Q row length differs from num_actions",
            ));
        }
        Ok(QTablePolicy {
            values: saved
                .entries
                .into_iter()
                .map(|(s, q)| (s.key(), q))
                .collect(),
            num_actions: saved.num_actions,
            epsilon,
        })
    }
}

impl BehaviourPolicy for QTablePolicy {
    fn act(&self, s: &State, rng: &mut ChaCha8Rng) -> Action {
        match self.values.get(&s.key()) {
            Some(q) if rng.gen::<f64>() >= self.epsilon => Action(argmax_first(q)),
            _ => Action(rng.gen_range(0..self.num_actions)),
        }
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One point of the learning curve. `ret` is the return under the
/// environment's own reward, never the shaped one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub episode: usize,
    pub ret: f64,
    pub steps: usize,
    pub success: bool,
}

pub fn write_curve(curve: &[EpisodeStat], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "episode return steps success").unwrap();
    for e in curve {
        writeln!(
            out,
            "{} {} {} {}",
            e.episode, e.ret, e.steps, e.success as u8
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// First episode (1-based count) at which the success rate of the last
/// `window` episodes reaches `threshold`.
pub fn episodes_to_threshold(
    curve: &[EpisodeStat],
    window: usize,
    threshold: f64,
) -> Option<usize> {
    let mut recent = VecDeque::with_capacity(window);
    let mut hits = 0usize;
    for (i, e) in curve.iter().enumerate() {
        recent.push_back(e.success);
        hits += e.success as usize;
        if recent.len() > window {
            hits -= recent.pop_front().unwrap() as usize;
        }
        if recent.len() == window && hits as f64 >= threshold * window as f64 {
            return Some(i + 1);
        }
    }
    None
}

/// Tabular Q-learning with epsilon-greedy exploration (greedy ties broken
/// uniformly at random). With `shaping`, updates use `r + F(s, s')`.
pub fn q_learn<P: Potential>(
    spec: &EnvSpec,
    shaping: Option<&ShapedReward<P>>,
    episodes: usize,
    config: &QConfig,
    seed: u64,
) -> Result<(QTable, Vec<EpisodeStat>)> {
    config.validate()?;
    if !spec.is_enumerable() {
        return Err(Error::Unsupported(format!(
            "tabular Q-learning needs an enumerable environment, got {:?}",
            spec.kind
        )));
    }
    if spec.goal.is_none() {
        return Err(Error::Config("Q-learning needs a goal cell".into()));
    }
    let space = StateSpace::new(spec)?;
    let phi = match shaping {
        Some(sr) => Some((sr.gamma, sr.potential_table(&space)?)),
        None => None,
    };
    let na = spec.num_actions();
    let mut q = QTable::new(space.len(), na, config.initial_q);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = Vec::with_capacity(episodes);
    let mut ties = Vec::with_capacity(na);
    for episode in 0..episodes {
        let eps = config.epsilon(episode);
        let start = spec.reset_with(&mut rng)?;
        let mut s = space
            .index_of(&start)
            .ok_or_else(|| Error::Validation("start state is not reachable".into()))?;
        let mut ret = 0.0;
        let mut steps = 0;
        let mut success = spec.is_goal(&space.states[s]);
        while !success && steps < spec.max_episode_steps {
            let a = if rng.gen::<f64>() < eps {
                rng.gen_range(0..na)
            } else {
                let row = q.row(s);
                let best = q.max(s);
                ties.clear();
                ties.extend((0..na).filter(|&a| row[a] == best));
                ties[rng.gen_range(0..ties.len())]
            };
            let t = spec.step(&space.states[s], Action(a));
            let next = space.successors[s][a];
            ret += t.reward;
            steps += 1;
            let r = match &phi {
                Some((gamma, table)) => t.reward + (gamma * table[next] - table[s]),
                None => t.reward,
            };
            let target = if t.done {
                r
            } else {
                r + config.gamma * q.max(next)
            };
            let cell = &mut q.values[s * na + a];
            *cell += config.learning_rate * (target - *cell);
            s = next;
            success = t.done;
        }
        curve.push(EpisodeStat {
            episode,
            ret,
            steps,
            success,
        });
    }
    Ok((q, curve))
}

/// Optimal action values from exact value iteration; the goal is absorbing
/// with value 0.
#[derive(Clone, Debug)]
pub struct ValueTable {
    pub space: StateSpace,
    pub q: QTable,
    pub values: Vec<f64>,
}

impl ValueTable {
    /// All actions within `tol` of the best value at state index `s`.
    pub fn greedy_set(&self, s: usize, tol: f64) -> Vec<Action> {
        let best = self.q.max(s);
        (0..self.q.num_actions)
            .filter(|&a| self.q.get(s, Action(a)) >= best - tol)
            .map(Action)
            .collect()
    }
}

pub fn value_iteration<P: Potential>(
    spec: &EnvSpec,
    shaping: Option<&ShapedReward<P>>,
    gamma: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<ValueTable> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!(
            "gamma must be in (0, 1], got {gamma}"
        )));
    }
    if spec.goal.is_none() {
        return Err(Error::Config("value iteration needs a goal cell".into()));
    }
    let space = StateSpace::new(spec)?;
    let phi = match shaping {
        Some(sr) => {
            if sr.gamma != gamma {
                return Err(Error::Config(
                    "shaping gamma differs from the MDP gamma".into(),
                ));
            }
            Some(sr.potential_table(&space)?)
        }
        None => None,
    };
    let na = spec.num_actions();
    let n = space.len();
    let terminal: Vec<bool> = space.states.iter().map(|s| spec.is_goal(s)).collect();
    let mut values = vec![0.0; n];
    let mut q = QTable::new(n, na, 0.0);
    for _ in 0..max_sweeps {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            if terminal[s] {
                continue;
            }
            for a in 0..na {
                let next = space.successors[s][a];
                let mut r = -1.0;
                if let Some(table) = &phi {
                    r += gamma * table[next] - table[s];
                }
                let cont = if terminal[next] { 0.0 } else { values[next] };
                q.values[s * na + a] = r + gamma * cont;
            }
            let v = q.max(s);
            delta = delta.max((v - values[s]).abs());
            values[s] = v;
        }
        if delta <= tol {
            return Ok(ValueTable { space, q, values });
        }
    }
    Err(Error::Validation(format!(
        "value iteration did not converge within {max_sweeps} sweeps"
    )))
}
