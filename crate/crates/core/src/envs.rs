//! Toy goal-reaching MDPs: open and walled gridworlds, a key/door gridworld
//! and a mountain-car style hill.
//!
//! Environments are pure transition functions over [`State`] plus an
//! explicit RNG for resets. Grid features are normalized to `[0, 1]`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UP: Action = Action(0);
pub const DOWN: Action = Action(1);
pub const LEFT: Action = Action(2);
pub const RIGHT: Action = Action(3);

pub const PUSH_LEFT: Action = Action(0);
pub const IDLE: Action = Action(1);
pub const PUSH_RIGHT: Action = Action(2);

const HILL_MIN_POS: f64 = -1.2;
const HILL_MAX_POS: f64 = 0.6;
pub const HILL_GOAL_POS: f64 = 0.5;
const HILL_MAX_SPEED: f64 = 0.07;
const HILL_FORCE: f64 = 0.001;
const HILL_GRAVITY: f64 = 0.0025;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    OpenGrid,
    WallsGrid,
    KeydoorGrid,
    MountainHill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }
}

impl From<[usize; 2]> for Cell {
    fn from([x, y]: [usize; 2]) -> Self {
        Cell { x, y }
    }
}

impl From<Cell> for [usize; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

/// Observation vector. Length is fixed per environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State(pub Vec<f64>);

impl State {
    pub fn features(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Bit-exact hash key.
    pub fn key(&self) -> StateKey {
        StateKey(self.0.iter().map(|v| v.to_bits()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StateKey(Vec<u64>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub next: State,
    pub reward: f64,
    /// Goal reached. Step budgets are enforced by the caller.
    pub done: bool,
}

fn default_side() -> usize {
    2
}

fn default_max_steps() -> usize {
    50
}

/// Environment configuration, loadable from a TOML-style text file:
///
/// ```text
/// env = "walls_grid"
/// width = 40
/// height = 40
/// walls = [[3, 2], [3, 3]]
/// max_steps = 50
/// seed = 7
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    #[serde(rename = "env")]
    pub kind: EnvKind,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default)]
    pub walls: Vec<Cell>,
    /// Fixed start cell. Keydoor defaults to (0, 0); other grids sample a
    /// uniform free cell when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub door: Option<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Cell>,
    #[serde(rename = "max_steps", default = "default_max_steps")]
    pub max_episode_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EnvSpec {
    pub fn open_grid(width: usize, height: usize) -> Self {
        EnvSpec {
            kind: EnvKind::OpenGrid,
            width,
            height,
            walls: Vec::new(),
            start: None,
            key: None,
            door: None,
            goal: None,
            max_episode_steps: default_max_steps(),
            seed: 0,
        }
    }

    pub fn walls_grid(width: usize, height: usize, walls: Vec<Cell>) -> Self {
        EnvSpec {
            kind: EnvKind::WallsGrid,
            walls,
            ..Self::open_grid(width, height)
        }
    }

    pub fn keydoor_grid(width: usize, height: usize, key: Cell, door: Cell) -> Self {
        EnvSpec {
            kind: EnvKind::KeydoorGrid,
            key: Some(key),
            door: Some(door),
            ..Self::open_grid(width, height)
        }
    }

    pub fn mountain_hill() -> Self {
        EnvSpec {
            kind: EnvKind::MountainHill,
            max_episode_steps: 200,
            ..Self::open_grid(2, 2)
        }
    }

    pub fn with_goal(mut self, goal: Cell) -> Self {
        self.goal = Some(goal);
        self
    }

    pub fn with_max_steps(mut self, steps: usize) -> Self {
        self.max_episode_steps = steps;
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: EnvSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("EnvSpec serializes to toml")
    }

    pub fn is_grid(&self) -> bool {
        self.kind != EnvKind::MountainHill
    }

    /// Finite, deterministic state space with an exact MAD oracle.
    pub fn is_enumerable(&self) -> bool {
        self.is_grid()
    }

    pub fn num_actions(&self) -> usize {
        if self.is_grid() {
            4
        } else {
            3
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            EnvKind::OpenGrid | EnvKind::WallsGrid => 2,
            EnvKind::KeydoorGrid => 3,
            EnvKind::MountainHill => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_episode_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !self.is_grid() {
            return Ok(());
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config(format!(
                "grid must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        let in_bounds = |c: &Cell| c.x < self.width && c.y < self.height;
        if let Some(c) = self.walls.iter().find(|c| !in_bounds(c)) {
            return Err(Error::Config(format!(
                "wall ({}, {}) out of bounds",
                c.x, c.y
            )));
        }
        let walls: HashSet<Cell> = self.walls.iter().copied().collect();
        if walls.len() >= self.width * self.height {
            return Err(Error::Config("walls cover every cell".into()));
        }
        if self.kind == EnvKind::KeydoorGrid && (self.key.is_none() || self.door.is_none()) {
            return Err(Error::Config(
                "keydoor_grid needs `key` and `door` cells".into(),
            ));
        }
        if self.kind == EnvKind::OpenGrid && !self.walls.is_empty() {
            return Err(Error::Config("open_grid cannot have walls".into()));
        }
        let named = [
            ("start", self.start_cell()),
            ("key", self.key),
            ("door", self.door),
            ("goal", self.goal),
        ];
        for (name, cell) in named {
            if let Some(c) = cell {
                if !in_bounds(&c) {
                    return Err(Error::Config(format!(
                        "{name} ({}, {}) out of bounds",
                        c.x, c.y
                    )));
                }
                if walls.contains(&c) {
                    return Err(Error::Config(format!(
                        "{name} ({}, {}) is a wall",
                        c.x, c.y
                    )));
                }
            }
        }
        if let (Some(k), Some(d)) = (self.key, self.door) {
            if k == d {
                return Err(Error::Config("key and door share a cell".into()));
            }
        }
        Ok(())
    }

    fn start_cell(&self) -> Option<Cell> {
        match self.kind {
            EnvKind::KeydoorGrid => Some(self.start.unwrap_or(Cell::new(0, 0))),
            _ => self.start,
        }
    }

    fn is_wall(&self, c: Cell) -> bool {
        self.walls.contains(&c)
    }

    pub fn grid_state(&self, cell: Cell, has_key: bool) -> State {
        let x = cell.x as f64 / (self.width - 1) as f64;
        let y = cell.y as f64 / (self.height - 1) as f64;
        match self.kind {
            EnvKind::KeydoorGrid => State(vec![x, y, if has_key { 1.0 } else { 0.0 }]),
            _ => State(vec![x, y]),
        }
    }

    /// Decodes a grid state back to `(cell, has_key)`.
    pub fn grid_cell(&self, s: &State) -> Option<(Cell, bool)> {
        if !self.is_grid() || s.dim() != self.state_dim() {
            return None;
        }
        let f = s.features();
        let x = (f[0] * (self.width - 1) as f64).round();
        let y = (f[1] * (self.height - 1) as f64).round();
        if !(0.0..self.width as f64).contains(&x) || !(0.0..self.height as f64).contains(&y) {
            return None;
        }
        let has_key = self.kind == EnvKind::KeydoorGrid && f[2] > 0.5;
        Some((Cell::new(x as usize, y as usize), has_key))
    }

    pub fn goal_state(&self) -> Option<State> {
        match self.kind {
            EnvKind::MountainHill => None,
            // Reaching the goal requires passing the door, so the key is held.
            EnvKind::KeydoorGrid => self.goal.map(|g| self.grid_state(g, true)),
            _ => self.goal.map(|g| self.grid_state(g, false)),
        }
    }

    pub fn is_goal(&self, s: &State) -> bool {
        match self.kind {
            EnvKind::MountainHill => s.features()[0] >= HILL_GOAL_POS,
            _ => match (self.goal, self.grid_cell(s)) {
                (Some(g), Some((c, _))) => g == c,
                _ => false,
            },
        }
    }

    pub fn reset(&self, seed: u64) -> Result<State> {
        self.reset_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn reset_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<State> {
        self.validate()?;
        if self.kind == EnvKind::MountainHill {
            let pos = rng.gen_range(-0.6..=-0.4);
            return Ok(State(vec![pos, 0.0]));
        }
        if let Some(c) = self.start_cell() {
            return Ok(self.grid_state(c, false));
        }
        let free: Vec<Cell> = self.free_cells();
        let c = free[rng.gen_range(0..free.len())];
        Ok(self.grid_state(c, false))
    }

    fn free_cells(&self) -> Vec<Cell> {
        let walls: HashSet<Cell> = self.walls.iter().copied().collect();
        let mut cells = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                if !walls.contains(&c) {
                    cells.push(c);
                }
            }
        }
        cells
    }

    /// One environment transition. Panics on an action outside `[0, A)` or a
    /// state that does not belong to this environment.
    pub fn step(&self, s: &State, a: Action) -> Transition {
        assert!(a.0 < self.num_actions(), "action {} out of range", a.0);
        if self.kind == EnvKind::MountainHill {
            return self.hill_step(s, a);
        }
        let (cell, mut has_key) = self
            .grid_cell(s)
            .unwrap_or_else(|| panic!("state {:?} is not a grid state", s.features()));
        let target = match a.0 {
            0 if cell.y + 1 < self.height => Some(Cell::new(cell.x, cell.y + 1)),
            1 if cell.y > 0 => Some(Cell::new(cell.x, cell.y - 1)),
            2 if cell.x > 0 => Some(Cell::new(cell.x - 1, cell.y)),
            3 if cell.x + 1 < self.width => Some(Cell::new(cell.x + 1, cell.y)),
            _ => None,
        };
        let next = match target {
            Some(t) if self.is_wall(t) => cell,
            Some(t) if self.kind == EnvKind::KeydoorGrid && Some(t) == self.door && !has_key => {
                cell
            }
            Some(t) => t,
            None => cell,
        };
        if self.kind == EnvKind::KeydoorGrid && Some(next) == self.key {
            has_key = true;
        }
        let next = self.grid_state(next, has_key);
        let done = self.is_goal(&next);
        Transition {
            next,
            reward: -1.0,
            done,
        }
    }

    fn hill_step(&self, s: &State, a: Action) -> Transition {
        let f = s.features();
        let (mut pos, mut vel) = (f[0], f[1]);
        vel += (a.0 as f64 - 1.0) * HILL_FORCE + (3.0 * pos).cos() * (-HILL_GRAVITY);
        vel = vel.clamp(-HILL_MAX_SPEED, HILL_MAX_SPEED);
        pos += vel;
        pos = pos.clamp(HILL_MIN_POS, HILL_MAX_POS);
        if pos == HILL_MIN_POS && vel < 0.0 {
            vel = 0.0;
        }
        Transition {
            next: State(vec![pos, vel]),
            reward: -1.0,
            done: pos >= HILL_GOAL_POS,
        }
    }

    /// Every reachable state exactly once, ordered by `(has_key, y, x)`.
    pub fn enumerate_states(&self) -> Result<Vec<State>> {
        if !self.is_enumerable() {
            return Err(Error::Unsupported(format!(
                "{:?} has a continuous state space",
                self.kind
            )));
        }
        self.validate()?;
        let mut keys: Vec<(bool, Cell)> = match self.kind {
            EnvKind::KeydoorGrid => {
                let start = self.grid_state(self.start_cell().expect("keydoor start"), false);
                let mut seen = HashSet::new();
                let mut queue = VecDeque::new();
                seen.insert(self.grid_cell(&start).expect("grid state"));
                queue.push_back(start);
                while let Some(s) = queue.pop_front() {
                    for a in 0..4 {
                        let next = self.step(&s, Action(a)).next;
                        if seen.insert(self.grid_cell(&next).expect("grid state")) {
                            queue.push_back(next);
                        }
                    }
                }
                seen.into_iter().map(|(c, k)| (k, c)).collect()
            }
            _ => self.free_cells().into_iter().map(|c| (false, c)).collect(),
        };
        keys.sort_by_key(|&(k, c)| (k, c.y, c.x));
        Ok(keys
            .into_iter()
            .map(|(k, c)| self.grid_state(c, k))
            .collect())
    }
}

/// Enumerated state space with index lookup and the one-step successor table.
#[derive(Clone, Debug)]
pub struct StateSpace {
    pub states: Vec<State>,
    index: HashMap<StateKey, usize>,
    /// `successors[i][a]` is the index reached from state `i` under action `a`.
    pub successors: Vec<Vec<usize>>,
}

impl StateSpace {
    pub fn new(spec: &EnvSpec) -> Result<Self> {
        let states = spec.enumerate_states()?;
        let index: HashMap<StateKey, usize> = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.key(), i))
            .collect();
        let successors = states
            .iter()
            .map(|s| {
                (0..spec.num_actions())
                    .map(|a| {
                        let next = spec.step(s, Action(a)).next;
                        index[&next.key()]
                    })
                    .collect()
            })
            .collect();
        Ok(StateSpace {
            states,
            index,
            successors,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, s: &State) -> Option<usize> {
        self.index.get(&s.key()).copied()
    }
}
