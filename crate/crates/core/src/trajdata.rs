//! Trajectories, trajectory-distance pairs and the prioritized pair buffer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, State};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn new(states: Vec<State>, actions: Vec<Action>) -> Result<Self> {
        let t = Trajectory { states, actions };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::Validation("trajectory has no states".into()));
        }
        if self.states.len() != self.actions.len() + 1 {
            return Err(Error::Validation(format!(
                "trajectory has {} states but {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        let dim = self.states[0].dim();
        if let Some(s) = self.states.iter().find(|s| s.dim() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: s.dim(),
            });
        }
        if self
            .states
            .iter()
            .any(|s| s.features().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Validation(
                "trajectory contains non-finite features".into(),
            ));
        }
        Ok(())
    }

    /// Number of actions taken.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// `(s_t, a_t, s_{t+1})` triples.
    pub fn transitions(&self) -> impl Iterator<Item = (&State, Action, &State)> + '_ {
        self.actions
            .iter()
            .enumerate()
            .map(|(t, &a)| (&self.states[t], a, &self.states[t + 1]))
    }
}

/// A pair of states from one trajectory and their index gap.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub s: State,
    pub s_prime: State,
    pub d_td: u32,
}

/// All ordered pairs `(s_i, s_j, j - i)` with `0 <= i < j <= n` and
/// `j - i <= max_gap`. Zero-gap pairs are never produced.
pub fn extract_pairs(t: &Trajectory, max_gap: Option<usize>) -> Vec<PairSample> {
    let n = t.states.len();
    let gap_limit = max_gap.unwrap_or(usize::MAX);
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = j - i;
            if gap > gap_limit {
                break;
            }
            pairs.push(PairSample {
                s: t.states[i].clone(),
                s_prime: t.states[j].clone(),
                d_td: gap as u32,
            });
        }
    }
    pairs
}

pub fn extract_all_pairs(trajs: &[Trajectory], max_gap: Option<usize>) -> Vec<PairSample> {
    trajs
        .iter()
        .flat_map(|t| extract_pairs(t, max_gap))
        .collect()
}

/// Proportional prioritized replay over pair samples.
///
/// Item `i` is drawn with probability `(p_i + eps)^alpha / sum_j (p_j + eps)^alpha`.
/// Sampling is a binary search over a prefix-sum table that is rebuilt on
/// every priority update.
#[derive(Clone, Debug)]
pub struct PrioritizedBuffer {
    samples: Vec<PairSample>,
    priorities: Vec<f64>,
    cumulative: Vec<f64>,
    alpha: f64,
    eps: f64,
    max_priority: f64,
}

impl PrioritizedBuffer {
    pub const DEFAULT_ALPHA: f64 = 0.6;
    pub const DEFAULT_EPS: f64 = 0.1;

    pub fn new(alpha: f64, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Validation(format!(
                "PER alpha {alpha} not in [0, 1]"
            )));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Validation(format!("PER eps {eps} must be positive")));
        }
        Ok(PrioritizedBuffer {
            samples: Vec::new(),
            priorities: Vec::new(),
            cumulative: Vec::new(),
            alpha,
            eps,
            max_priority: 1.0,
        })
    }

    pub fn with_defaults() -> Self {
        Self::new(Self::DEFAULT_ALPHA, Self::DEFAULT_EPS).expect("default PER parameters")
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[PairSample] {
        &self.samples
    }

    pub fn priorities(&self) -> &[f64] {
        &self.priorities
    }

    fn weight(&self, p: f64) -> f64 {
        (p + self.eps).powf(self.alpha)
    }

    /// New samples enter at the largest priority seen so far.
    pub fn extend(&mut self, samples: impl IntoIterator<Item = PairSample>) {
        let p = self.max_priority;
        let w = self.weight(p);
        let mut total = self.cumulative.last().copied().unwrap_or(0.0);
        for s in samples {
            self.samples.push(s);
            self.priorities.push(p);
            total += w;
            self.cumulative.push(total);
        }
    }

    pub fn push(&mut self, sample: PairSample) {
        self.extend(std::iter::once(sample));
    }

    pub fn probability(&self, index: usize) -> f64 {
        self.weight(self.priorities[index]) / self.cumulative.last().copied().unwrap_or(1.0)
    }

    /// Draws `batch_size` indices with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let total = match self.cumulative.last() {
            Some(&t) => t,
            None => return Err(Error::EmptyBuffer),
        };
        let last = self.samples.len() - 1;
        Ok((0..batch_size)
            .map(|_| {
                let u = rng.gen::<f64>() * total;
                self.cumulative.partition_point(|&c| c <= u).min(last)
            })
            .collect())
    }

    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<PairSample>> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| self.samples[i].clone())
            .collect())
    }

    pub fn update_priorities(&mut self, indices: &[usize], new_priorities: &[f64]) -> Result<()> {
        if indices.len() != new_priorities.len() {
            return Err(Error::Dimension {
                expected: indices.len(),
                got: new_priorities.len(),
            });
        }
        let len = self.samples.len();
        if let Some(&index) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::IndexOutOfRange { index, len });
        }
        if let Some(p) = new_priorities
            .iter()
            .find(|p| !(p.is_finite() && **p >= 0.0))
        {
            return Err(Error::Validation(format!(
                "priority {p} must be finite and non-negative"
            )));
        }
        for (&i, &p) in indices.iter().zip(new_priorities) {
            self.priorities[i] = p;
            self.max_priority = self.max_priority.max(p);
        }
        self.rebuild();
        Ok(())
    }

    fn rebuild(&mut self) {
        let mut total = 0.0;
        for (c, &p) in self.cumulative.iter_mut().zip(&self.priorities) {
            total += (p + self.eps).powf(self.alpha);
            *c = total;
        }
    }
}

/// Writes one JSON record per trajectory per line.
pub fn save_dataset(trajs: &[Trajectory], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajs {
        let line = serde_json::to_string(t).expect("trajectory serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut trajs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, line_no, format!("record {}: {e}", trajs.len())))?;
        t.validate()
            .map_err(|e| Error::parse(path, line_no, format!("record {}: {e}", trajs.len())))?;
        trajs.push(t);
    }
    Ok(trajs)
}
