//! Exact minimum action distances by breadth-first search, and the metrics
//! that compare learned distances and planners against them.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingModel;
use crate::envs::{EnvSpec, State, StateSpace};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::trajdata::PairSample;

pub const UNREACHABLE: u32 = u32::MAX;

/// All-pairs directed action distances over an enumerated state space.
#[derive(Clone, Debug)]
pub struct MadTable {
    pub space: StateSpace,
    dist: Vec<u32>,
}

pub fn compute_mad(spec: &EnvSpec, exec: Exec) -> Result<MadTable> {
    if !spec.is_enumerable() {
        return Err(Error::Unsupported(format!(
            "no exact distance oracle for {:?}",
            spec.kind
        )));
    }
    let space = StateSpace::new(spec)?;
    let n = space.len();
    let rows = exec.map_range(n, |src| bfs_row(&space.successors, src));
    let mut dist = Vec::with_capacity(n * n);
    for r in rows {
        dist.extend(r);
    }
    Ok(MadTable { space, dist })
}

fn bfs_row(successors: &[Vec<usize>], src: usize) -> Vec<u32> {
    let mut row = vec![UNREACHABLE; successors.len()];
    let mut queue = VecDeque::new();
    row[src] = 0;
    queue.push_back(src);
    while let Some(u) = queue.pop_front() {
        let du = row[u];
        for &v in &successors[u] {
            if row[v] == UNREACHABLE {
                row[v] = du + 1;
                queue.push_back(v);
            }
        }
    }
    row
}

impl MadTable {
    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    pub fn states(&self) -> &[State] {
        &self.space.states
    }

    pub fn directed(&self, from: usize, to: usize) -> Option<u32> {
        let d = self.dist[from * self.len() + to];
        (d != UNREACHABLE).then_some(d)
    }

    /// `min(MAD(a, b), MAD(b, a))`.
    pub fn symmetric(&self, a: usize, b: usize) -> Option<u32> {
        match (self.directed(a, b), self.directed(b, a)) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        }
    }

    pub fn mad(&self, from: &State, to: &State) -> Option<u32> {
        self.directed(self.space.index_of(from)?, self.space.index_of(to)?)
    }

    pub fn symmetric_mad(&self, a: &State, b: &State) -> Option<u32> {
        self.symmetric(self.space.index_of(a)?, self.space.index_of(b)?)
    }

    /// Checks zero self-distance, the triangle inequality and one-step
    /// (Bellman) consistency over the whole table.
    pub fn audit(&self) -> Result<()> {
        let n = self.len();
        let fail = |msg: String| Err(Error::Validation(format!("MAD audit: {msg}")));
        for s in 0..n {
            if self.directed(s, s) != Some(0) {
                return fail(format!("MAD({s}, {s}) != 0"));
            }
            for u in 0..n {
                if s == u {
                    continue;
                }
                let best = self.space.successors[s]
                    .iter()
                    .filter_map(|&v| self.directed(v, u))
                    .min()
                    .map(|d| d + 1);
                if self.directed(s, u) != best {
                    return fail(format!(
                        "MAD({s}, {u}) not one more than the best successor"
                    ));
                }
            }
        }
        for s in 0..n {
            for v in 0..n {
                let Some(sv) = self.directed(s, v) else {
                    continue;
                };
                for u in 0..n {
                    if let Some(vu) = self.directed(v, u) {
                        match self.directed(s, u) {
                            Some(su) if su <= sv + vu => {}
                            _ => {
                                return fail(format!(
                                    "triangle inequality broken at ({s}, {v}, {u})"
                                ))
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation with tie-averaged ranks. Zero when either
/// series is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs equal-length series");
    if x.len() < 2 {
        return 0.0;
    }
    pearson(&ranks(x), &ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PairSelection {
    /// Every unordered pair of distinct states.
    All,
    /// Uniformly random unordered pairs of distinct states.
    Sampled { count: usize, seed: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: Option<f64>,
    pub spearman: Option<f64>,
    pub violation_rate: Option<f64>,
    pub success_rate: Option<f64>,
    pub mean_path_ratio: Option<f64>,
    /// Mean one-step latent error of the dynamics model.
    pub dynamics_error: Option<f64>,
    /// Mean embedded distance between adjacent dataset states.
    pub adjacent_distance: Option<f64>,
    pub finite_pairs: usize,
    pub unreachable_pairs: usize,
}

impl EvalReport {
    /// Flat `key = value` text; missing values print as `undefined`.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:?}"));
        let mut out = String::new();
        writeln!(out, "mae = {}", fmt(self.mae)).unwrap();
        writeln!(out, "spearman = {}", fmt(self.spearman)).unwrap();
        writeln!(out, "violation_rate = {}", fmt(self.violation_rate)).unwrap();
        writeln!(out, "success_rate = {}", fmt(self.success_rate)).unwrap();
        writeln!(out, "mean_path_ratio = {}", fmt(self.mean_path_ratio)).unwrap();
        writeln!(out, "dynamics_error = {}", fmt(self.dynamics_error)).unwrap();
        writeln!(out, "adjacent_distance = {}", fmt(self.adjacent_distance)).unwrap();
        writeln!(out, "finite_pairs = {}", self.finite_pairs).unwrap();
        writeln!(out, "unreachable_pairs = {}", self.unreachable_pairs).unwrap();
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = EvalReport::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::parse("report", i + 1, "expected `key = value`"))?;
            let real = || -> Result<Option<f64>> {
                if v == "undefined" {
                    return Ok(None);
                }
                v.parse()
                    .map(Some)
                    .map_err(|_| Error::parse("report", i + 1, format!("bad number `{v}`")))
            };
            let count = || -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::parse("report", i + 1, format!("bad count `{v}`")))
            };
            match k {
                "mae" => r.mae = real()?,
                "spearman" => r.spearman = real()?,
                "violation_rate" => r.violation_rate = real()?,
                "success_rate" => r.success_rate = real()?,
                "mean_path_ratio" => r.mean_path_ratio = real()?,
                "dynamics_error" => r.dynamics_error = real()?,
                "adjacent_distance" => r.adjacent_distance = real()?,
                "finite_pairs" => r.finite_pairs = count()?,
                "unreachable_pairs" => r.unreachable_pairs = count()?,
                other => {
                    return Err(Error::parse(
                        "report",
                        i + 1,
                        format!("unknown key `{other}`"),
                    ))
                }
            }
        }
        Ok(r)
    }
}

/// Fraction of pairs whose embedded distance exceeds `d_td + tolerance`.
pub fn violation_rate(model: &EmbeddingModel, pairs: &[PairSample], tolerance: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("no pairs to audit".into()));
    }
    let states: Vec<State> = pairs
        .iter()
        .flat_map(|p| [p.s.clone(), p.s_prime.clone()])
        .collect();
    let z = model.embed_batch(&states)?;
    let violations = pairs
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let d = model.latent_distance(
                z.row(2 * i).as_slice().expect("row"),
                z.row(2 * i + 1).as_slice().expect("row"),
            );
            d > p.d_td as f64 + tolerance
        })
        .count();
    Ok(violations as f64 / pairs.len() as f64)
}

/// MAE and Spearman correlation between learned distances and symmetric MAD
/// over the selected pairs; unreachable pairs are counted and skipped. With
/// `training_pairs`, also reports the violation rate at tolerance 0.5.
pub fn evaluate_embedding(
    model: &EmbeddingModel,
    mad: &MadTable,
    selection: PairSelection,
    training_pairs: Option<&[PairSample]>,
) -> Result<EvalReport> {
    let n = mad.len();
    let pairs: Vec<(usize, usize)> = match selection {
        PairSelection::All => (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect(),
        PairSelection::Sampled { count, seed } => {
            if n < 2 {
                Vec::new()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..count)
                    .map(|_| {
                        let i = rng.gen_range(0..n);
                        let mut j = rng.gen_range(0..n - 1);
                        if j >= i {
                            j += 1;
                        }
                        (i.min(j), i.max(j))
                    })
                    .collect()
            }
        }
    };
    let z = model.embed_batch(mad.states())?;
    let mut learned = Vec::with_capacity(pairs.len());
    let mut truth = Vec::with_capacity(pairs.len());
    let mut unreachable = 0;
    for &(i, j) in &pairs {
        match mad.symmetric(i, j) {
            Some(d) => {
                truth.push(d as f64);
                learned.push(model.latent_distance(
                    z.row(i).as_slice().expect("row"),
                    z.row(j).as_slice().expect("row"),
                ));
            }
            None => unreachable += 1,
        }
    }
    if truth.is_empty() {
        return Err(Error::Validation("no pairs with a finite distance".into()));
    }
    let mae = learned
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / truth.len() as f64;
    let violation = match training_pairs {
        Some(p) => Some(violation_rate(model, p, 0.5)?),
        None => None,
    };
    Ok(EvalReport {
        mae: Some(mae),
        spearman: Some(spearman(&learned, &truth)),
        violation_rate: violation,
        finite_pairs: truth.len(),
        unreachable_pairs: unreachable,
        ..EvalReport::default()
    })
}

/// One goal-reaching episode, as written to planner reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub start: State,
    pub goal: State,
    pub steps: usize,
    pub success: bool,
    pub final_distance: f64,
}

/// Success rate, and mean `steps / MAD(start, goal)` over successful
/// episodes whose start differs from the goal.
pub fn evaluate_planner(reports: &[EpisodeReport], mad: &MadTable) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::Validation("no episodes to evaluate".into()));
    }
    let successes = reports.iter().filter(|r| r.success).count();
    let mut ratios = Vec::new();
    for r in reports.iter().filter(|r| r.success) {
        let d = mad.mad(&r.start, &r.goal).ok_or_else(|| {
            Error::Validation("episode start/goal not in the oracle state space".into())
        })?;
        if d > 0 {
            ratios.push(r.steps as f64 / d as f64);
        }
    }
    let ratio = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
    Ok(EvalReport {
        success_rate: Some(successes as f64 / reports.len() as f64),
        mean_path_ratio: ratio,
        ..EvalReport::default()
    })
}
