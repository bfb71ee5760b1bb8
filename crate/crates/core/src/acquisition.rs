//! From a posterior ensemble to the next query.
//!
//! BALD scores a pixel by the mutual information between its label and the
//! head parameters, `h(mean_k p_k) - mean_k h(p_k)`: high where the posterior
//! samples are individually confident but disagree with each other.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::domain::{binary_entropy, BinaryMask, Pixel, ProbabilityMap};
use crate::error::{ensure, Error, Result};
use crate::head::{ensemble_forward, HeadParams};

/// One probability map per posterior sample, all of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMaps {
    maps: Vec<ProbabilityMap>,
}

impl EnsembleMaps {
    pub fn new(maps: Vec<ProbabilityMap>) -> Result<Self> {
        ensure!(!maps.is_empty(), "an ensemble needs at least one map");
        let shape = maps[0].shape();
        ensure!(maps.iter().all(|m| m.shape() == shape), "ensemble maps differ in shape");
        Ok(EnsembleMaps { maps })
    }

    pub fn maps(&self) -> &[ProbabilityMap] {
        &self.maps
    }

    pub fn k(&self) -> usize {
        self.maps.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.maps[0].shape()
    }

    /// Pixelwise posterior-predictive mean.
    pub fn mean(&self) -> ProbabilityMap {
        let (h, w) = self.shape();
        let mut acc = vec![0.0; h * w];
        for m in &self.maps {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let k = self.k() as f64;
        ProbabilityMap::new(h, w, acc.into_iter().map(|a| a / k).collect()).expect("mean of valid maps")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    MutualInformation,
    PredictiveEntropy,
    Random,
    OracleError,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::MutualInformation => "mutual_information",
            ScoreKind::PredictiveEntropy => "predictive_entropy",
            ScoreKind::Random => "random",
            ScoreKind::OracleError => "oracle_error",
        }
    }
}

/// Non-negative per-pixel acquisition scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    kind: ScoreKind,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, kind: ScoreKind) -> Result<Self> {
        ensure!(
            values.len() == height * width,
            "score map has {} values for a {height}x{width} grid",
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite() && *v >= 0.0),
            "scores must be finite and non-negative"
        );
        Ok(ScoreMap { height, width, values, kind })
    }

    pub fn zeros(height: usize, width: usize, kind: ScoreKind) -> Self {
        ScoreMap { height, width, values: vec![0.0; height * width], kind }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn get(&self, p: Pixel) -> f64 {
        self.values[p.linear(self.width)]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Applies `f` to every score; the result must stay finite and non-negative.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        ScoreMap::new(self.height, self.width, self.values.iter().map(|&v| f(v)).collect(), self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Bald,
    Entropy,
    Random,
    Oracle,
    HumanReplay,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Bald,
        StrategyKind::Entropy,
        StrategyKind::Random,
        StrategyKind::Oracle,
        StrategyKind::HumanReplay,
    ];

    /// Strategies compared against BALD under a matched budget.
    pub const MATCHED_BASELINES: [StrategyKind; 3] = [StrategyKind::Entropy, StrategyKind::Random, StrategyKind::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Bald => "bald",
            StrategyKind::Entropy => "entropy",
            StrategyKind::Random => "random",
            StrategyKind::Oracle => "oracle",
            StrategyKind::HumanReplay => "human_replay",
        }
    }

    /// Whether selection needs the posterior ensemble.
    pub fn uses_ensemble(self) -> bool {
        matches!(self, StrategyKind::Bald | StrategyKind::Entropy)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown strategy '{s}'")))
    }
}

/// Runs every sample through the head with dropout off.
pub fn predictive_ensemble(features: &FeatureMap, samples: &[HeadParams]) -> Result<EnsembleMaps> {
    EnsembleMaps::new(ensemble_forward(features, samples)?)
}

/// Per-pixel BALD score in nats, clamped below at zero.
pub fn mutual_information_map(ensemble: &EnsembleMaps) -> ScoreMap {
    let (h, w) = ensemble.shape();
    let k = ensemble.k() as f64;
    let mut mean = vec![0.0; h * w];
    let mut expected = vec![0.0; h * w];
    for m in ensemble.maps() {
        for ((s, e), &p) in mean.iter_mut().zip(expected.iter_mut()).zip(m.values()) {
            *s += p;
            *e += binary_entropy(p);
        }
    }
    let values = mean
        .iter()
        .zip(&expected)
        .map(|(&s, &e)| (binary_entropy(s / k) - e / k).max(0.0))
        .collect();
    ScoreMap { height: h, width: w, values, kind: ScoreKind::MutualInformation }
}

/// Per-pixel entropy of the predictive mean.
pub fn predictive_entropy_map(ensemble: &EnsembleMaps) -> ScoreMap {
    let (h, w) = ensemble.shape();
    let values = ensemble.mean().values().iter().map(|&p| binary_entropy(p)).collect();
    ScoreMap { height: h, width: w, values, kind: ScoreKind::PredictiveEntropy }
}

/// Argmax over all pixels not yet queried; ties go to the lowest row-major index.
pub fn select_next(scores: &ScoreMap, queried: &HashSet<Pixel>) -> Result<Pixel> {
    select_next_strided(scores, queried, 1)
}

/// As [`select_next`], restricted to the lattice of rows and columns divisible by `stride`.
pub fn select_next_strided(scores: &ScoreMap, queried: &HashSet<Pixel>, stride: usize) -> Result<Pixel> {
    ensure!(stride >= 1, "stride must be at least 1");
    let mut best: Option<(f64, Pixel)> = None;
    for row in (0..scores.height).step_by(stride) {
        for col in (0..scores.width).step_by(stride) {
            let p = Pixel::new(row, col);
            if queried.contains(&p) {
                continue;
            }
            let v = scores.get(p);
            if best.map_or(true, |(b, _)| v > b) {
                best = Some((v, p));
            }
        }
    }
    best.map(|(_, p)| p).ok_or(Error::CandidatesExhausted)
}

/// Error map `|predicted - gt|` as a score map.
pub fn oracle_error_map(predicted: &BinaryMask, gt: &BinaryMask) -> Result<ScoreMap> {
    ensure!(predicted.shape() == gt.shape(), "predicted and ground-truth masks differ in shape");
    let values = predicted.bits().iter().zip(gt.bits()).map(|(a, b)| if a != b { 1.0 } else { 0.0 }).collect();
    ScoreMap::new(gt.height(), gt.width(), values, ScoreKind::OracleError)
}

/// Picks the most interior pixel of the largest 4-connected component of
/// unqueried error pixels. `None` when no such pixel is left.
pub fn oracle_select(predicted: &BinaryMask, gt: &BinaryMask, queried: &HashSet<Pixel>) -> Result<Option<Pixel>> {
    ensure!(predicted.shape() == gt.shape(), "predicted and ground-truth masks differ in shape");
    let (h, w) = gt.shape();
    let error: Vec<bool> = predicted
        .bits()
        .iter()
        .zip(gt.bits())
        .enumerate()
        .map(|(i, (a, b))| a != b && !queried.contains(&Pixel::from_linear(i, w)))
        .collect();

    // Label components in scan order; keep the first of the largest.
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, Vec<usize>)> = None;
    for start in 0..h * w {
        if !error[start] || label[start] != usize::MAX {
            continue;
        }
        let id = start;
        let mut members = vec![start];
        label[start] = id;
        let mut head = 0;
        while head < members.len() {
            let i = members[head];
            head += 1;
            for j in neighbours(i, h, w).into_iter().flatten() {
                if error[j] && label[j] == usize::MAX {
                    label[j] = id;
                    members.push(j);
                }
            }
        }
        if best.as_ref().map_or(true, |(n, _)| members.len() > *n) {
            best = Some((members.len(), members));
        }
    }
    let Some((_, members)) = best else {
        return Ok(None);
    };

    // Multi-source BFS from the component's edge pixels; leaving the image counts as leaving the component.
    let inside: HashSet<usize> = members.iter().copied().collect();
    let mut dist = vec![usize::MAX; h * w];
    let mut queue = VecDeque::new();
    for &i in &members {
        let on_edge = neighbours(i, h, w).iter().any(|n| n.map_or(true, |j| !inside.contains(&j)));
        if on_edge {
            dist[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours(i, h, w).into_iter().flatten() {
            if inside.contains(&j) && dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    let mut sorted = members;
    sorted.sort_unstable();
    let pick = sorted.iter().copied().fold(sorted[0], |b, i| if dist[i] > dist[b] { i } else { b });
    Ok(Some(Pixel::from_linear(pick, w)))
}

fn neighbours(i: usize, h: usize, w: usize) -> [Option<usize>; 4] {
    let (r, c) = (i / w, i % w);
    [
        (r > 0).then(|| i - w),
        (r + 1 < h).then(|| i + w),
        (c > 0).then(|| i - 1),
        (c + 1 < w).then(|| i + 1),
    ]
}
