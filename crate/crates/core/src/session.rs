//! The active-prompting loop: suggest a location, get its label, add it to the
//! prompt set, re-run the backbone and rescore, until a stopping rule fires.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    mutual_information_map, oracle_error_map, oracle_select, predictive_entropy_map, select_next, EnsembleMaps,
    ScoreKind, ScoreMap, StrategyKind,
};
use crate::backbone::{FeatureMap, PromptableSegmenter};
use crate::domain::{iou, BinaryMask, Image, Label, Pixel, Prompt, PromptSet};
use crate::error::{ensure, Error, Result};
use crate::head::{sample_posterior, Ensemble, LaplacePosterior};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopConfig {
    /// Stop once no pixel's mutual information exceeds this (nats).
    pub tau_mi: f64,
    /// Stop once the summed predictive entropy falls to this (nats). `None` disables the rule.
    pub tau_ent: Option<f64>,
    /// Hard cap on the number of prompts.
    pub budget: usize,
}

impl Default for StopConfig {
    fn default() -> Self {
        StopConfig { tau_mi: 0.01, tau_ent: None, budget: 15 }
    }
}

impl StopConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau_mi >= 0.0, "tau_mi must be non-negative");
        ensure!(self.budget >= 1, "budget must be at least 1");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxMiBelowThreshold,
    GlobalEntropyBelowThreshold,
    BudgetExhausted,
    AnnotatorEnded,
    CandidatesExhausted,
}

impl StopReason {
    pub const ALL: [StopReason; 5] = [
        StopReason::MaxMiBelowThreshold,
        StopReason::GlobalEntropyBelowThreshold,
        StopReason::BudgetExhausted,
        StopReason::AnnotatorEnded,
        StopReason::CandidatesExhausted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxMiBelowThreshold => "max_mi_below_threshold",
            StopReason::GlobalEntropyBelowThreshold => "global_entropy_below_threshold",
            StopReason::BudgetExhausted => "budget_exhausted",
            StopReason::AnnotatorEnded => "annotator_ended",
            StopReason::CandidatesExhausted => "candidates_exhausted",
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StopReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StopReason::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown stop reason '{s}'")))
    }
}

/// What the stopping rules look at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopSignals {
    pub max_mi: f64,
    pub h_total: f64,
    pub iteration: usize,
    /// Whether `max_mi` and `h_total` come from a posterior ensemble. Without
    /// one only the budget rule applies.
    pub scored: bool,
}

/// First rule that fires, checked as max-MI, global entropy, then budget.
pub fn check_stop(signals: &StopSignals, config: &StopConfig) -> Option<StopReason> {
    if signals.scored && signals.max_mi <= config.tau_mi {
        return Some(StopReason::MaxMiBelowThreshold);
    }
    if signals.scored && config.tau_ent.is_some_and(|t| signals.h_total <= t) {
        return Some(StopReason::GlobalEntropyBelowThreshold);
    }
    if signals.iteration >= config.budget {
        return Some(StopReason::BudgetExhausted);
    }
    None
}

/// A recorded prompt sequence replayed by the `human_replay` strategy.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayLog {
    pub prompts: Vec<Prompt>,
}

impl ReplayLog {
    /// Reads the prompts of a trajectory log (its per-iteration lines).
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let t = Trajectory::from_jsonl(text)?;
        Ok(ReplayLog { prompts: t.records.iter().map(|r| Prompt::new(r.q, r.label)).collect() })
    }
}

/// Strategy plus whatever it needs beyond the session seed.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Bald,
    Entropy,
    Random,
    Oracle,
    HumanReplay(ReplayLog),
}

impl Strategy {
    pub fn kind(&self) -> StrategyKind {
        match self {
            Strategy::Bald => StrategyKind::Bald,
            Strategy::Entropy => StrategyKind::Entropy,
            Strategy::Random => StrategyKind::Random,
            Strategy::Oracle => StrategyKind::Oracle,
            Strategy::HumanReplay(_) => StrategyKind::HumanReplay,
        }
    }

    /// Strategies that need no extra configuration.
    pub fn simple(kind: StrategyKind) -> Result<Self> {
        Ok(match kind {
            StrategyKind::Bald => Strategy::Bald,
            StrategyKind::Entropy => Strategy::Entropy,
            StrategyKind::Random => Strategy::Random,
            StrategyKind::Oracle => Strategy::Oracle,
            StrategyKind::HumanReplay => {
                return Err(Error::contract("human_replay needs a replay log"));
            }
        })
    }
}

/// Source of labels for queried locations. `None` means the annotator quit.
pub trait Annotator {
    fn label(&mut self, q: Pixel) -> Option<Label>;
}

/// Answers every query from a ground-truth mask.
#[derive(Debug, Clone)]
pub struct SimulatedAnnotator<'a> {
    gt: &'a BinaryMask,
}

impl<'a> SimulatedAnnotator<'a> {
    pub fn new(gt: &'a BinaryMask) -> Self {
        SimulatedAnnotator { gt }
    }
}

impl Annotator for SimulatedAnnotator<'_> {
    fn label(&mut self, q: Pixel) -> Option<Label> {
        Some(Label::from_mask(self.gt, q))
    }
}

/// One answered query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub q: Pixel,
    pub label: Label,
    pub iou: Option<f64>,
    pub max_mi: f64,
    pub h_total: f64,
    pub mask_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<IterationRecord>,
    pub stop: Option<StopReason>,
    pub strategy: StrategyKind,
    pub seed: u64,
}

/// `%.9g`-style formatting: nine significant digits, trailing zeros dropped.
pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return "null".into();
    }
    const DIGITS: i32 = 9;
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..DIGITS).contains(&exp) {
        let decimals = (DIGITS - 1 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let mantissa = trim_zeros(mantissa.to_string());
        format!("{mantissa}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LogLine {
    Record(IterationRecord),
    Stop { stop: String, strategy: StrategyKind, seed: u64 },
}

impl Trajectory {
    pub fn new(strategy: StrategyKind, seed: u64) -> Self {
        Trajectory { records: Vec::new(), stop: None, strategy, seed }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// IoU after each iteration, if every record has one.
    pub fn ious(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.iou).collect()
    }

    /// JSON Lines: one object per iteration, then a stop line if stopped.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let iou = r.iou.map_or_else(|| "null".to_string(), format_float);
            let _ = writeln!(
                out,
                "{{\"t\":{},\"q\":[{},{}],\"label\":{},\"iou\":{},\"max_mi\":{},\"h_total\":{},\"mask_sha256\":\"{}\"}}",
                r.t,
                r.q.row,
                r.q.col,
                r.label.bit(),
                iou,
                format_float(r.max_mi),
                format_float(r.h_total),
                r.mask_sha256
            );
        }
        if let Some(stop) = self.stop {
            let _ = writeln!(out, "{{\"stop\":\"{stop}\",\"strategy\":\"{}\",\"seed\":{}}}", self.strategy, self.seed);
        }
        out
    }

    /// Parses [`to_jsonl`](Self::to_jsonl) output. A log without a stop line
    /// is accepted; strategy and seed then default to `human_replay` and 0.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut t = Trajectory::new(StrategyKind::HumanReplay, 0);
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            ensure_format(t.stop.is_none(), || format!("line {}: data after the stop line", n + 1))?;
            match serde_json::from_str::<LogLine>(line)
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?
            {
                LogLine::Record(r) => {
                    ensure_format(r.t == t.records.len() + 1, || format!("line {}: expected t = {}", n + 1, t.records.len() + 1))?;
                    t.records.push(r);
                }
                LogLine::Stop { stop, strategy, seed } => {
                    t.stop = Some(stop.parse()?);
                    t.strategy = strategy;
                    t.seed = seed;
                }
            }
        }
        Ok(t)
    }
}

fn ensure_format(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Format(msg()))
    }
}

/// The frozen parts a session runs against.
#[derive(Clone)]
pub struct Engine {
    pub backbone: Arc<dyn PromptableSegmenter>,
    pub posterior: Arc<LaplacePosterior>,
    /// Posterior samples per ensemble.
    pub samples_k: usize,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine").field("samples_k", &self.samples_k).finish_non_exhaustive()
    }
}

/// A single-image active-prompting session (the loop state).
pub struct Session {
    backbone: Arc<dyn PromptableSegmenter>,
    ensemble: Option<Ensemble>,
    strategy: Strategy,
    image: Image,
    gt: Option<BinaryMask>,
    prompts: PromptSet,
    queried: HashSet<Pixel>,
    mask: BinaryMask,
    features: FeatureMap,
    scores: ScoreMap,
    suggestion: Option<Pixel>,
    max_mi: f64,
    h_total: f64,
    rng: ChaCha8Rng,
    replay_cursor: usize,
    trajectory: Trajectory,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("strategy", &self.strategy.kind())
            .field("iteration", &self.iteration())
            .field("stop", &self.trajectory.stop)
            .finish_non_exhaustive()
    }
}

impl Session {
    /// Starts from an empty prompt set. Posterior samples are drawn once here,
    /// from `seed`, and reused for every step.
    pub fn new(image: Image, gt: Option<BinaryMask>, strategy: Strategy, engine: &Engine, seed: u64) -> Result<Self> {
        Session::with_prompts(image, gt, strategy, engine, seed, PromptSet::new())
    }

    /// Starts from the given prompts; iterations count only later additions.
    pub fn with_prompts(
        image: Image,
        gt: Option<BinaryMask>,
        strategy: Strategy,
        engine: &Engine,
        seed: u64,
        seed_prompts: PromptSet,
    ) -> Result<Self> {
        if let Some(gt) = &gt {
            ensure!(gt.shape() == (image.height(), image.width()), "ground truth shape differs from image");
        }
        ensure!(
            strategy.kind() != StrategyKind::Oracle || gt.is_some(),
            "the oracle strategy needs a ground-truth mask"
        );
        let seed_prompts = PromptSet::seeded(seed_prompts.prompts().iter().copied())?;
        for p in seed_prompts.locations() {
            ensure!(p.in_bounds(image.height(), image.width()), "seed prompt {p} outside the image");
        }
        let ensemble = if strategy.kind().uses_ensemble() {
            let samples = sample_posterior(&engine.posterior, engine.samples_k, seed)?;
            Some(Ensemble::new(&samples, &engine.backbone.prompt_independent_channels())?)
        } else {
            None
        };
        let (h, w) = (image.height(), image.width());
        let kind = strategy.kind();
        let mut session = Session {
            backbone: Arc::clone(&engine.backbone),
            ensemble,
            strategy,
            queried: seed_prompts.locations().collect(),
            prompts: seed_prompts,
            mask: BinaryMask::empty(h, w),
            features: FeatureMap::zeros(1, 1, 1),
            scores: ScoreMap::zeros(h, w, ScoreKind::Random),
            suggestion: None,
            max_mi: 0.0,
            h_total: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            replay_cursor: 0,
            trajectory: Trajectory::new(kind, seed),
            image,
            gt,
        };
        session.refresh()?;
        Ok(session)
    }

    pub fn strategy(&self) -> StrategyKind {
        self.strategy.kind()
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn ground_truth(&self) -> Option<&BinaryMask> {
        self.gt.as_ref()
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn iteration(&self) -> usize {
        self.prompts.iteration()
    }

    pub fn current_mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn current_scores(&self) -> &ScoreMap {
        &self.scores
    }

    pub fn max_mi(&self) -> f64 {
        self.max_mi
    }

    pub fn h_total(&self) -> f64 {
        self.h_total
    }

    /// Next location the strategy would query; `None` when it has none left.
    pub fn suggestion(&self) -> Option<Pixel> {
        self.suggestion
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.trajectory
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.trajectory.stop
    }

    pub fn is_stopped(&self) -> bool {
        self.trajectory.stop.is_some()
    }

    /// IoU of the current mask against the ground truth, when known.
    pub fn current_iou(&self) -> Option<f64> {
        self.gt.as_ref().map(|gt| iou(&self.mask, gt).expect("shapes checked at construction"))
    }

    pub fn signals(&self) -> StopSignals {
        StopSignals {
            max_mi: self.max_mi,
            h_total: self.h_total,
            iteration: self.iteration(),
            scored: self.strategy.kind().uses_ensemble(),
        }
    }

    pub fn check_stop(&self, config: &StopConfig) -> Option<StopReason> {
        check_stop(&self.signals(), config)
    }

    /// Marks the session finished. Later steps fail.
    pub fn stop(&mut self, reason: StopReason) -> Result<()> {
        if let Some(r) = self.trajectory.stop {
            return Err(Error::SessionStopped(r.to_string()));
        }
        self.trajectory.stop = Some(reason);
        Ok(())
    }

    /// Recomputes the current score map from scratch (ensemble strategies only).
    pub fn recompute_scores(&mut self) -> Result<ScoreMap> {
        let (scores, _, _) = self.ensemble_scores()?;
        Ok(scores)
    }

    fn ensemble_scores(&mut self) -> Result<(ScoreMap, f64, f64)> {
        let Some(ensemble) = self.ensemble.as_mut() else {
            return Err(Error::contract(format!("{} does not score with an ensemble", self.strategy.kind())));
        };
        let ensemble = EnsembleMaps::new(ensemble.forward(&self.features)?)?;
        let mi = mutual_information_map(&ensemble);
        let entropy = predictive_entropy_map(&ensemble);
        let w = self.image.width();
        let (mut max_mi, mut h_total) = (0.0f64, 0.0);
        for (i, (&m, &h)) in mi.values().iter().zip(entropy.values()).enumerate() {
            if self.queried.contains(&Pixel::from_linear(i, w)) {
                continue;
            }
            max_mi = max_mi.max(m);
            h_total += h;
        }
        let scores = if self.strategy.kind() == StrategyKind::Bald { mi } else { entropy };
        Ok((scores, max_mi, h_total))
    }

    /// Re-runs the backbone on the current prompts and rescores.
    fn refresh(&mut self) -> Result<()> {
        let out = self.backbone.predict_mask(&self.image, &self.prompts)?;
        self.mask = out.mask;
        self.features = out.features;
        let (h, w) = (self.image.height(), self.image.width());
        match &self.strategy {
            Strategy::Bald | Strategy::Entropy => {
                let (scores, max_mi, h_total) = self.ensemble_scores()?;
                self.scores = scores;
                self.max_mi = max_mi;
                self.h_total = h_total;
                self.suggestion = match select_next(&self.scores, &self.queried) {
                    Ok(p) => Some(p),
                    Err(Error::CandidatesExhausted) => None,
                    Err(e) => return Err(e),
                };
            }
            Strategy::Random => {
                let values: Vec<f64> = (0..h * w).map(|_| self.rng.gen::<f64>()).collect();
                self.scores = ScoreMap::new(h, w, values, ScoreKind::Random)?;
                self.suggestion = match select_next(&self.scores, &self.queried) {
                    Ok(p) => Some(p),
                    Err(Error::CandidatesExhausted) => None,
                    Err(e) => return Err(e),
                };
            }
            Strategy::Oracle => {
                let gt = self.gt.as_ref().expect("checked at construction");
                self.scores = oracle_error_map(&self.mask, gt)?;
                self.suggestion = oracle_select(&self.mask, gt, &self.queried)?;
            }
            Strategy::HumanReplay(log) => {
                self.scores = ScoreMap::zeros(h, w, ScoreKind::Random);
                while self.replay_cursor < log.prompts.len() && self.queried.contains(&log.prompts[self.replay_cursor].location) {
                    self.replay_cursor += 1;
                }
                self.suggestion = log.prompts.get(self.replay_cursor).map(|p| p.location);
            }
        }
        Ok(())
    }

    /// Adds a labelled prompt at any unqueried in-bounds location, re-runs the
    /// backbone, rescores and records the iteration.
    pub fn apply_label(&mut self, q: Pixel, label: Label) -> Result<&IterationRecord> {
        if let Some(r) = self.trajectory.stop {
            return Err(Error::SessionStopped(r.to_string()));
        }
        self.prompts.push_within(Prompt::new(q, label), self.image.height(), self.image.width())?;
        self.queried.insert(q);
        self.refresh()?;
        let record = IterationRecord {
            t: self.iteration(),
            q,
            label,
            iou: self.current_iou(),
            max_mi: self.max_mi,
            h_total: self.h_total,
            mask_sha256: self.mask.sha256(),
        };
        self.trajectory.records.push(record);
        Ok(self.trajectory.records.last().expect("just pushed"))
    }

    /// One loop iteration: query the suggested location, ask the annotator
    /// (or the replay log) for its label, and apply it.
    ///
    /// Fails with [`Error::CandidatesExhausted`] when the strategy has nothing
    /// left to query, and returns `Ok(None)` if the annotator quit; neither
    /// changes the session.
    pub fn step(&mut self, annotator: &mut dyn Annotator) -> Result<Option<&IterationRecord>> {
        if let Some(r) = self.trajectory.stop {
            return Err(Error::SessionStopped(r.to_string()));
        }
        let q = self.suggestion.ok_or(Error::CandidatesExhausted)?;
        let label = match &self.strategy {
            Strategy::HumanReplay(log) => Some(log.prompts[self.replay_cursor].label),
            _ => annotator.label(q),
        };
        match label {
            Some(label) => self.apply_label(q, label).map(Some),
            None => Ok(None),
        }
    }
}

/// Which stopping rules a run honours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rules {
    All,
    BudgetOnly,
}

fn drive(mut session: Session, annotator: &mut dyn Annotator, config: &StopConfig, rules: Rules) -> Result<Trajectory> {
    config.validate()?;
    loop {
        let reason = match rules {
            Rules::All => session.check_stop(config),
            Rules::BudgetOnly => (session.iteration() >= config.budget).then_some(StopReason::BudgetExhausted),
        };
        if let Some(reason) = reason {
            session.stop(reason)?;
            break;
        }
        match session.step(annotator) {
            Ok(Some(_)) => {}
            Ok(None) => {
                session.stop(StopReason::AnnotatorEnded)?;
                break;
            }
            Err(Error::CandidatesExhausted) => {
                session.stop(StopReason::CandidatesExhausted)?;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(session.into_trajectory())
}

/// Runs a session to completion from an empty prompt set.
pub fn run_session(
    image: &Image,
    gt: Option<&BinaryMask>,
    annotator: &mut dyn Annotator,
    strategy: Strategy,
    engine: &Engine,
    config: &StopConfig,
    seed: u64,
) -> Result<Trajectory> {
    let session = Session::new(image.clone(), gt.cloned(), strategy, engine, seed)?;
    drive(session, annotator, config, Rules::All)
}

/// Simulated run against a ground-truth mask.
pub fn run_simulated(image: &Image, gt: &BinaryMask, strategy: Strategy, engine: &Engine, config: &StopConfig, seed: u64) -> Result<Trajectory> {
    run_session(image, Some(gt), &mut SimulatedAnnotator::new(gt), strategy, engine, config, seed)
}

/// Runs one strategy for exactly `t_budget` iterations, ignoring every
/// stopping rule except running out of candidates.
pub fn run_matched(image: &Image, gt: &BinaryMask, strategy: Strategy, engine: &Engine, t_budget: usize, seed: u64) -> Result<Trajectory> {
    ensure!(t_budget >= 1, "matched budget must be at least 1");
    let session = Session::new(image.clone(), Some(gt.clone()), strategy, engine, seed)?;
    let config = StopConfig { budget: t_budget, ..StopConfig::default() };
    drive(session, &mut SimulatedAnnotator::new(gt), &config, Rules::BudgetOnly)
}

/// Entropy, random and oracle runs at BALD's iteration count `t_budget`, in that order.
pub fn run_matched_baselines(image: &Image, gt: &BinaryMask, engine: &Engine, t_budget: usize, seed: u64) -> Result<Vec<Trajectory>> {
    StrategyKind::MATCHED_BASELINES
        .into_iter()
        .map(|k| run_matched(image, gt, Strategy::simple(k)?, engine, t_budget, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ToyBackbone;
    use crate::head::{Architecture, HeadParams};
    use crate::synth::{generate_scene, Profile, SceneSpec};

    fn engine(posterior: LaplacePosterior, k: usize) -> Engine {
        Engine { backbone: Arc::new(ToyBackbone::default()), posterior: Arc::new(posterior), samples_k: k }
    }

    fn spread_posterior(precision: f64) -> LaplacePosterior {
        let mean = HeadParams::init(Architecture::new(32, &[4]).unwrap(), 3);
        let n = mean.len();
        LaplacePosterior::new(mean, vec![precision; n], 1).unwrap()
    }

    fn scene(seed: u64) -> (Image, BinaryMask) {
        generate_scene(&SceneSpec::new(Profile::Blobs, seed).with_size(24)).unwrap()
    }

    #[test]
    fn stop_rule_examples() {
        let cfg = StopConfig::default();
        let s = |max_mi, iteration| StopSignals { max_mi, h_total: 10.0, iteration, scored: true };
        assert_eq!(check_stop(&s(0.005, 2), &cfg), Some(StopReason::MaxMiBelowThreshold));
        assert_eq!(check_stop(&s(0.5, 15), &cfg), Some(StopReason::BudgetExhausted));
        assert_eq!(check_stop(&s(0.02, 3), &cfg), None);
        let ent = StopConfig { tau_ent: Some(20.0), ..cfg };
        assert_eq!(check_stop(&s(0.02, 15), &ent), Some(StopReason::GlobalEntropyBelowThreshold));
        assert_eq!(check_stop(&s(0.001, 15), &ent), Some(StopReason::MaxMiBelowThreshold));
        let unscored = StopSignals { max_mi: 0.0, h_total: 0.0, iteration: 3, scored: false };
        assert_eq!(check_stop(&unscored, &ent), None);
    }

    #[test]
    fn float_format() {
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(0.5), "0.5");
        assert_eq!(format_float(1.0), "1");
        assert_eq!(format_float(1.0 / 3.0), "0.333333333");
        assert_eq!(format_float(123.456789012), "123.456789");
        assert_eq!(format_float(1.5e-7), "1.5e-07");
        assert_eq!(format_float(0.000123456789012), "0.000123456789");
        assert_eq!(format_float(2.5e10), "2.5e+10");
        assert_eq!(format_float(-0.25), "-0.25");
    }

    #[test]
    fn simulated_labels_follow_ground_truth() {
        let (image, gt) = scene(1);
        let e = engine(spread_posterior(50.0), 4);
        let mut s = Session::new(image, Some(gt.clone()), Strategy::Random, &e, 9).unwrap();
        let mut ann = SimulatedAnnotator::new(&gt);
        for _ in 0..5 {
            let before = s.prompts().len();
            let r = s.step(&mut ann).unwrap().unwrap().clone();
            assert_eq!(r.label, Label::from_mask(&gt, r.q));
            assert_eq!(s.prompts().len(), before + 1);
        }
        assert_eq!(s.iteration(), 5);
    }

    #[test]
    fn point_mass_posterior_has_no_disagreement() {
        let (image, gt) = scene(2);
        let mean = HeadParams::init(Architecture::new(32, &[4]).unwrap(), 1);
        let e = engine(LaplacePosterior::point_mass(mean), 5);
        let mut s = Session::new(image, Some(gt.clone()), Strategy::Bald, &e, 0).unwrap();
        assert!(s.max_mi() <= 1e-12);
        assert_eq!(s.check_stop(&StopConfig::default()), Some(StopReason::MaxMiBelowThreshold));
        s.step(&mut SimulatedAnnotator::new(&gt)).unwrap();
        assert!(s.max_mi() <= 1e-12);
        let t = run_simulated(s.image(), &gt, Strategy::Bald, &e, &StopConfig::default(), 0).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.stop, Some(StopReason::MaxMiBelowThreshold));
    }

    #[test]
    fn scores_are_fresh_after_each_step() {
        let (image, gt) = scene(3);
        let e = engine(spread_posterior(20.0), 4);
        let mut s = Session::new(image, Some(gt.clone()), Strategy::Bald, &e, 4).unwrap();
        let mut ann = SimulatedAnnotator::new(&gt);
        for _ in 0..3 {
            s.step(&mut ann).unwrap();
            assert_eq!(&s.recompute_scores().unwrap(), s.current_scores());
            assert!(s.h_total() >= s.max_mi() && s.max_mi() >= 0.0);
        }
    }

    #[test]
    fn runs_respect_budget_and_are_deterministic() {
        let (image, gt) = scene(4);
        let e = engine(spread_posterior(5.0), 4);
        let cfg = StopConfig { tau_mi: 0.0, budget: 6, ..StopConfig::default() };
        let a = run_simulated(&image, &gt, Strategy::Bald, &e, &cfg, 11).unwrap();
        let b = run_simulated(&image, &gt, Strategy::Bald, &e, &cfg, 11).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert!(a.len() <= 6);
        for (i, r) in a.records.iter().enumerate() {
            assert_eq!(r.t, i + 1);
        }
        assert_eq!(Trajectory::from_jsonl(&a.to_jsonl()).unwrap().to_jsonl(), a.to_jsonl());
    }

    #[test]
    fn matched_baselines_run_exactly_t() {
        let (image, gt) = scene(5);
        let e = engine(spread_posterior(50.0), 3);
        let runs = run_matched_baselines(&image, &gt, &e, 7, 2).unwrap();
        let kinds: Vec<_> = runs.iter().map(|t| t.strategy).collect();
        assert_eq!(kinds, StrategyKind::MATCHED_BASELINES);
        for t in &runs {
            if t.stop == Some(StopReason::BudgetExhausted) {
                assert_eq!(t.len(), 7);
            } else {
                assert_eq!(t.stop, Some(StopReason::CandidatesExhausted));
                assert!(t.len() < 7);
            }
        }
        assert!(run_matched_baselines(&image, &gt, &e, 0, 2).is_err());
    }

    #[test]
    fn oracle_on_empty_truth_stops_at_once() {
        let image = Image::uniform(16, 16, 0.4).unwrap();
        let gt = BinaryMask::empty(16, 16);
        let e = engine(spread_posterior(50.0), 2);
        let t = run_simulated(&image, &gt, Strategy::Oracle, &e, &StopConfig::default(), 0).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.stop, Some(StopReason::CandidatesExhausted));
    }

    #[test]
    fn oracle_run_stops_when_no_error_left() {
        // A tiny object is fixed by one inclusion prompt; everything after is exclusions.
        let (image, gt) = scene(6);
        let e = engine(spread_posterior(50.0), 2);
        let cfg = StopConfig { budget: 15, ..StopConfig::default() };
        let t = run_simulated(&image, &gt, Strategy::Oracle, &e, &cfg, 0).unwrap();
        assert!(t.len() <= 15);
        let queried: HashSet<Pixel> = t.records.iter().map(|r| r.q).collect();
        assert_eq!(queried.len(), t.len());
    }

    #[test]
    fn stopped_session_rejects_steps() {
        let (image, gt) = scene(7);
        let e = engine(spread_posterior(50.0), 2);
        let mut s = Session::new(image, Some(gt.clone()), Strategy::Random, &e, 0).unwrap();
        s.stop(StopReason::AnnotatorEnded).unwrap();
        assert!(matches!(s.step(&mut SimulatedAnnotator::new(&gt)), Err(Error::SessionStopped(_))));
        assert!(s.apply_label(Pixel::new(0, 0), Label::Include).is_err());
    }

    #[test]
    fn replay_follows_log() {
        let (image, gt) = scene(8);
        let e = engine(spread_posterior(50.0), 2);
        let log = ReplayLog { prompts: vec![Prompt::include(3, 3), Prompt::exclude(0, 0), Prompt::include(3, 3)] };
        let cfg = StopConfig::default();
        let t = run_simulated(&image, &gt, Strategy::HumanReplay(log.clone()), &e, &cfg, 0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.records[1].q, Pixel::new(0, 0));
        assert_eq!(t.records[0].label, Label::Include);
        assert_eq!(t.stop, Some(StopReason::CandidatesExhausted));
        assert_eq!(ReplayLog::from_jsonl(&t.to_jsonl()).unwrap().prompts, log.prompts[..2]);
    }

    #[test]
    fn annotator_quitting_ends_session() {
        struct Quitter;
        impl Annotator for Quitter {
            fn label(&mut self, _: Pixel) -> Option<Label> {
                None
            }
        }
        let (image, gt) = scene(9);
        let e = engine(spread_posterior(50.0), 2);
        let t = run_session(&image, Some(&gt), &mut Quitter, Strategy::Random, &e, &StopConfig::default(), 0).unwrap();
        assert_eq!(t.stop, Some(StopReason::AnnotatorEnded));
        assert!(t.is_empty());
    }
}
