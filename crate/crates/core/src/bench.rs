//! Benchmark harness: BALD to convergence on every (scene, seed), then the
//! baselines at BALD's iteration count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::acquisition::StrategyKind;
use crate::backbone::PromptableSegmenter;
use crate::domain::{iou, PromptSet};
use crate::error::{ensure, Error, Result};
use crate::head::LaplacePosterior;
use crate::io::Scene;
use crate::metrics::{aggregate_report, ReportRow, RunResult};
use crate::session::{run_matched, run_simulated, Engine, ReplayLog, StopConfig, StopReason, Strategy, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub strategies: Vec<StrategyKind>,
    pub stop: StopConfig,
    pub samples_k: usize,
    pub seeds: Vec<u64>,
    /// Directory holding `{scene_id}.jsonl` logs for `human_replay`.
    pub replay_dir: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            strategies: vec![StrategyKind::Bald, StrategyKind::Entropy, StrategyKind::Random, StrategyKind::Oracle],
            stop: StopConfig::default(),
            samples_k: 30,
            seeds: vec![0, 1, 2],
            replay_dir: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.strategies.is_empty(), "no strategies selected");
        ensure!(self.samples_k >= 1, "samples must be at least 1");
        ensure!(!self.seeds.is_empty(), "no seeds given");
        self.stop.validate()?;
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        ensure!(seen.len() == self.strategies.len(), "duplicate strategy in list");
        ensure!(
            !self.strategies.contains(&StrategyKind::HumanReplay) || self.replay_dir.is_some(),
            "human_replay needs a replay directory"
        );
        Ok(())
    }
}

/// Every run of a benchmark, in (scene, seed, strategy) order.
#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub runs: Vec<RunResult>,
    pub rows: Vec<ReportRow>,
}

impl BenchOutput {
    /// File name of a run's trajectory log.
    pub fn trajectory_file_name(run: &RunResult) -> String {
        format!("{}__{}__{}__s{}.jsonl", run.dataset, run.scene, run.strategy(), run.seed)
    }

    /// Writes one JSONL file per run into `dir`.
    pub fn write_trajectories(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for run in &self.runs {
            std::fs::write(dir.join(Self::trajectory_file_name(run)), run.trajectory.to_jsonl())?;
        }
        Ok(())
    }

    /// BALD's iteration count per (scene, seed).
    pub fn bald_lengths(&self) -> BTreeMap<(String, u64), usize> {
        self.runs
            .iter()
            .filter(|r| r.strategy() == StrategyKind::Bald)
            .map(|r| ((r.scene.clone(), r.seed), r.trajectory.len()))
            .collect()
    }
}

fn empty_run(strategy: StrategyKind, seed: u64) -> Trajectory {
    let mut t = Trajectory::new(strategy, seed);
    t.stop = Some(StopReason::BudgetExhausted);
    t
}

/// Runs the benchmark over `scenes`.
///
/// BALD runs with every stopping rule; its length `T` becomes the budget of
/// entropy, random and oracle, which ignore every other rule. Without BALD in
/// the list, `T` is the configured budget. `human_replay` replays its log
/// under the normal rules.
pub fn run_bench(
    scenes: &[Scene],
    backbone: Arc<dyn PromptableSegmenter>,
    posterior: Arc<LaplacePosterior>,
    config: &BenchConfig,
) -> Result<BenchOutput> {
    config.validate()?;
    ensure!(!scenes.is_empty(), "no scenes to benchmark");
    let engine = Engine { backbone: Arc::clone(&backbone), posterior, samples_k: config.samples_k };
    let with_bald = config.strategies.contains(&StrategyKind::Bald);
    let mut runs = Vec::new();
    for scene in scenes {
        let initial = backbone.predict_mask(&scene.image, &PromptSet::new())?;
        let iou0 = iou(&initial.mask, &scene.gt)?;
        let replay = match (&config.replay_dir, config.strategies.contains(&StrategyKind::HumanReplay)) {
            (Some(dir), true) => {
                let path = dir.join(format!("{}.jsonl", scene.id));
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
                })?;
                Some(ReplayLog::from_jsonl(&text)?)
            }
            _ => None,
        };
        for &seed in &config.seeds {
            let mut t_budget = config.stop.budget;
            let mut per_strategy = Vec::new();
            if with_bald {
                let t = run_simulated(&scene.image, &scene.gt, Strategy::Bald, &engine, &config.stop, seed)?;
                t_budget = t.len();
                per_strategy.push(t);
            }
            for &kind in &config.strategies {
                let t = match kind {
                    StrategyKind::Bald => continue,
                    StrategyKind::HumanReplay => {
                        let log = replay.clone().expect("loaded above");
                        run_simulated(&scene.image, &scene.gt, Strategy::HumanReplay(log), &engine, &config.stop, seed)?
                    }
                    _ if t_budget == 0 => empty_run(kind, seed),
                    _ => run_matched(&scene.image, &scene.gt, Strategy::simple(kind)?, &engine, t_budget, seed)?,
                };
                per_strategy.push(t);
            }
            for trajectory in per_strategy {
                runs.push(RunResult {
                    dataset: scene.dataset.clone(),
                    scene: scene.id.clone(),
                    seed,
                    iou0,
                    trajectory,
                });
            }
        }
    }
    let rows = aggregate_report(&runs)?;
    Ok(BenchOutput { runs, rows })
}
