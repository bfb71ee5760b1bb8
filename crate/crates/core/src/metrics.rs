//! Annotation-efficiency metrics over trajectories, calibration error, and
//! the benchmark report table.
//!
//! Per-iteration IoU gains are min-max normalized per dataset, pooling every
//! strategy, seed and iteration of that dataset, so that strategies are
//! compared on one scale and the single largest gain maps to exactly 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::acquisition::StrategyKind;
use crate::error::{ensure, Error, Result};
use crate::session::Trajectory;

/// IoU after each iteration minus IoU before it, starting from `iou0`.
pub fn delta_iou_series(trajectory: &Trajectory, iou0: f64) -> Result<Vec<f64>> {
    let ious = trajectory
        .ious()
        .ok_or_else(|| Error::NotComputable("trajectory has iterations without IoU".into()))?;
    let mut prev = iou0;
    Ok(ious
        .into_iter()
        .map(|v| {
            let d = v - prev;
            prev = v;
            d
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationContext {
    pub dataset: String,
    pub pooled_min: f64,
    pub pooled_max: f64,
}

impl NormalizationContext {
    /// Extremes over every value of every series. Fails when there are no values.
    pub fn pooled<'a>(dataset: &str, series: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in series {
            for &v in s {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        ensure!(lo <= hi, "no values to pool for dataset '{dataset}'");
        Ok(NormalizationContext { dataset: dataset.to_string(), pooled_min: lo, pooled_max: hi })
    }
}

/// `(x - min) / (max - min)`; all zeros when the pool is degenerate.
pub fn minmax_normalize(series: &[f64], ctx: &NormalizationContext) -> Vec<f64> {
    let span = ctx.pooled_max - ctx.pooled_min;
    if span <= 0.0 {
        return vec![0.0; series.len()];
    }
    series.iter().map(|&x| (x - ctx.pooled_min) / span).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub peak: f64,
    pub mean_per_iter: f64,
    /// Trapezoid area over iterations `1..=T`, divided by `T - 1`.
    pub auc: f64,
}

pub fn peak_mean_auc(series: &[f64]) -> Result<CurveSummary> {
    ensure!(!series.is_empty(), "cannot summarise an empty series");
    let n = series.len();
    let peak = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean_per_iter = series.iter().sum::<f64>() / n as f64;
    let auc = if n == 1 {
        series[0]
    } else {
        series.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() / (n - 1) as f64
    };
    Ok(CurveSummary { peak, mean_per_iter, auc })
}

/// Equal-width-bin ECE. `outcomes[i]` says whether the event predicted with
/// probability `probs[i]` happened. Bins are right-open except the last.
pub fn expected_calibration_error(probs: &[f64], outcomes: &[bool], bins: usize) -> Result<f64> {
    ensure!(probs.len() == outcomes.len(), "{} probabilities for {} outcomes", probs.len(), outcomes.len());
    ensure!(bins >= 1, "need at least one bin");
    ensure!(probs.iter().all(|p| (0.0..=1.0).contains(p)), "probabilities must lie in [0, 1]");
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for (&p, &y) in probs.iter().zip(outcomes) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        hits[b] += if y { 1.0 } else { 0.0 };
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] / nb - conf[b] / nb).abs()
        })
        .sum())
}

/// One simulated session inside a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub dataset: String,
    pub scene: String,
    pub seed: u64,
    /// IoU of the prompt-free mask.
    pub iou0: f64,
    pub trajectory: Trajectory,
}

impl RunResult {
    pub fn strategy(&self) -> StrategyKind {
        self.trajectory.strategy
    }

    /// Last recorded IoU, or `iou0` for a run without iterations.
    pub fn final_iou(&self) -> Result<f64> {
        match self.trajectory.records.last() {
            None => Ok(self.iou0),
            Some(r) => r.iou.ok_or_else(|| Error::NotComputable("final iteration has no IoU".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub strategy: String,
    pub seed_count: usize,
    pub peak_mean: f64,
    pub peak_std: f64,
    pub meaniter_mean: f64,
    pub meaniter_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub final_iou_mean: f64,
    pub final_iou_std: f64,
}

pub const REPORT_HEADER: [&str; 11] = [
    "dataset",
    "strategy",
    "seed_count",
    "peak_mean",
    "peak_std",
    "meaniter_mean",
    "meaniter_std",
    "auc_mean",
    "auc_std",
    "final_iou_mean",
    "final_iou_std",
];

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-seed summary of one (dataset, strategy) group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    /// Largest normalized gain over all images.
    pub peak: f64,
    /// Mean over images of each image's mean normalized gain.
    pub mean_per_iter: f64,
    /// Mean over images of each image's normalized AUC.
    pub auc: f64,
    pub final_iou: f64,
}

/// Normalizes every run per dataset and summarises each (dataset, strategy, seed).
///
/// Runs without iterations add nothing to the gain statistics but count
/// towards final IoU; a seed whose runs are all empty scores zero gain.
pub fn seed_summaries(runs: &[RunResult]) -> Result<BTreeMap<(String, String), Vec<SeedSummary>>> {
    ensure!(!runs.is_empty(), "no runs to aggregate");
    let series: Vec<Vec<f64>> = runs.iter().map(|r| delta_iou_series(&r.trajectory, r.iou0)).collect::<Result<_>>()?;

    let mut contexts: BTreeMap<&str, NormalizationContext> = BTreeMap::new();
    let mut by_dataset: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    for (r, s) in runs.iter().zip(&series) {
        by_dataset.entry(r.dataset.as_str()).or_default().push(s);
    }
    for (ds, all) in by_dataset {
        let ctx = NormalizationContext::pooled(ds, all.iter().copied())
            .unwrap_or(NormalizationContext { dataset: ds.to_string(), pooled_min: 0.0, pooled_max: 0.0 });
        contexts.insert(ds, ctx);
    }

    type Group<'a> = BTreeMap<u64, Vec<(&'a RunResult, &'a Vec<f64>)>>;
    let mut groups: BTreeMap<(String, String), Group<'_>> = BTreeMap::new();
    for (r, s) in runs.iter().zip(&series) {
        groups
            .entry((r.dataset.clone(), r.strategy().name().to_string()))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push((r, s));
    }

    let mut out = BTreeMap::new();
    for (key, seeds) in groups {
        let ctx = &contexts[key.0.as_str()];
        let mut summaries = Vec::with_capacity(seeds.len());
        for (seed, items) in seeds {
            let mut curves = Vec::new();
            let mut finals = Vec::with_capacity(items.len());
            for (r, s) in &items {
                finals.push(r.final_iou()?);
                if !s.is_empty() {
                    curves.push(peak_mean_auc(&minmax_normalize(s, ctx))?);
                }
            }
            let (peak, mean_per_iter, auc) = if curves.is_empty() {
                (0.0, 0.0, 0.0)
            } else {
                let n = curves.len() as f64;
                (
                    curves.iter().map(|c| c.peak).fold(f64::NEG_INFINITY, f64::max),
                    curves.iter().map(|c| c.mean_per_iter).sum::<f64>() / n,
                    curves.iter().map(|c| c.auc).sum::<f64>() / n,
                )
            };
            summaries.push(SeedSummary {
                seed,
                peak,
                mean_per_iter,
                auc,
                final_iou: finals.iter().sum::<f64>() / finals.len() as f64,
            });
        }
        out.insert(key, summaries);
    }
    Ok(out)
}

/// One row per (dataset, strategy), sorted by both: mean ± population std across seeds.
pub fn aggregate_report(runs: &[RunResult]) -> Result<Vec<ReportRow>> {
    Ok(seed_summaries(runs)?
        .into_iter()
        .map(|((dataset, strategy), seeds)| {
            let col = |f: fn(&SeedSummary) -> f64| mean_std(&seeds.iter().map(f).collect::<Vec<_>>());
            let (peak_mean, peak_std) = col(|s| s.peak);
            let (meaniter_mean, meaniter_std) = col(|s| s.mean_per_iter);
            let (auc_mean, auc_std) = col(|s| s.auc);
            let (final_iou_mean, final_iou_std) = col(|s| s.final_iou);
            ReportRow {
                dataset,
                strategy,
                seed_count: seeds.len(),
                peak_mean,
                peak_std,
                meaniter_mean,
                meaniter_std,
                auc_mean,
                auc_std,
                final_iou_mean,
                final_iou_std,
            }
        })
        .collect())
}

fn fixed6(v: f64) -> String {
    // Avoid printing "-0.000000".
    let s = format!("{v:.6}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.strategy.clone(),
            r.seed_count.to_string(),
            fixed6(r.peak_mean),
            fixed6(r.peak_std),
            fixed6(r.meaniter_mean),
            fixed6(r.meaniter_std),
            fixed6(r.auc_mean),
            fixed6(r.auc_std),
            fixed6(r.final_iou_mean),
            fixed6(r.final_iou_std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn report_csv_string(rows: &[ReportRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_report_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

/// Reads a report CSV, rejecting any other header.
pub fn read_report_csv<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(Error::Format(format!("unexpected report header: {}", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(|e| Error::Format(e.to_string()))).collect()
}

/// Best and second-best strategy names per metric. Higher is better; ties
/// go to the lexicographically smaller name.
fn podium<'a>(rows: &[&'a ReportRow], metric: fn(&ReportRow) -> f64) -> (Option<&'a str>, Option<&'a str>) {
    let mut ranked: Vec<&ReportRow> = rows.to_vec();
    ranked.sort_by(|a, b| metric(b).total_cmp(&metric(a)).then_with(|| a.strategy.cmp(&b.strategy)));
    (ranked.first().map(|r| r.strategy.as_str()), ranked.get(1).map(|r| r.strategy.as_str()))
}

/// One markdown table per dataset; best entries in bold, second-best in italics.
pub fn render_markdown(rows: &[ReportRow]) -> String {
    let mut by_dataset: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        by_dataset.entry(&r.dataset).or_default().push(r);
    }
    let metrics: [(fn(&ReportRow) -> f64, fn(&ReportRow) -> f64); 4] = [
        (|r| r.peak_mean, |r| r.peak_std),
        (|r| r.meaniter_mean, |r| r.meaniter_std),
        (|r| r.auc_mean, |r| r.auc_std),
        (|r| r.final_iou_mean, |r| r.final_iou_std),
    ];
    let mut out = String::new();
    for (i, (dataset, mut group)) in by_dataset.into_iter().enumerate() {
        group.sort_by(|a, b| a.strategy.cmp(&b.strategy));
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "### {dataset}\n");
        out.push_str("| Strategy | Seeds | Peak normalized ΔIoU | Mean ΔIoU per iteration | AUC | Final IoU |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        let podiums: Vec<_> = metrics.iter().map(|(m, _)| podium(&group, *m)).collect();
        for r in &group {
            let _ = write!(out, "| {} | {} |", r.strategy, r.seed_count);
            for ((mean, std), (best, second)) in metrics.iter().zip(&podiums) {
                let cell = format!("{} ± {}", fixed6(mean(r)), fixed6(std(r)));
                let name = Some(r.strategy.as_str());
                if name == *best {
                    let _ = write!(out, " **{cell}** |");
                } else if name == *second {
                    let _ = write!(out, " *{cell}* |");
                } else {
                    let _ = write!(out, " {cell} |");
                }
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Label, Pixel};
    use crate::session::{IterationRecord, StopReason};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trajectory(strategy: StrategyKind, seed: u64, ious: &[f64]) -> Trajectory {
        let mut t = Trajectory::new(strategy, seed);
        for (i, &v) in ious.iter().enumerate() {
            t.records.push(IterationRecord {
                t: i + 1,
                q: Pixel::new(i, 0),
                label: Label::Include,
                iou: Some(v),
                max_mi: 0.1,
                h_total: 1.0,
                mask_sha256: String::new(),
            });
        }
        t.stop = Some(StopReason::BudgetExhausted);
        t
    }

    fn run(dataset: &str, strategy: StrategyKind, seed: u64, ious: &[f64]) -> RunResult {
        RunResult { dataset: dataset.into(), scene: "s".into(), seed, iou0: 0.0, trajectory: trajectory(strategy, seed, ious) }
    }

    #[test]
    fn delta_examples() {
        let t = trajectory(StrategyKind::Bald, 0, &[0.4, 0.6, 0.6]);
        let d = delta_iou_series(&t, 0.0).unwrap();
        assert_eq!(d.len(), 3);
        for (a, b) in d.iter().zip([0.4, 0.2, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let flat = trajectory(StrategyKind::Bald, 0, &[0.3, 0.3]);
        assert_eq!(delta_iou_series(&flat, 0.3).unwrap(), vec![0.0, 0.0]);
        assert_eq!(delta_iou_series(&trajectory(StrategyKind::Bald, 0, &[0.7]), 0.0).unwrap().len(), 1);
        let mut missing = trajectory(StrategyKind::Bald, 0, &[0.7]);
        missing.records[0].iou = None;
        assert!(matches!(delta_iou_series(&missing, 0.0), Err(Error::NotComputable(_))));
    }

    #[test]
    fn normalize_examples() {
        let ctx = NormalizationContext { dataset: "d".into(), pooled_min: 0.0, pooled_max: 0.4 };
        let n = minmax_normalize(&[0.1, 0.3, 0.2], &ctx);
        for (a, b) in n.iter().zip([0.25, 0.75, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(minmax_normalize(&[0.4], &ctx), vec![1.0]);
        let flat = NormalizationContext { dataset: "d".into(), pooled_min: 0.2, pooled_max: 0.2 };
        assert_eq!(minmax_normalize(&[0.2, 0.2], &flat), vec![0.0, 0.0]);
    }

    #[test]
    fn curve_summaries() {
        let s = peak_mean_auc(&[0.2, 0.8, 0.5]).unwrap();
        assert_eq!(s.peak, 0.8);
        assert!((s.mean_per_iter - 0.5).abs() < 1e-15);
        assert!((s.auc - 0.575).abs() < 1e-15);
        let c = peak_mean_auc(&[0.3, 0.3, 0.3]).unwrap();
        assert!((c.auc - 0.3).abs() < 1e-15 && (c.mean_per_iter - 0.3).abs() < 1e-15);
        assert_eq!(peak_mean_auc(&[1.0]).unwrap(), CurveSummary { peak: 1.0, mean_per_iter: 1.0, auc: 1.0 });
        assert!(peak_mean_auc(&[]).is_err());
    }

    #[test]
    fn ece_examples() {
        assert_eq!(expected_calibration_error(&[1.0, 1.0], &[true, true], 10).unwrap(), 0.0);
        let e = expected_calibration_error(&[0.95, 0.55], &[true, false], 10).unwrap();
        assert!((e - 0.30).abs() < 1e-12);
        assert!(expected_calibration_error(&[0.5], &[], 10).is_err());
    }

    #[test]
    fn ece_of_calibrated_sample_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probs: Vec<f64> = (0..100_000).map(|_| rng.gen()).collect();
        let outcomes: Vec<bool> = probs.iter().map(|&p| rng.gen::<f64>() < p).collect();
        assert!(expected_calibration_error(&probs, &outcomes, 10).unwrap() < 0.02);
    }

    #[test]
    fn report_rows_and_peaks() {
        let runs = vec![
            run("a", StrategyKind::Bald, 0, &[0.5, 0.7]),
            run("a", StrategyKind::Bald, 1, &[0.3, 0.4]),
            run("a", StrategyKind::Random, 0, &[0.1, 0.2]),
            run("a", StrategyKind::Random, 1, &[0.2, 0.1]),
            run("b", StrategyKind::Bald, 0, &[0.9]),
            run("b", StrategyKind::Random, 0, &[0.2]),
        ];
        let rows = aggregate_report(&runs).unwrap();
        assert_eq!(rows.len(), 4);
        let names: Vec<_> = rows.iter().map(|r| (r.dataset.as_str(), r.strategy.as_str())).collect();
        assert_eq!(names, [("a", "bald"), ("a", "random"), ("b", "bald"), ("b", "random")]);
        let summaries = seed_summaries(&runs).unwrap();
        for ds in ["a", "b"] {
            let any_one = summaries.iter().filter(|(k, _)| k.0 == ds).flat_map(|(_, v)| v).any(|s| s.peak == 1.0);
            assert!(any_one, "dataset {ds} has no unit peak");
        }
        assert!(rows.iter().all(|r| r.peak_mean <= 1.0 && r.peak_std >= 0.0));
        assert_eq!(rows[2].peak_std, 0.0);
        assert!((rows[0].final_iou_mean - 0.55).abs() < 1e-12);
        assert!((rows[0].final_iou_std - 0.15).abs() < 1e-12);
    }

    #[test]
    fn empty_runs_count_for_final_iou_only() {
        let mut empty = run("a", StrategyKind::Oracle, 0, &[]);
        empty.iou0 = 0.25;
        let runs = vec![empty, run("a", StrategyKind::Bald, 0, &[0.5])];
        let rows = aggregate_report(&runs).unwrap();
        let oracle = rows.iter().find(|r| r.strategy == "oracle").unwrap();
        assert_eq!(oracle.final_iou_mean, 0.25);
        assert_eq!(oracle.peak_mean, 0.0);
    }

    #[test]
    fn csv_round_trip_and_schema() {
        let runs = vec![run("a", StrategyKind::Bald, 0, &[0.5, 0.7]), run("a", StrategyKind::Random, 0, &[0.1])];
        let rows = aggregate_report(&runs).unwrap();
        let text = report_csv_string(&rows).unwrap();
        assert!(text.starts_with("dataset,strategy,seed_count,peak_mean,peak_std,meaniter_mean,meaniter_std,auc_mean,auc_std,final_iou_mean,final_iou_std\n"));
        assert!(text.contains("a,bald,1,1.000000,0.000000,"));
        let back = read_report_csv(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].strategy, "random");
        assert!(matches!(read_report_csv("dataset,strategy\na,b\n".as_bytes()), Err(Error::Format(_))));
    }

    fn row(strategy: &str, v: f64) -> ReportRow {
        ReportRow {
            dataset: "d".into(),
            strategy: strategy.into(),
            seed_count: 1,
            peak_mean: v,
            peak_std: 0.0,
            meaniter_mean: v,
            meaniter_std: 0.0,
            auc_mean: v,
            auc_std: 0.0,
            final_iou_mean: v,
            final_iou_std: 0.0,
        }
    }

    #[test]
    fn markdown_marks_podium() {
        let md = render_markdown(&[row("solo", 0.5)]);
        assert_eq!(md.matches("**0.500000 ± 0.000000**").count(), 4);
        assert!(!md.contains(" *0."));

        let md = render_markdown(&[row("zeta", 0.5), row("alpha", 0.5), row("mid", 0.1)]);
        let alpha = md.lines().find(|l| l.starts_with("| alpha")).unwrap();
        let zeta = md.lines().find(|l| l.starts_with("| zeta")).unwrap();
        assert!(alpha.contains("**0.500000"));
        assert!(zeta.contains(" *0.500000"));
        assert_eq!(render_markdown(&[row("a", 0.2), row("b", 0.3)]), render_markdown(&[row("b", 0.3), row("a", 0.2)]));
    }

    proptest! {
        #[test]
        fn telescoping(ious in proptest::collection::vec(0.0f64..=1.0, 1..16), iou0 in 0.0f64..=1.0) {
            let t = trajectory(StrategyKind::Bald, 0, &ious);
            let d = delta_iou_series(&t, iou0).unwrap();
            let total: f64 = d.iter().sum();
            prop_assert!((total - (ious[ious.len() - 1] - iou0)).abs() < 1e-12);
        }

        #[test]
        fn normalized_in_unit_interval(series in proptest::collection::vec(proptest::collection::vec(-1.0f64..=1.0, 1..8), 1..5)) {
            let ctx = NormalizationContext::pooled("d", series.iter().map(Vec::as_slice)).unwrap();
            for s in &series {
                for v in minmax_normalize(s, &ctx) {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn constant_series_auc(c in -1.0f64..=1.0, n in 1usize..20) {
            let s = peak_mean_auc(&vec![c; n]).unwrap();
            prop_assert!((s.auc - c).abs() < 1e-12);
        }

        #[test]
        fn ece_in_unit_interval(pairs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 0..50)) {
            let (p, y): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
            let e = expected_calibration_error(&p, &y, 10).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
        }
    }
}
