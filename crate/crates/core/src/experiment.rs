//! Whole-pipeline runs and multi-seed comparisons.
//!
//! Per-seed work runs in parallel; results are always returned in seed order
//! so outputs do not depend on the thread count.

use std::borrow::Cow;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{DomainPairSpec, SsdaSplit, DEFAULT_VAL_PER_CLASS};
use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::pseudolabel::{anchor_features, infer_pseudo, reliability, select, SelectedSet};
use crate::trainer::{evaluate, progressive_self_train, train_baseline, TrainConfig, TrainOutcome, TrainReport};

/// Environment variable bounding the worker pool size.
pub const THREADS_ENV: &str = "SSDA_LAB_THREADS";

/// Runs `f` on a pool sized by [`THREADS_ENV`] when set, else the global pool.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("could not build a {n}-thread pool ({e}), using the default");
                f()
            }
        },
        _ => f(),
    }
}

/// Training variants compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Supervised on source and labeled target only: no entropy term, no pseudo labels.
    SourceTarget,
    /// Minimax-entropy training only.
    Baseline,
    /// Baseline, selection, then soft-label progressive self-training.
    Full,
    /// Same selection, then hard labels without refreshing.
    Vanilla,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::SourceTarget, Arm::Baseline, Arm::Full, Arm::Vanilla];

    pub fn name(self) -> &'static str {
        match self {
            Arm::SourceTarget => "s+t",
            Arm::Baseline => "baseline",
            Arm::Full => "full",
            Arm::Vanilla => "vanilla",
        }
    }

    /// The configuration this arm trains with, derived from `base`.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Arm::SourceTarget => {
                c.lambda = 0.0;
                c.use_pseudo = false;
            }
            Arm::Baseline => c.use_pseudo = false,
            Arm::Full => c.use_pseudo = true,
            Arm::Vanilla => {
                c.use_pseudo = true;
                c.hard_labels = true;
                c.label_momentum = 1.0;
            }
        }
        c
    }
}

/// Stage 2 on a trained network.
pub fn select_pseudo_labels(params: &NetworkParams, split: &SsdaSplit, r_u: f64) -> Result<SelectedSet> {
    let k = split.num_classes();
    let annotations = infer_pseudo(params, &split.unlabeled_target)?;
    let anchors = anchor_features(params, &split.labeled_target, k)?;
    select(annotations, &anchors, r_u, split.unlabeled_target.len(), k)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub baseline: TrainOutcome,
    pub selection: Option<SelectedSet>,
    pub self_train: Option<TrainOutcome>,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
}

impl PipelineOutcome {
    pub fn final_params(&self) -> &NetworkParams {
        self.self_train.as_ref().map_or(&self.baseline.params, |o| &o.params)
    }

    /// Report of the last stage that ran, with test accuracy filled in.
    pub fn final_report(&self) -> TrainReport {
        let mut r = self
            .self_train
            .as_ref()
            .map_or(&self.baseline.report, |o| &o.report)
            .clone();
        r.final_test_accuracy = Some(self.final_accuracy);
        r
    }
}

/// Continues from a trained baseline: select with `config.r_u`, then self-train.
pub fn continue_from_baseline(
    split: &SsdaSplit,
    baseline: TrainOutcome,
    config: &TrainConfig,
) -> Result<PipelineOutcome> {
    let truth = split.hidden_truth();
    let baseline_accuracy = evaluate(&baseline.params, &split.unlabeled_target, truth)?;
    if !config.use_pseudo {
        return Ok(PipelineOutcome {
            baseline,
            selection: None,
            self_train: None,
            baseline_accuracy,
            final_accuracy: baseline_accuracy,
        });
    }
    let selection = select_pseudo_labels(&baseline.params, split, config.r_u)?;
    let stage3 = progressive_self_train(split, &selection, &baseline.params, config)?;
    let final_accuracy = evaluate(&stage3.params, &split.unlabeled_target, truth)?;
    Ok(PipelineOutcome {
        baseline,
        selection: Some(selection),
        self_train: Some(stage3),
        baseline_accuracy,
        final_accuracy,
    })
}

/// All three stages on one split.
pub fn run_pipeline(split: &SsdaSplit, config: &TrainConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let baseline = train_baseline(split, config)?;
    continue_from_baseline(split, baseline, config)
}

/// The benchmark split for one seed.
pub fn benchmark_split(seed: u64, shots: usize) -> Result<SsdaSplit> {
    SsdaSplit::generate(&DomainPairSpec::synth_shift(seed), shots, DEFAULT_VAL_PER_CLASS)
}

/// Where multi-seed runs take their data from.
#[derive(Debug, Clone, Copy)]
pub enum SplitSource<'a> {
    /// A fresh benchmark split per seed.
    Benchmark { shots: usize },
    /// One fixed split; the seed only drives training.
    Fixed(&'a SsdaSplit),
}

impl<'a> SplitSource<'a> {
    pub fn get(&self, seed: u64) -> Result<Cow<'a, SsdaSplit>> {
        match *self {
            SplitSource::Benchmark { shots } => benchmark_split(seed, shots).map(Cow::Owned),
            SplitSource::Fixed(split) => Ok(Cow::Borrowed(split)),
        }
    }
}

/// Per-seed results of every arm, sharing one minimax baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub source_target: f64,
    pub baseline: f64,
    pub full: f64,
    pub vanilla: f64,
    /// Hard-label accuracy of the baseline over all unlabeled samples.
    pub reliability_all: f64,
    /// Same, restricted to the selected samples.
    pub reliability_selected: f64,
    pub selected: usize,
}

impl SeedResult {
    pub fn accuracy(&self, arm: Arm) -> f64 {
        match arm {
            Arm::SourceTarget => self.source_target,
            Arm::Baseline => self.baseline,
            Arm::Full => self.full,
            Arm::Vanilla => self.vanilla,
        }
    }
}

/// Trains every arm on one seed.
pub fn compare_arms(source: SplitSource<'_>, seed: u64, base: &TrainConfig) -> Result<SeedResult> {
    let split = source.get(seed)?;
    let split = split.as_ref();
    let truth = split.hidden_truth();
    let cfg = |arm: Arm| TrainConfig {
        seed,
        ..arm.config(base)
    };

    let st = train_baseline(split, &cfg(Arm::SourceTarget))?;
    let source_target = evaluate(&st.params, &split.unlabeled_target, truth)?;

    let baseline = train_baseline(split, &cfg(Arm::Baseline))?;
    let annotations = infer_pseudo(&baseline.params, &split.unlabeled_target)?;
    let reliability_all = reliability(&annotations, truth)?;
    let full = continue_from_baseline(split, baseline.clone(), &cfg(Arm::Full))?;
    let vanilla = continue_from_baseline(split, baseline, &cfg(Arm::Vanilla))?;

    let selection = full.selection.as_ref().ok_or(Error::Empty("selection"))?;
    Ok(SeedResult {
        seed,
        source_target,
        baseline: full.baseline_accuracy,
        full: full.final_accuracy,
        vanilla: vanilla.final_accuracy,
        reliability_all,
        reliability_selected: reliability(selection.selected(), truth)?,
        selected: selection.len(),
    })
}

pub fn compare_arms_over(source: SplitSource<'_>, seeds: &[u64], base: &TrainConfig) -> Result<Vec<SeedResult>> {
    with_pool(|| seeds.par_iter().map(|&s| compare_arms(source, s, base)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("summary values"));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Summary { mean, std, n })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn csv_text(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub const DEFAULT_RU_GRID: [f64; 5] = [0.01, 0.05, 0.2, 0.5, 1.0];

/// One (r_u, seed) cell. A failed cell keeps its error instead of aborting the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuRow {
    pub r_u: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub selected: Option<usize>,
    pub reliability_selected: Option<f64>,
    pub error: Option<String>,
}

impl RuRow {
    fn failed(r_u: f64, seed: u64, e: &Error) -> Self {
        RuRow {
            r_u,
            seed,
            accuracy: None,
            selected: None,
            reliability_selected: None,
            error: Some(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuSummary {
    pub r_u: f64,
    /// `None` when every cell for this value failed.
    pub accuracy: Option<Summary>,
    pub reliability_selected: Option<Summary>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuAblation {
    pub rows: Vec<RuRow>,
    pub summary: Vec<RuSummary>,
    /// Grid value with the highest mean accuracy; the smallest on ties.
    pub best_r_u: Option<f64>,
}

impl RuAblation {
    pub fn mean_accuracy(&self, r_u: f64) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.r_u == r_u)
            .and_then(|s| s.accuracy)
            .map(|a| a.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("r_u,seed,accuracy,selected,reliability_selected,error\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.r_u,
                r.seed,
                fmt_opt(r.accuracy),
                r.selected.map(|n| n.to_string()).unwrap_or_default(),
                fmt_opt(r.reliability_selected),
                r.error.as_deref().map(csv_text).unwrap_or_default()
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("r_u,mean_accuracy,std_accuracy,n,failures,best\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.r_u,
                fmt_opt(s.accuracy.map(|a| a.mean)),
                fmt_opt(s.accuracy.map(|a| a.std)),
                s.accuracy.map_or(0, |a| a.n),
                s.failures,
                u8::from(self.best_r_u == Some(s.r_u))
            );
        }
        out
    }
}

fn ru_cells(source: SplitSource<'_>, seed: u64, grid: &[f64], base: &TrainConfig) -> Vec<RuRow> {
    let prepared = source.get(seed).and_then(|split| {
        let cfg = TrainConfig {
            seed,
            use_pseudo: true,
            ..base.clone()
        };
        let baseline = train_baseline(&split, &cfg)?;
        Ok((split, cfg, baseline))
    });
    let (split, cfg, baseline) = match prepared {
        Ok(p) => p,
        Err(e) => return grid.iter().map(|&r| RuRow::failed(r, seed, &e)).collect(),
    };
    let truth = split.hidden_truth();
    grid.par_iter()
        .map(|&r_u| {
            let cell = || -> Result<RuRow> {
                let c = TrainConfig { r_u, ..cfg.clone() };
                let out = continue_from_baseline(&split, baseline.clone(), &c)?;
                let sel = out.selection.as_ref().ok_or(Error::Empty("selection"))?;
                Ok(RuRow {
                    r_u,
                    seed,
                    accuracy: Some(out.final_accuracy),
                    selected: Some(sel.len()),
                    reliability_selected: Some(reliability(sel.selected(), truth)?),
                    error: None,
                })
            };
            cell().unwrap_or_else(|e| RuRow::failed(r_u, seed, &e))
        })
        .collect()
}

/// Final accuracy for each `r_u` in `grid` over `seeds`; the baseline is
/// shared per seed. Rows are ordered by grid value, then seed.
pub fn ablate_ru(source: SplitSource<'_>, seeds: &[u64], grid: &[f64], base: &TrainConfig) -> Result<RuAblation> {
    if seeds.is_empty() || grid.is_empty() {
        return Err(Error::Empty("seeds or r_u grid"));
    }
    for &r in grid {
        TrainConfig { r_u: r, ..base.clone() }.validate()?;
    }
    let per_seed: Vec<Vec<RuRow>> = with_pool(|| {
        seeds
            .par_iter()
            .map(|&seed| ru_cells(source, seed, grid, base))
            .collect()
    });
    let rows: Vec<RuRow> = (0..grid.len())
        .flat_map(|g| per_seed.iter().map(move |s| s[g].clone()))
        .collect();
    let mut summary = Vec::with_capacity(grid.len());
    for &r_u in grid {
        let cells: Vec<&RuRow> = rows.iter().filter(|r| r.r_u == r_u).collect();
        let acc: Vec<f64> = cells.iter().filter_map(|r| r.accuracy).collect();
        let rel: Vec<f64> = cells.iter().filter_map(|r| r.reliability_selected).collect();
        summary.push(RuSummary {
            r_u,
            accuracy: Summary::of(&acc).ok(),
            reliability_selected: Summary::of(&rel).ok(),
            failures: cells.iter().filter(|r| r.error.is_some()).count(),
        });
    }
    let mut best: Option<(f64, f64)> = None;
    for s in &summary {
        if let Some(a) = s.accuracy {
            let better = match best {
                None => true,
                Some((r, m)) => a.mean > m || (a.mean == m && s.r_u < r),
            };
            if better {
                best = Some((s.r_u, a.mean));
            }
        }
    }
    Ok(RuAblation {
        rows,
        summary,
        best_r_u: best.map(|b| b.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub seed: u64,
    pub vanilla: Option<f64>,
    pub progressive: Option<f64>,
    pub error: Option<String>,
}

impl NoiseRow {
    pub fn difference(&self) -> Option<f64> {
        Some(self.progressive? - self.vanilla?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAblation {
    pub rows: Vec<NoiseRow>,
    pub vanilla: Option<Summary>,
    pub progressive: Option<Summary>,
    /// Mean of `progressive − vanilla` over seeds where both arms finished.
    pub mean_difference: Option<f64>,
}

impl NoiseAblation {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,vanilla,progressive,difference,error\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.seed,
                fmt_opt(r.vanilla),
                fmt_opt(r.progressive),
                r.difference().map(|d| format!("{d:+.6}")).unwrap_or_default(),
                r.error.as_deref().map(csv_text).unwrap_or_default()
            );
        }
        out
    }
}

fn noise_cell(source: SplitSource<'_>, seed: u64, base: &TrainConfig) -> NoiseRow {
    let run = || -> Result<(f64, f64)> {
        let split = source.get(seed)?;
        let base = TrainConfig { seed, ..base.clone() };
        let baseline = train_baseline(&split, &Arm::Baseline.config(&base))?;
        let (p, v) = rayon::join(
            || continue_from_baseline(&split, baseline.clone(), &Arm::Full.config(&base)),
            || continue_from_baseline(&split, baseline.clone(), &Arm::Vanilla.config(&base)),
        );
        Ok((p?.final_accuracy, v?.final_accuracy))
    };
    match run() {
        Ok((progressive, vanilla)) => NoiseRow {
            seed,
            vanilla: Some(vanilla),
            progressive: Some(progressive),
            error: None,
        },
        Err(e) => NoiseRow {
            seed,
            vanilla: None,
            progressive: None,
            error: Some(e.to_string()),
        },
    }
}

/// Vanilla hard-label self-training against progressive soft-label
/// self-training from the same baseline and selection, paired by seed.
pub fn ablate_noise(source: SplitSource<'_>, seeds: &[u64], base: &TrainConfig) -> Result<NoiseAblation> {
    if seeds.len() < 2 {
        return Err(Error::Config("the paired comparison needs at least 2 seeds".into()));
    }
    base.validate()?;
    let rows: Vec<NoiseRow> = with_pool(|| seeds.par_iter().map(|&seed| noise_cell(source, seed, base)).collect());
    let vanilla: Vec<f64> = rows.iter().filter_map(|r| r.vanilla).collect();
    let progressive: Vec<f64> = rows.iter().filter_map(|r| r.progressive).collect();
    let diffs: Vec<f64> = rows.iter().filter_map(NoiseRow::difference).collect();
    Ok(NoiseAblation {
        vanilla: Summary::of(&vanilla).ok(),
        progressive: Summary::of(&progressive).ok(),
        mean_difference: Summary::of(&diffs).ok().map(|s| s.mean),
        rows,
    })
}
