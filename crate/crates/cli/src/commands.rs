use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use ssda_core::datasets::{load_truth, SplitManifest, DEFAULT_VAL_PER_CLASS};
use ssda_core::experiment::{self, SplitSource, DEFAULT_RU_GRID};
use ssda_core::pseudolabel::ReliabilitySummary;
use ssda_core::trainer::{self, Session, TrainState};
use ssda_core::{Checkpoint, DomainPairSpec, Error, SelectionDump, SsdaSplit, TrainConfig, TrainOutcome};

use crate::manifest::ExperimentManifest;
use crate::TrainFlags;

/// Bad command-line usage that clap itself cannot catch.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn parse_shots(s: &str) -> Result<usize, String> {
    match s {
        "1" => Ok(1),
        "3" => Ok(3),
        _ => Err("shots must be 1 or 3".into()),
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn load_split(dir: &Path) -> anyhow::Result<(SsdaSplit, String)> {
    let split = SsdaSplit::load(dir).with_context(|| format!("loading split {}", dir.display()))?;
    let checksum = SplitManifest::load(dir)?.checksum;
    Ok((split, checksum))
}

fn load_params(path: &Path) -> anyhow::Result<ssda_core::NetworkParams> {
    Ok(Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .params)
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Writes a stage's checkpoint and report files into `dir`, registering them.
fn write_stage(
    dir: &Path,
    outcome: &TrainOutcome,
    test_acc: f64,
    manifest: &mut ExperimentManifest,
) -> anyhow::Result<()> {
    create_dir(dir)?;
    let mut report = outcome.report.clone();
    report.final_test_accuracy = Some(test_acc);
    let ckpt = dir.join("checkpoint.json");
    Checkpoint::new(outcome.params.clone()).save(&ckpt)?;
    let json = dir.join("report.json");
    report.save_json(&json)?;
    let csv = dir.join("report.csv");
    report.save_csv(&csv)?;
    for p in [&ckpt, &json, &csv] {
        manifest.register(p)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory; must not already hold a split.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Labeled target samples per class.
    #[arg(long, default_value = "3", value_parser = parse_shots)]
    shots: usize,
    #[arg(long, default_value_t = DEFAULT_VAL_PER_CLASS)]
    val_per_class: usize,
    /// JSON domain-pair spec overriding the default benchmark; its seed is replaced by --seed.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
}

pub fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let spec: DomainPairSpec =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            DomainPairSpec { seed: a.seed, ..spec }
        }
        None => DomainPairSpec::synth_shift(a.seed),
    };
    let split = SsdaSplit::generate(&spec, a.shots, a.val_per_class)?;
    create_dir(&a.out)?;
    let manifest = split.save(&a.out)?;
    println!(
        "wrote split to {}: source {}, labeled target {}, unlabeled target {}, validation {}",
        a.out.display(),
        manifest.counts.source,
        manifest.counts.labeled_target,
        manifest.counts.unlabeled_target,
        manifest.counts.validation_target
    );
    println!("checksum {}", manifest.checksum);
    Ok(())
}

#[derive(Args, Debug)]
pub struct SessionArgs {
    /// Save the resumable training state to `<out>/state.json` every N iterations.
    #[arg(long, value_name = "N")]
    state_every: Option<usize>,
    /// Continue from a saved training state instead of starting fresh.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

fn drive(mut session: Session<'_>, out: &Path, s: &SessionArgs, t_max: usize) -> anyhow::Result<TrainOutcome> {
    match s.state_every {
        Some(0) => return Err(UsageError("--state-every must be positive".into()).into()),
        Some(every) => {
            create_dir(out)?;
            let path = out.join("state.json");
            while !session.is_finished() {
                let next = (session.state().iter / every + 1) * every;
                session.run_until(next.min(t_max))?;
                session.checkpoint().save(&path)?;
            }
        }
        None => session.run_until(t_max)?,
    }
    Ok(session.finish())
}

#[derive(Args, Debug)]
pub struct TrainBaselineArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    session: SessionArgs,
}

pub fn train_baseline(a: TrainBaselineArgs) -> anyhow::Result<()> {
    let cfg = a.train.resolve(a.seed)?;
    let (split, checksum) = load_split(&a.split)?;
    let mut manifest = ExperimentManifest::new(Some(&cfg), Some(checksum));
    let session = match &a.session.resume {
        Some(p) => Session::resume(&split, &cfg, TrainState::load(p)?)?,
        None => Session::baseline(&split, &cfg)?,
    };
    let outcome = manifest.time("baseline", || drive(session, &a.out, &a.session, cfg.t_max))?;
    let acc = trainer::evaluate(&outcome.params, &split.unlabeled_target, split.hidden_truth())?;
    write_stage(&a.out, &outcome, acc, &mut manifest)?;
    let cfg_path = a.out.join("config.json");
    write_json(&cfg_path, &cfg)?;
    manifest.register(&cfg_path)?;
    manifest.save(&a.out)?;
    println!(
        "baseline: {} iterations, best validation accuracy {}, target accuracy {}",
        outcome.report.iterations,
        outcome.report.best_val_acc.map(pct).unwrap_or_default(),
        pct(acc)
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct PseudoLabelArgs {
    #[arg(long)]
    split: PathBuf,
    /// Network checkpoint, normally the stage-1 output.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Selection dump to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "r-u", default_value_t = TrainConfig::default().r_u)]
    r_u: f64,
}

pub fn pseudo_label(a: PseudoLabelArgs) -> anyhow::Result<()> {
    if !(a.r_u > 0.0 && a.r_u <= 1.0) {
        return Err(Error::Config(format!("r_u must be in (0, 1], got {}", a.r_u)).into());
    }
    let (split, _) = load_split(&a.split)?;
    let params = load_params(&a.checkpoint)?;
    let selection = experiment::select_pseudo_labels(&params, &split, a.r_u)?;
    let dump = SelectionDump::from_selection(&selection, split.num_classes(), None)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    dump.save(&a.out)?;
    println!(
        "selected {} of {} unlabeled samples (quota {} per class)",
        selection.len(),
        selection.n_u,
        selection.per_class_quota
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct SelfTrainArgs {
    #[arg(long)]
    split: PathBuf,
    /// Network to resume from, normally the stage-1 checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Selection dump from `pseudo-label`.
    #[arg(long)]
    selection: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    session: SessionArgs,
}

pub fn self_train(a: SelfTrainArgs) -> anyhow::Result<()> {
    let cfg = a.train.resolve(a.seed)?;
    let (split, checksum) = load_split(&a.split)?;
    let mut manifest = ExperimentManifest::new(Some(&cfg), Some(checksum));
    let session = match &a.session.resume {
        Some(p) => Session::resume(&split, &cfg, TrainState::load(p)?)?,
        None => {
            let params = load_params(&a.checkpoint)?;
            let dump = SelectionDump::load(&a.selection)?;
            if dump.n_u != split.unlabeled_target.len() || dump.num_classes != split.num_classes() {
                return Err(Error::Shape("selection dump does not belong to this split".into()).into());
            }
            let labels = dump.selected.iter().map(|e| e.soft_label.clone()).collect();
            Session::self_train_with_labels(&split, &cfg, params, dump.index_set(), labels)?
        }
    };
    let outcome = manifest.time("self-train", || drive(session, &a.out, &a.session, cfg.t_max))?;
    let acc = trainer::evaluate(&outcome.params, &split.unlabeled_target, split.hidden_truth())?;
    write_stage(&a.out, &outcome, acc, &mut manifest)?;
    let cfg_path = a.out.join("config.json");
    write_json(&cfg_path, &cfg)?;
    manifest.register(&cfg_path)?;
    manifest.save(&a.out)?;
    println!(
        "self-training: {} iterations, target accuracy {}",
        outcome.report.iterations,
        pct(acc)
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct RunPipelineArgs {
    /// Existing split; when absent the default benchmark is generated from --seed into `<out>/split`.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "3", value_parser = parse_shots)]
    shots: usize,
    #[command(flatten)]
    train: TrainFlags,
}

pub fn run_pipeline(a: RunPipelineArgs) -> anyhow::Result<()> {
    let cfg = a.train.resolve(Some(a.seed))?;
    create_dir(&a.out)?;
    let (split, checksum) = match &a.split {
        Some(dir) => load_split(dir)?,
        None => {
            let dir = a.out.join("split");
            if dir.join("manifest.json").exists() {
                load_split(&dir)?
            } else {
                let split = experiment::benchmark_split(a.seed, a.shots)?;
                let m = split.save(&dir)?;
                (split, m.checksum)
            }
        }
    };
    let mut manifest = ExperimentManifest::new(Some(&cfg), Some(checksum));
    let truth = split.hidden_truth();

    let baseline = manifest
        .time("baseline", || trainer::train_baseline(&split, &cfg))
        .context("stage 1 (baseline training)")?;
    let base_acc = trainer::evaluate(&baseline.params, &split.unlabeled_target, truth)?;
    write_stage(&a.out.join("baseline"), &baseline, base_acc, &mut manifest)?;
    println!("baseline target accuracy {}", pct(base_acc));

    let mut final_report = baseline.report.clone();
    final_report.final_test_accuracy = Some(base_acc);
    if cfg.use_pseudo {
        let selection = manifest
            .time("selection", || {
                experiment::select_pseudo_labels(&baseline.params, &split, cfg.r_u)
            })
            .context("stage 2 (pseudo labeling)")?;
        let dump = SelectionDump::from_selection(&selection, split.num_classes(), Some(truth))?;
        let sel_path = a.out.join("selection.json");
        dump.save(&sel_path)?;
        manifest.register(&sel_path)?;
        if let Some(r) = &dump.reliability {
            println!(
                "pseudo-label reliability {} -> {} ({} selected)",
                pct(r.before),
                pct(r.after),
                selection.len()
            );
        }
        let stage3 = manifest
            .time("self-train", || {
                trainer::progressive_self_train(&split, &selection, &baseline.params, &cfg)
            })
            .context("stage 3 (self-training)")?;
        let acc = trainer::evaluate(&stage3.params, &split.unlabeled_target, truth)?;
        write_stage(&a.out.join("self_train"), &stage3, acc, &mut manifest)?;
        final_report = stage3.report.clone();
        final_report.final_test_accuracy = Some(acc);
    }

    let csv = a.out.join("report.csv");
    final_report.save_csv(&csv)?;
    let json = a.out.join("report.json");
    final_report.save_json(&json)?;
    let cfg_path = a.out.join("config.json");
    write_json(&cfg_path, &cfg)?;
    for p in [&csv, &json, &cfg_path] {
        manifest.register(p)?;
    }
    manifest.save(&a.out)?;
    println!(
        "final target accuracy {}",
        final_report.final_test_accuracy.map(pct).unwrap_or_default()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

pub fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let (split, _) = load_split(&a.split)?;
    let params = load_params(&a.checkpoint)?;
    let acc = trainer::evaluate(&params, &split.unlabeled_target, split.hidden_truth())?;
    println!("accuracy {acc:.6}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct MultiSeedArgs {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = 0..10u64)]
    seeds: Vec<u64>,
    /// Fixed split for every seed; otherwise each seed generates its own benchmark split.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value = "3", value_parser = parse_shots)]
    shots: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

impl MultiSeedArgs {
    fn prepare(&self) -> anyhow::Result<(TrainConfig, Option<(SsdaSplit, String)>)> {
        let cfg = self.train.resolve(None)?;
        let fixed = self.split.as_deref().map(load_split).transpose()?;
        create_dir(&self.out)?;
        Ok((cfg, fixed))
    }
}

fn source<'a>(fixed: &'a Option<(SsdaSplit, String)>, shots: usize) -> SplitSource<'a> {
    match fixed {
        Some((split, _)) => SplitSource::Fixed(split),
        None => SplitSource::Benchmark { shots },
    }
}

#[derive(Args, Debug)]
pub struct AblateRuArgs {
    #[command(flatten)]
    common: MultiSeedArgs,
    /// Comma-separated selection ratios.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RU_GRID)]
    grid: Vec<f64>,
}

pub fn ablate_ru(a: AblateRuArgs) -> anyhow::Result<()> {
    let c = &a.common;
    let (cfg, fixed) = c.prepare()?;
    let mut manifest = ExperimentManifest::new(Some(&cfg), fixed.as_ref().map(|f| f.1.clone()));
    let table = manifest.time("ablate-ru", || {
        experiment::ablate_ru(source(&fixed, c.shots), &c.seeds, &a.grid, &cfg)
    })?;
    let rows = c.out.join("ablate_ru.csv");
    write_text(&rows, &table.to_csv())?;
    let summary = c.out.join("ablate_ru_summary.csv");
    write_text(&summary, &table.summary_csv())?;
    let json = c.out.join("ablate_ru.json");
    write_json(&json, &table)?;
    for p in [&rows, &summary, &json] {
        manifest.register(p)?;
    }
    manifest.save(&c.out)?;

    let mut out = String::from("r_u     mean acc  std\n");
    for s in &table.summary {
        let mark = if table.best_r_u == Some(s.r_u) { "  <- best" } else { "" };
        match s.accuracy {
            Some(acc) => {
                let _ = writeln!(out, "{:<7} {:>8}  {:>5}{mark}", s.r_u, pct(acc.mean), pct(acc.std));
            }
            None => {
                let _ = writeln!(out, "{:<7} all {} runs failed", s.r_u, s.failures);
            }
        }
    }
    print!("{out}");
    report_failures(table.rows.iter().filter_map(|r| r.error.as_ref().map(|e| (r.seed, e))));
    Ok(())
}

fn report_failures<'a>(failures: impl Iterator<Item = (u64, &'a String)>) {
    for (seed, e) in failures {
        eprintln!("warning: seed {seed} failed: {e}");
    }
}

#[derive(Args, Debug)]
pub struct AblateNoiseArgs {
    #[command(flatten)]
    common: MultiSeedArgs,
}

pub fn ablate_noise(a: AblateNoiseArgs) -> anyhow::Result<()> {
    let c = &a.common;
    let (cfg, fixed) = c.prepare()?;
    let mut manifest = ExperimentManifest::new(Some(&cfg), fixed.as_ref().map(|f| f.1.clone()));
    let table = manifest.time("ablate-noise", || {
        experiment::ablate_noise(source(&fixed, c.shots), &c.seeds, &cfg)
    })?;
    let rows = c.out.join("ablate_noise.csv");
    write_text(&rows, &table.to_csv())?;
    let json = c.out.join("ablate_noise.json");
    write_json(&json, &table)?;
    for p in [&rows, &json] {
        manifest.register(p)?;
    }
    manifest.save(&c.out)?;

    if let (Some(v), Some(p)) = (table.vanilla, table.progressive) {
        println!("vanilla hard labels     {}", pct(v.mean));
        println!("progressive soft labels {}", pct(p.mean));
    }
    if let Some(d) = table.mean_difference {
        println!("paired difference       {:+.1}", 100.0 * d);
    }
    report_failures(table.rows.iter().filter_map(|r| r.error.as_ref().map(|e| (r.seed, e))));
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportReliabilityArgs {
    /// Selection dump from `pseudo-label` or `run-pipeline`.
    #[arg(long)]
    selection: PathBuf,
    /// Split directory or its `unlabeled_truth.csv`.
    #[arg(long)]
    truth: PathBuf,
    /// Also write the numbers as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

pub fn reliability_csv(r: &ReliabilitySummary) -> String {
    format!("before,after\n{},{}\n", pct(r.before), pct(r.after))
}

pub fn report_reliability(a: ReportReliabilityArgs) -> anyhow::Result<()> {
    let dump = SelectionDump::load(&a.selection)?;
    let truth = load_truth(&a.truth)?;
    let r = dump.reliability_against(&truth)?;
    println!("{} -> {}", pct(r.before), pct(r.after));
    if let Some(path) = &a.csv {
        write_text(path, &reliability_csv(&r))?;
    }
    Ok(())
}
