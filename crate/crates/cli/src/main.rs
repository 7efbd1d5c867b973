mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssda_core::{ErrorKind, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "ssda-lab",
    version,
    about = "Semi-supervised domain adaptation with selective pseudo labeling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic source/target split.
    GenData(commands::GenDataArgs),
    /// Stage 1: minimax-entropy training.
    TrainBaseline(commands::TrainBaselineArgs),
    /// Stage 2: annotate the unlabeled target set and select pseudo labels.
    PseudoLabel(commands::PseudoLabelArgs),
    /// Stage 3: progressive self-training on a selection.
    SelfTrain(commands::SelfTrainArgs),
    /// All three stages end to end.
    RunPipeline(commands::RunPipelineArgs),
    /// Accuracy of a checkpoint on the unlabeled target set.
    Evaluate(commands::EvaluateArgs),
    /// Final accuracy across a grid of selection ratios.
    AblateRu(commands::AblateRuArgs),
    /// Soft-label progressive training against fixed hard labels, paired by seed.
    AblateNoise(commands::AblateNoiseArgs),
    /// Pseudo-label accuracy before and after selection.
    ReportReliability(commands::ReportReliabilityArgs),
}

/// Training options shared by every command that trains.
///
/// Values resolve as built-in defaults, then `--config`, then flags.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// JSON file with any subset of the training configuration fields.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Entropy weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Pseudo-label selection ratio in (0, 1].
    #[arg(long = "r-u")]
    pub r_u: Option<f64>,
    /// Weight kept by the old soft label at each refresh; 1 disables refreshing.
    #[arg(long)]
    pub label_momentum: Option<f64>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub t_val: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Train on one-hot pseudo labels.
    #[arg(long)]
    pub hard_labels: bool,
    /// Skip pseudo labeling and self-training.
    #[arg(long)]
    pub no_pseudo: bool,
    /// Update the classifier from gradients recomputed after the extractor update.
    #[arg(long)]
    pub sequential_update: bool,
}

impl TrainFlags {
    pub fn resolve(&self, seed: Option<u64>) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| ssda_core::Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_str::<TrainConfig>(&text)
                    .map_err(|e| ssda_core::Error::Config(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { cfg.$field = v; })* };
        }
        set!(lambda, r_u, label_momentum, t_max, t_val, base_lr, patience);
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if self.hard_labels {
            cfg.hard_labels = true;
        }
        if self.no_pseudo {
            cfg.use_pseudo = false;
        }
        if self.sequential_update {
            cfg.sequential_update = true;
        }
        cfg.validate()?;
        eprintln!("effective config: {}", serde_json::to_string(&cfg)?);
        Ok(cfg)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ssda_core::Error>() {
            return match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Runtime => 4,
            };
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return 2;
        }
    }
    4
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainBaseline(a) => commands::train_baseline(a),
        Command::PseudoLabel(a) => commands::pseudo_label(a),
        Command::SelfTrain(a) => commands::self_train(a),
        Command::RunPipeline(a) => commands::run_pipeline(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::AblateRu(a) => commands::ablate_ru(a),
        Command::AblateNoise(a) => commands::ablate_noise(a),
        Command::ReportReliability(a) => commands::report_reliability(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
