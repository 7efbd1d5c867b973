//! Semi-supervised domain adaptation with selective pseudo labeling and
//! progressive self-training, on synthetic domain-shift problems.
//!
//! The pipeline has three stages:
//!
//! 1. [`trainer::train_baseline`]: minimax-entropy training on labeled
//!    source and target data plus unlabeled target data.
//! 2. [`pseudolabel::select`]: pseudo labels for the unlabeled target set,
//!    keeping per class only the samples whose features lie closest to the
//!    few labeled target anchors.
//! 3. [`trainer::progressive_self_train`]: training resumes with the
//!    selected soft pseudo labels, which are refreshed with momentum from
//!    the network's own predictions after every validation.
//!
//! [`experiment`] wires the stages together and runs the ablation grids.

pub mod coremath;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod network;
pub mod pseudolabel;
pub mod trainer;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use coremath::{ProbVec, SeedStream};
pub use datasets::{DomainPairSpec, DomainShift, HiddenLabels, LabeledSample, SsdaSplit, UnlabeledSample};
pub use error::{Error, ErrorKind, Result};
pub use network::{Architecture, Checkpoint, GradientBundle, NetworkParams};
pub use pseudolabel::{PseudoAnnotation, SelectedSet, SelectionDump};
pub use trainer::{TrainConfig, TrainOutcome, TrainReport, TrainState};

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
