//! Minimax-entropy training and progressive self-training.
//!
//! One iteration evaluates three batches at the same parameters:
//! labeled (source and labeled target, cross entropy against the class),
//! pseudo-labeled (cross entropy against the live soft labels) and unlabeled
//! (prediction entropy). The extractor descends `L_l + L_pl + λH` while the
//! classifier descends `L_l + L_pl − λH`, i.e. the entropy gradient is
//! reversed on the classifier.
//!
//! Training runs in a [`Session`] whose whole state serializes into a
//! [`TrainState`], so a run can be checkpointed and resumed bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coremath::{argmax, check_simplex, seeded_rng, ProbVec, RngState};
use crate::datasets::{HiddenLabels, LabeledSample, SsdaSplit, UnlabeledSample};
use crate::error::{Error, Result};
use crate::network::{
    self, anneal_lr, backward, batch_loss, predict, Architecture, GradientBundle, NetworkParams, ParamGroup, Sgd,
    SgdHyper, Target,
};
use crate::pseudolabel::SelectedSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Entropy weight λ.
    pub lambda: f64,
    /// Pseudo-label selection ratio.
    pub r_u: f64,
    /// Weight of the old soft label at each refresh; 1 disables refreshing.
    pub label_momentum: f64,
    pub t_max: usize,
    pub t_val: usize,
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub batch_pseudo: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Train on one-hot pseudo labels instead of soft ones.
    pub hard_labels: bool,
    /// Run stage 2 and 3 at all; `false` stops after the baseline.
    pub use_pseudo: bool,
    /// Recompute gradients after the extractor update before updating the
    /// classifier, instead of updating both from one evaluation point.
    pub sequential_update: bool,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            r_u: 0.2,
            label_momentum: 0.9,
            t_max: 5000,
            t_val: 50,
            base_lr: 0.1,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            batch_labeled: 32,
            batch_unlabeled: 32,
            batch_pseudo: 32,
            patience: 10,
            seed: 0,
            hard_labels: false,
            use_pseudo: true,
            sequential_update: false,
            hidden: vec![64, 64],
            feature_dim: 32,
            temperature: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            errs.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.r_u > 0.0 && self.r_u <= 1.0) {
            errs.push(format!("r_u must be in (0, 1], got {}", self.r_u));
        }
        if !(0.0..=1.0).contains(&self.label_momentum) {
            errs.push(format!("label_momentum must be in [0, 1], got {}", self.label_momentum));
        }
        if self.t_max == 0 || self.t_val == 0 || self.t_val > self.t_max {
            errs.push(format!(
                "need 0 < t_val <= t_max, got t_val={} t_max={}",
                self.t_val, self.t_max
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            errs.push("base_lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            errs.push("sgd_momentum must be in [0, 1)".into());
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            errs.push("weight_decay must be >= 0".into());
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 || self.batch_pseudo == 0 {
            errs.push("batch sizes must be >= 1".into());
        }
        if self.patience == 0 {
            errs.push("patience must be >= 1".into());
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            errs.push("layer widths must be >= 1".into());
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            errs.push("temperature must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Architecture {
        Architecture {
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            temperature: self.temperature,
            ..Architecture::for_problem(input_dim, num_classes)
        }
    }

    fn sgd(&self, lr: f64) -> SgdHyper {
        SgdHyper {
            lr,
            momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
        }
    }
}

fn xs_of(samples: &[LabeledSample]) -> Vec<&[f64]> {
    samples.iter().map(|s| s.x.as_slice()).collect()
}

/// Mean cross entropy of labeled samples.
pub fn loss_l(params: &NetworkParams, batch: &[LabeledSample]) -> Result<f64> {
    let ys: Vec<usize> = batch.iter().map(|s| s.y).collect();
    batch_loss(&xs_of(batch), Target::Hard(&ys), params)
}

/// Mean cross entropy against fixed soft labels.
pub fn loss_pl(params: &NetworkParams, xs: &[&[f64]], soft: &[ProbVec]) -> Result<f64> {
    batch_loss(xs, Target::Soft(soft), params)
}

/// Mean prediction entropy over unlabeled samples.
pub fn loss_h(params: &NetworkParams, batch: &[UnlabeledSample]) -> Result<f64> {
    let xs: Vec<&[f64]> = batch.iter().map(|s| s.x.as_slice()).collect();
    batch_loss(&xs, Target::Entropy, params)
}

/// The three batches of one iteration. Any of them may be empty.
#[derive(Debug, Clone, Default)]
pub struct StepBatches<'a> {
    pub labeled_x: Vec<&'a [f64]>,
    pub labeled_y: Vec<usize>,
    pub pseudo_x: Vec<&'a [f64]>,
    pub pseudo_y: Vec<ProbVec>,
    pub unlabeled_x: Vec<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l: f64,
    pub pl: f64,
    pub h: f64,
}

/// Gradients of one iteration, before any update.
#[derive(Debug, Clone)]
pub struct MinimaxGradients {
    pub losses: StepLosses,
    /// `∇(L_l + L_pl)`
    pub supervised: GradientBundle,
    /// `∇H`
    pub entropy: GradientBundle,
}

impl MinimaxGradients {
    /// Extractor part from `L_F = L_l + L_pl + λH`, classifier part from
    /// `L_C = L_l + L_pl − λH`.
    pub fn combined(&self, lambda: f64) -> Result<GradientBundle> {
        let mut g = self.supervised.clone();
        g.add_scaled(ParamGroup::Extractor, lambda, &self.entropy)?;
        g.add_scaled(ParamGroup::Classifier, -lambda, &self.entropy)?;
        Ok(g)
    }
}

pub fn minimax_gradients(params: &NetworkParams, batches: &StepBatches<'_>, lambda: f64) -> Result<MinimaxGradients> {
    if batches.labeled_x.is_empty() && batches.pseudo_x.is_empty() && batches.unlabeled_x.is_empty() {
        return Err(Error::Empty("step batches"));
    }
    let mut losses = StepLosses::default();
    let mut supervised = GradientBundle::zeros_like(params);
    if !batches.labeled_x.is_empty() {
        let (l, g) = backward(&batches.labeled_x, Target::Hard(&batches.labeled_y), params)?;
        losses.l = l;
        supervised.add_scaled(ParamGroup::All, 1.0, &g)?;
    }
    if !batches.pseudo_x.is_empty() {
        let (l, g) = backward(&batches.pseudo_x, Target::Soft(&batches.pseudo_y), params)?;
        losses.pl = l;
        supervised.add_scaled(ParamGroup::All, 1.0, &g)?;
    }
    let mut entropy = GradientBundle::zeros_like(params);
    if !batches.unlabeled_x.is_empty() {
        if lambda > 0.0 {
            let (h, g) = backward(&batches.unlabeled_x, Target::Entropy, params)?;
            losses.h = h;
            entropy = g;
        } else {
            losses.h = batch_loss(&batches.unlabeled_x, Target::Entropy, params)?;
        }
    }
    Ok(MinimaxGradients {
        losses,
        supervised,
        entropy,
    })
}

/// One minimax update of both parameter groups.
pub fn minimax_step(
    params: &mut NetworkParams,
    optimizer: &mut Sgd,
    batches: &StepBatches<'_>,
    lr: f64,
    config: &TrainConfig,
) -> Result<StepLosses> {
    let grads = minimax_gradients(params, batches, config.lambda)?;
    let hyper = config.sgd(lr);
    if config.sequential_update {
        optimizer.step(params, &grads.combined(config.lambda)?, hyper, ParamGroup::Extractor)?;
        let after = minimax_gradients(params, batches, config.lambda)?;
        optimizer.step(params, &after.combined(config.lambda)?, hyper, ParamGroup::Classifier)?;
    } else {
        optimizer.step(params, &grads.combined(config.lambda)?, hyper, ParamGroup::All)?;
    }
    Ok(grads.losses)
}

/// `ỹ ← m·ỹ + (1 − m)·p` for every live label.
pub fn momentum_update_labels(live: &mut [ProbVec], fresh: &[ProbVec], m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("label momentum must be in [0, 1], got {m}")));
    }
    if live.len() != fresh.len() {
        return Err(Error::LengthMismatch {
            expected: live.len(),
            actual: fresh.len(),
        });
    }
    for (old, new) in live.iter_mut().zip(fresh) {
        check_simplex(old)?;
        check_simplex(new)?;
        if old.len() != new.len() {
            return Err(Error::LengthMismatch {
                expected: old.len(),
                actual: new.len(),
            });
        }
        let blended = old.iter().zip(new.iter()).map(|(a, b)| m * a + (1.0 - m) * b).collect();
        *old = ProbVec::new(blended)?;
    }
    Ok(())
}

/// Fraction of argmax predictions that match the hidden labels.
pub fn evaluate(params: &NetworkParams, unlabeled: &[UnlabeledSample], truth: &HiddenLabels) -> Result<f64> {
    if unlabeled.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if truth.len() != unlabeled.len() {
        return Err(Error::LengthMismatch {
            expected: unlabeled.len(),
            actual: truth.len(),
        });
    }
    let hits: Vec<bool> = unlabeled
        .par_iter()
        .zip(truth.reveal().par_iter())
        .map(|(s, &y)| predict(&s.x, params).map(|p| p.argmax() == y))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

pub fn accuracy(params: &NetworkParams, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("labeled set"));
    }
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|s| predict(&s.x, params).map(|p| p.argmax() == s.y))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    SelfTrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iter: usize,
    pub val_acc: f64,
    /// Mean cross entropy on the validation set.
    pub val_loss: f64,
    /// Mean losses over the iterations since the previous validation.
    pub loss_l: f64,
    pub loss_pl: f64,
    pub entropy: f64,
    /// Reliability of the live hard labels, when ground truth was supplied.
    pub reliability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub history: Vec<ValidationRecord>,
    pub stop_reason: Option<StopReason>,
    pub iterations: usize,
    pub best_iter: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub final_test_accuracy: Option<f64>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "iter,val_acc,L_l,L_pl,H,reliability";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.history {
            let rel = r.reliability.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.6},{:.8},{:.8},{:.8},{}",
                r.iter, r.val_acc, r.loss_l, r.loss_pl, r.entropy, rel
            );
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::write_json(path, self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub iter: usize,
    pub val_acc: f64,
    pub val_loss: f64,
    pub params: NetworkParams,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct RunningLosses {
    l: f64,
    pl: f64,
    h: f64,
    count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StreamStates {
    labeled: RngState,
    unlabeled: RngState,
    pseudo: RngState,
}

pub const STATE_VERSION: u32 = 1;

/// Everything a [`Session`] needs to continue where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub version: u32,
    pub stage: Stage,
    pub params: NetworkParams,
    pub optimizer: Sgd,
    /// Completed iterations.
    pub iter: usize,
    /// Frozen selection `I^u`.
    pub index_set: Vec<usize>,
    /// Live soft labels, aligned with `index_set`.
    pub live_labels: Vec<ProbVec>,
    pub best: Option<BestSnapshot>,
    pub stale_validations: usize,
    pub history: Vec<ValidationRecord>,
    pub stop_reason: Option<StopReason>,
    running: RunningLosses,
    streams: StreamStates,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let state: TrainState = crate::read_json(path)?;
        if state.version != STATE_VERSION {
            return Err(Error::Version {
                found: state.version,
                expected: STATE_VERSION,
            });
        }
        Ok(state)
    }
}

/// A training run over one split.
///
/// The session only sees the training-facing parts of the split; ground
/// truth enters solely through the optional monitor used for reporting.
pub struct Session<'a> {
    split: &'a SsdaSplit,
    config: &'a TrainConfig,
    monitor: Option<&'a HiddenLabels>,
    labeled_pool: Vec<&'a LabeledSample>,
    state: TrainState,
    labeled_rng: ChaCha8Rng,
    unlabeled_rng: ChaCha8Rng,
    pseudo_rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    fn new(
        split: &'a SsdaSplit,
        config: &'a TrainConfig,
        stage: Stage,
        params: NetworkParams,
        pseudo: Option<(Vec<usize>, Vec<ProbVec>)>,
    ) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        if params.input_dim() != split.input_dim() || params.num_classes() != split.num_classes() {
            return Err(Error::Shape("network does not match the split".into()));
        }
        let (index_set, live_labels) = pseudo.unwrap_or_default();
        if index_set.len() != live_labels.len() {
            return Err(Error::LengthMismatch {
                expected: index_set.len(),
                actual: live_labels.len(),
            });
        }
        if stage == Stage::SelfTrain {
            if index_set.is_empty() {
                return Err(Error::Empty("pseudo-label selection"));
            }
            if index_set.iter().any(|&i| i >= split.unlabeled_target.len()) {
                return Err(Error::Shape("selection refers to unknown samples".into()));
            }
            for p in &live_labels {
                check_simplex(p)?;
                if p.len() != split.num_classes() {
                    return Err(Error::Shape("soft label length differs from the class count".into()));
                }
            }
        }
        let root = seeded_rng(config.seed);
        let tag = match stage {
            Stage::Baseline => "baseline",
            Stage::SelfTrain => "self-train",
        };
        let labeled_rng = root.substream(&format!("batch/{tag}/labeled"));
        let unlabeled_rng = root.substream(&format!("batch/{tag}/unlabeled"));
        let pseudo_rng = root.substream(&format!("batch/{tag}/pseudo"));
        let state = TrainState {
            version: STATE_VERSION,
            stage,
            optimizer: Sgd::new(&params),
            params,
            iter: 0,
            index_set,
            live_labels,
            best: None,
            stale_validations: 0,
            history: Vec::new(),
            stop_reason: None,
            running: RunningLosses::default(),
            streams: StreamStates {
                labeled: RngState::capture(&labeled_rng),
                unlabeled: RngState::capture(&unlabeled_rng),
                pseudo: RngState::capture(&pseudo_rng),
            },
        };
        Ok(Session {
            labeled_pool: split.source.iter().chain(&split.labeled_target).collect(),
            split,
            config,
            monitor: None,
            state,
            labeled_rng,
            unlabeled_rng,
            pseudo_rng,
        })
    }

    /// Stage 1 from a freshly initialized network.
    pub fn baseline(split: &'a SsdaSplit, config: &'a TrainConfig) -> Result<Self> {
        config.validate()?;
        let arch = config.architecture(split.input_dim(), split.num_classes());
        let params = NetworkParams::init(&arch, &mut seeded_rng(config.seed).substream("init"))?;
        Session::new(split, config, Stage::Baseline, params, None)
    }

    /// Stage 3, resumed from `params` with a fresh optimizer and schedule.
    pub fn self_train(
        split: &'a SsdaSplit,
        config: &'a TrainConfig,
        params: NetworkParams,
        selection: &SelectedSet,
    ) -> Result<Self> {
        let labels = selection.selected().map(|a| a.soft_label.clone()).collect();
        Session::new(
            split,
            config,
            Stage::SelfTrain,
            params,
            Some((selection.index_set.clone(), labels)),
        )
    }

    /// Stage 3 from an explicit index set and its soft labels, e.g. a loaded selection dump.
    pub fn self_train_with_labels(
        split: &'a SsdaSplit,
        config: &'a TrainConfig,
        params: NetworkParams,
        index_set: Vec<usize>,
        soft_labels: Vec<ProbVec>,
    ) -> Result<Self> {
        Session::new(split, config, Stage::SelfTrain, params, Some((index_set, soft_labels)))
    }

    pub fn resume(split: &'a SsdaSplit, config: &'a TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        let labeled_rng = state.streams.labeled.restore()?;
        let unlabeled_rng = state.streams.unlabeled.restore()?;
        let pseudo_rng = state.streams.pseudo.restore()?;
        Ok(Session {
            labeled_pool: split.source.iter().chain(&split.labeled_target).collect(),
            split,
            config,
            monitor: None,
            state,
            labeled_rng,
            unlabeled_rng,
            pseudo_rng,
        })
    }

    /// Ground truth used only to fill the reliability column of the report.
    pub fn with_monitor(mut self, truth: &'a HiddenLabels) -> Self {
        self.monitor = Some(truth);
        self
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Snapshot of the full state, including random stream positions.
    pub fn checkpoint(&self) -> TrainState {
        let mut s = self.state.clone();
        s.streams = StreamStates {
            labeled: RngState::capture(&self.labeled_rng),
            unlabeled: RngState::capture(&self.unlabeled_rng),
            pseudo: RngState::capture(&self.pseudo_rng),
        };
        s
    }

    pub fn is_finished(&self) -> bool {
        self.state.stop_reason.is_some()
    }

    fn draw_batches(&mut self) -> StepBatches<'a> {
        let split = self.split;
        let cfg = self.config;
        let mut b = StepBatches::default();
        for _ in 0..cfg.batch_labeled {
            let s = self.labeled_pool[self.labeled_rng.random_range(0..self.labeled_pool.len())];
            b.labeled_x.push(s.x.as_slice());
            b.labeled_y.push(s.y);
        }
        if !split.unlabeled_target.is_empty() {
            for _ in 0..cfg.batch_unlabeled {
                let i = self.unlabeled_rng.random_range(0..split.unlabeled_target.len());
                b.unlabeled_x.push(split.unlabeled_target[i].x.as_slice());
            }
        }
        if self.state.stage == Stage::SelfTrain && !self.state.index_set.is_empty() {
            let k = split.num_classes();
            for _ in 0..cfg.batch_pseudo {
                let j = self.pseudo_rng.random_range(0..self.state.index_set.len());
                b.pseudo_x
                    .push(split.unlabeled_target[self.state.index_set[j]].x.as_slice());
                let live = &self.state.live_labels[j];
                b.pseudo_y.push(if cfg.hard_labels {
                    ProbVec::one_hot(k, live.argmax())
                } else {
                    live.clone()
                });
            }
        }
        b
    }

    /// Runs one iteration, validating and refreshing labels on schedule.
    pub fn step(&mut self) -> Result<()> {
        if self.is_finished() {
            return Ok(());
        }
        let cfg = self.config;
        let t = self.state.iter + 1;
        let lr = anneal_lr(cfg.base_lr, t as f64 / cfg.t_max as f64);
        let batches = self.draw_batches();
        let losses = minimax_step(&mut self.state.params, &mut self.state.optimizer, &batches, lr, cfg)?;
        self.state.iter = t;
        let run = &mut self.state.running;
        run.l += losses.l;
        run.pl += losses.pl;
        run.h += losses.h;
        run.count += 1;

        if t.is_multiple_of(cfg.t_val) {
            self.validate()?;
            if self.state.stage == Stage::SelfTrain && cfg.label_momentum < 1.0 {
                self.refresh_labels()?;
            }
        }
        if self.state.stop_reason.is_none() && t >= cfg.t_max {
            self.state.stop_reason = Some(StopReason::MaxIterations);
        }
        Ok(())
    }

    fn validate(&mut self) -> Result<()> {
        let val_acc = accuracy(&self.state.params, &self.split.validation_target)?;
        let val_loss = loss_l(&self.state.params, &self.split.validation_target)?;
        let reliability = match (self.monitor, self.state.stage) {
            (Some(truth), Stage::SelfTrain) => Some(crate::pseudolabel::reliability_of(
                self.state
                    .index_set
                    .iter()
                    .copied()
                    .zip(self.state.live_labels.iter().map(|p| argmax(p))),
                truth,
            )?),
            _ => None,
        };
        let run = std::mem::take(&mut self.state.running);
        let n = run.count.max(1) as f64;
        self.state.history.push(ValidationRecord {
            iter: self.state.iter,
            val_acc,
            val_loss,
            loss_l: run.l / n,
            loss_pl: run.pl / n,
            entropy: run.h / n,
            reliability,
        });
        // A small validation set ties often; equal accuracy with lower loss counts as progress.
        let improved = self
            .state
            .best
            .as_ref()
            .is_none_or(|b| val_acc > b.val_acc || (val_acc == b.val_acc && val_loss < b.val_loss));
        if improved {
            self.state.best = Some(BestSnapshot {
                iter: self.state.iter,
                val_acc,
                val_loss,
                params: self.state.params.clone(),
            });
            self.state.stale_validations = 0;
        } else {
            self.state.stale_validations += 1;
            if self.state.stale_validations >= self.config.patience {
                self.state.stop_reason = Some(StopReason::Converged);
            }
        }
        Ok(())
    }

    /// Full forward pass over the selected samples, blended into the live labels.
    fn refresh_labels(&mut self) -> Result<()> {
        let params = &self.state.params;
        let unlabeled = &self.split.unlabeled_target;
        let fresh: Vec<ProbVec> = self
            .state
            .index_set
            .par_iter()
            .map(|&i| predict(&unlabeled[i].x, params))
            .collect::<Result<_>>()?;
        momentum_update_labels(&mut self.state.live_labels, &fresh, self.config.label_momentum)
    }

    /// Steps until the stopping rule fires or `until_iter` iterations are done.
    pub fn run_until(&mut self, until_iter: usize) -> Result<()> {
        while !self.is_finished() && self.state.iter < until_iter {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        let t_max = self.config.t_max;
        self.run_until(t_max)?;
        Ok(self.finish())
    }

    /// Best-validation parameters and the report so far.
    pub fn finish(self) -> TrainOutcome {
        let state = self.state;
        let (params, best_iter, best_val_acc) = match state.best {
            Some(b) => (b.params, Some(b.iter), Some(b.val_acc)),
            None => (state.params, None, None),
        };
        TrainOutcome {
            params,
            report: TrainReport {
                stage: state.stage,
                history: state.history,
                stop_reason: state.stop_reason,
                iterations: state.iter,
                best_iter,
                best_val_acc,
                final_test_accuracy: None,
            },
            index_set: state.index_set,
            live_labels: state.live_labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters.
    pub params: NetworkParams,
    pub report: TrainReport,
    pub index_set: Vec<usize>,
    pub live_labels: Vec<ProbVec>,
}

/// Stage 1: minimax-entropy training without pseudo labels.
pub fn train_baseline(split: &SsdaSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    Session::baseline(split, config)?.run()
}

/// Stage 3: self-training on the selected pseudo labels with momentum refresh.
pub fn progressive_self_train(
    split: &SsdaSplit,
    selected: &SelectedSet,
    checkpoint: &NetworkParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    Session::self_train(split, config, checkpoint.clone(), selected)?.run()
}

pub use network::Checkpoint;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coremath::{cross_entropy, entropy, finite_diff_grad};
    use crate::datasets::{DomainPairSpec, DomainShift};
    use crate::network::Architecture;
    use crate::pseudolabel::{anchor_features, infer_pseudo, select};

    fn tiny_params(seed: u64) -> NetworkParams {
        let arch = Architecture {
            input_dim: 2,
            hidden: vec![8],
            feature_dim: 6,
            num_classes: 3,
            temperature: 0.5,
            classifier_init_scale: 0.5,
            ..Architecture::default()
        };
        NetworkParams::init(&arch, &mut seeded_rng(seed).substream("init")).unwrap()
    }

    fn points(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed).substream("pts");
        (0..n)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect()
    }

    #[test]
    fn labeled_loss_examples() {
        let params = tiny_params(1);
        let batch: Vec<LabeledSample> = points(2, 7)
            .into_iter()
            .enumerate()
            .map(|(i, x)| LabeledSample { x, y: i % 3 })
            .collect();
        let brute: f64 = batch
            .iter()
            .map(|s| cross_entropy(&predict(&s.x, &params).unwrap(), &ProbVec::one_hot(3, s.y)).unwrap())
            .sum::<f64>()
            / batch.len() as f64;
        assert!((loss_l(&params, &batch).unwrap() - brute).abs() < 1e-12);

        let mut uniform = params.clone();
        uniform.classifier = crate::coremath::Matrix::zeros(3, 6);
        assert!((loss_l(&uniform, &batch).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(loss_l(&params, &[]).is_err());
    }

    #[test]
    fn confident_model_has_zero_labeled_loss_and_entropy() {
        // identity extractor, classifier aligned with the inputs, very low temperature
        let params = NetworkParams {
            extractor: vec![network::DenseLayer {
                weights: crate::coremath::Matrix::identity(2),
                bias: vec![0.0; 2],
                activation: network::Activation::Identity,
            }],
            classifier: crate::coremath::Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            temperature: 1e-3,
        };
        let batch = vec![
            LabeledSample {
                x: vec![3.0, 0.0],
                y: 0,
            },
            LabeledSample {
                x: vec![0.0, 2.0],
                y: 1,
            },
        ];
        assert!(loss_l(&params, &batch).unwrap() < 1e-12);
        let unl: Vec<UnlabeledSample> = batch.iter().map(|s| UnlabeledSample { x: s.x.clone() }).collect();
        assert!(loss_h(&params, &unl).unwrap() < 1e-12);
    }

    #[test]
    fn pseudo_loss_examples() {
        let params = tiny_params(3);
        let xs = points(4, 5);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let own: Vec<ProbVec> = refs.iter().map(|x| predict(x, &params).unwrap()).collect();
        let mean_h = own.iter().map(|p| entropy(p)).sum::<f64>() / own.len() as f64;
        assert!((loss_pl(&params, &refs, &own).unwrap() - mean_h).abs() < 1e-12);

        let ys = [0, 2, 1, 1, 0];
        let onehot: Vec<ProbVec> = ys.iter().map(|&y| ProbVec::one_hot(3, y)).collect();
        let labeled: Vec<LabeledSample> = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| LabeledSample { x: x.clone(), y })
            .collect();
        assert!((loss_pl(&params, &refs, &onehot).unwrap() - loss_l(&params, &labeled).unwrap()).abs() < 1e-12);
        assert!(loss_pl(&params, &[], &[]).is_err());
    }

    #[test]
    fn pseudo_gradient_ignores_label_values_within_a_step() {
        // The pseudo labels are constants: perturbing them changes the loss
        // value but the parameter gradient is that of the parameters only,
        // which finite differences over θ with ỹ held fixed reproduce.
        let params = tiny_params(5);
        let xs = points(6, 4);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let soft: Vec<ProbVec> = (0..4)
            .map(|i| crate::coremath::softmax(&[i as f64 * 0.4, 0.1, -0.3]).unwrap())
            .collect();
        let batches = StepBatches {
            pseudo_x: refs.clone(),
            pseudo_y: soft.clone(),
            ..Default::default()
        };
        let g = minimax_gradients(&params, &batches, 0.0).unwrap();
        let num = finite_diff_grad(
            |theta| {
                let mut q = params.clone();
                q.set_flat(theta).unwrap();
                loss_pl(&q, &refs, &soft).unwrap()
            },
            &params.flatten(),
            1e-5,
        );
        let analytic = g.supervised.flatten();
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, n) in analytic.iter().zip(&num) {
            assert!((a - n).abs() / scale < 1e-4);
        }
        // gradient of the objective with respect to the labels themselves is
        // never applied: labels are unchanged by a step
        let mut p = params.clone();
        let mut opt = Sgd::new(&p);
        let before = batches.pseudo_y.clone();
        minimax_step(&mut p, &mut opt, &batches, 0.1, &TrainConfig::default()).unwrap();
        assert_eq!(batches.pseudo_y, before);
    }

    #[test]
    fn entropy_loss_bounds() {
        let params = tiny_params(7);
        let unl: Vec<UnlabeledSample> = points(8, 20).into_iter().map(|x| UnlabeledSample { x }).collect();
        let h = loss_h(&params, &unl).unwrap();
        assert!(h >= 0.0 && h <= 3f64.ln() + 1e-12);

        let arch = Architecture::default();
        let fresh = NetworkParams::init(&arch, &mut seeded_rng(0).substream("init")).unwrap();
        let unl2: Vec<UnlabeledSample> = points(9, 100).into_iter().map(|x| UnlabeledSample { x }).collect();
        let h0 = loss_h(&fresh, &unl2).unwrap();
        assert!((h0 - 5f64.ln()).abs() < 0.05 * 5f64.ln(), "{h0}");
    }

    #[test]
    fn zero_lambda_is_joint_descent() {
        let params = tiny_params(10);
        let xs = points(11, 6);
        let unl = points(12, 6);
        let batches = StepBatches {
            labeled_x: xs.iter().map(Vec::as_slice).collect(),
            labeled_y: vec![0, 1, 2, 0, 1, 2],
            unlabeled_x: unl.iter().map(Vec::as_slice).collect(),
            ..Default::default()
        };
        let g = minimax_gradients(&params, &batches, 0.0).unwrap();
        assert_eq!(g.combined(0.0).unwrap(), g.supervised);
        let cfg = TrainConfig {
            lambda: 0.0,
            sgd_momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = params.clone();
        minimax_step(&mut p, &mut Sgd::new(&params), &batches, 0.05, &cfg).unwrap();
        let labeled: Vec<LabeledSample> = xs
            .iter()
            .zip(&batches.labeled_y)
            .map(|(x, &y)| LabeledSample { x: x.clone(), y })
            .collect();
        assert!(loss_l(&p, &labeled).unwrap() < loss_l(&params, &labeled).unwrap());
    }

    #[test]
    fn entropy_sign_split() {
        let params = tiny_params(13);
        let unl = points(14, 8);
        let unl_samples: Vec<UnlabeledSample> = unl.iter().map(|x| UnlabeledSample { x: x.clone() }).collect();
        let batches = StepBatches {
            unlabeled_x: unl.iter().map(Vec::as_slice).collect(),
            ..Default::default()
        };
        let lambda = 0.1;
        let lr = 0.05;
        let cfg = TrainConfig {
            lambda,
            sgd_momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let g = minimax_gradients(&params, &batches, lambda).unwrap();
        let mut stepped = params.clone();
        minimax_step(&mut stepped, &mut Sgd::new(&params), &batches, lr, &cfg).unwrap();

        // classifier update is the negation of plain descent on +λH
        let n_f = params.num_extractor_params();
        let before = params.flatten();
        let after = stepped.flatten();
        for (i, gv) in g.entropy.classifier_flat().iter().enumerate() {
            let moved = after[n_f + i] - before[n_f + i];
            let descent = -lr * lambda * gv;
            assert!((moved + descent).abs() < 1e-15);
        }
        // directional finite differences at the pre-step point
        let h0 = loss_h(&params, &unl_samples).unwrap();
        let mut only_c = params.clone();
        only_c.classifier = stepped.classifier.clone();
        let mut only_f = stepped.clone();
        only_f.classifier = params.classifier.clone();
        assert!(loss_h(&only_c, &unl_samples).unwrap() > h0);
        assert!(loss_h(&only_f, &unl_samples).unwrap() < h0);
    }

    #[test]
    fn label_refresh_examples() {
        let mut live = vec![ProbVec::one_hot(2, 0)];
        momentum_update_labels(&mut live, &[ProbVec::one_hot(2, 1)], 0.9).unwrap();
        assert!((live[0][0] - 0.9).abs() < 1e-15 && (live[0][1] - 0.1).abs() < 1e-15);

        let p = ProbVec::new(vec![0.2, 0.5, 0.3]).unwrap();
        let mut same = vec![p.clone()];
        momentum_update_labels(&mut same, std::slice::from_ref(&p), 0.9).unwrap();
        for (a, b) in same[0].iter().zip(p.iter()) {
            assert!((a - b).abs() < 1e-15);
        }

        let target = ProbVec::new(vec![0.1, 0.6, 0.3]).unwrap();
        let mut live = vec![ProbVec::one_hot(3, 0)];
        let dist = |a: &ProbVec| crate::coremath::l1_distance(a, &target).unwrap();
        let mut prev = dist(&live[0]);
        for _ in 0..30 {
            momentum_update_labels(&mut live, std::slice::from_ref(&target), 0.9).unwrap();
            let d = dist(&live[0]);
            assert!((d / prev - 0.9).abs() < 1e-9);
            prev = d;
        }

        let mut broken: Vec<ProbVec> = vec![serde_json::from_str("[0.7, 0.7]").unwrap()];
        assert!(momentum_update_labels(&mut broken, &[ProbVec::uniform(2)], 0.9).is_err());
        assert!(momentum_update_labels(&mut live, &[target], 1.5).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let params = tiny_params(15);
        let unl: Vec<UnlabeledSample> = points(16, 30).into_iter().map(|x| UnlabeledSample { x }).collect();
        let preds: Vec<usize> = unl.iter().map(|s| predict(&s.x, &params).unwrap().argmax()).collect();
        assert_eq!(evaluate(&params, &unl, &HiddenLabels::new(preds.clone())).unwrap(), 1.0);
        let shifted: Vec<usize> = preds
            .iter()
            .enumerate()
            .map(|(i, &p)| if i % 3 == 0 { (p + 1) % 3 } else { p })
            .collect();
        let brute = preds.iter().zip(&shifted).filter(|(a, b)| a == b).count() as f64 / 30.0;
        assert_eq!(evaluate(&params, &unl, &HiddenLabels::new(shifted)).unwrap(), brute);
        assert!(evaluate(&params, &[], &HiddenLabels::new(vec![])).is_err());
    }

    #[test]
    fn random_classifier_is_near_chance() {
        let params = NetworkParams::init(&Architecture::default(), &mut seeded_rng(3).substream("init")).unwrap();
        let mut rng = seeded_rng(4).substream("labels");
        let unl: Vec<UnlabeledSample> = points(17, 2000).into_iter().map(|x| UnlabeledSample { x }).collect();
        let truth = HiddenLabels::new((0..2000).map(|_| rng.random_range(0..5)).collect());
        let acc = evaluate(&params, &unl, &truth).unwrap();
        // binomial sd at p=0.2, n=2000 is ~0.009
        assert!((acc - 0.2).abs() < 0.04, "{acc}");
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            t_max: 400,
            t_val: 20,
            patience: 5,
            ..TrainConfig::default()
        }
    }

    fn separable_split(seed: u64) -> SsdaSplit {
        let spec = DomainPairSpec {
            num_classes: 3,
            n_source: 150,
            n_target: 150,
            class_separation: 6.0,
            noise_std: 0.5,
            shift: DomainShift::identity(2),
            seed,
            ..DomainPairSpec::default()
        };
        SsdaSplit::generate(&spec, 3, 3).unwrap()
    }

    #[test]
    fn baseline_fits_separable_data() {
        let split = separable_split(1);
        let out = train_baseline(&split, &quick_config()).unwrap();
        assert!(out.report.best_val_acc.unwrap() >= 0.99);
        let acc = evaluate(&out.params, &split.unlabeled_target, split.hidden_truth()).unwrap();
        assert!(acc > 0.97, "{acc}");
        let anns = infer_pseudo(&out.params, &split.unlabeled_target).unwrap();
        let rel = crate::pseudolabel::reliability(&anns, split.hidden_truth()).unwrap();
        assert!(rel > 0.95);
    }

    #[test]
    fn training_is_deterministic() {
        let split = separable_split(2);
        let cfg = quick_config();
        let a = train_baseline(&split, &cfg).unwrap();
        let b = train_baseline(&split, &cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn self_training_keeps_membership_and_simplex() {
        let split = separable_split(3);
        let cfg = quick_config();
        let base = train_baseline(&split, &cfg).unwrap();
        let anns = infer_pseudo(&base.params, &split.unlabeled_target).unwrap();
        let anchors = anchor_features(&base.params, &split.labeled_target, 3).unwrap();
        let n_u = split.unlabeled_target.len();
        let sel = select(anns, &anchors, 0.2, n_u, 3).unwrap();
        let mut session = Session::self_train(&split, &cfg, base.params.clone(), &sel)
            .unwrap()
            .with_monitor(split.hidden_truth());
        while !session.is_finished() {
            session.step().unwrap();
            for p in &session.state().live_labels {
                check_simplex(p).unwrap();
            }
        }
        let out = session.finish();
        assert_eq!(out.index_set, sel.index_set);
        assert!(out.report.history.iter().all(|r| r.reliability.is_some()));
        assert!(out.report.history.windows(2).all(|w| w[0].iter < w[1].iter));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let split = separable_split(4);
        let cfg = TrainConfig {
            patience: 100,
            t_max: 200,
            ..quick_config()
        };
        let straight = train_baseline(&split, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let mut first = Session::baseline(&split, &cfg).unwrap();
        first.run_until(90).unwrap();
        first.checkpoint().save(&path).unwrap();
        drop(first);
        let resumed = Session::resume(&split, &cfg, TrainState::load(&path).unwrap())
            .unwrap()
            .run()
            .unwrap();
        assert_eq!(resumed.report.to_csv(), straight.report.to_csv());
        assert_eq!(resumed.report, straight.report);
        assert_eq!(resumed.params, straight.params);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda: -1.0,
            t_val: 10_000,
            batch_pseudo: 0,
            ..TrainConfig::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("lambda") && msg.contains("t_val") && msg.contains("batch"));
    }

    #[test]
    fn report_csv_layout() {
        let report = TrainReport {
            stage: Stage::SelfTrain,
            history: vec![ValidationRecord {
                iter: 50,
                val_acc: 0.8,
                val_loss: 0.6,
                loss_l: 0.5,
                loss_pl: 0.25,
                entropy: 0.125,
                reliability: Some(0.9),
            }],
            stop_reason: Some(StopReason::Converged),
            iterations: 50,
            best_iter: Some(50),
            best_val_acc: Some(0.8),
            final_test_accuracy: None,
        };
        assert_eq!(
            report.to_csv(),
            "iter,val_acc,L_l,L_pl,H,reliability\n50,0.800000,0.50000000,0.25000000,0.12500000,0.900000\n"
        );
    }
}
