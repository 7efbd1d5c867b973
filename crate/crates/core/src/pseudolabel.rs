//! Selective pseudo labeling.
//!
//! Every unlabeled target sample gets a soft label (the model's prediction)
//! and a hard label (its argmax). Within each hard-label class, samples are
//! ranked by their mean L1 feature distance to that class's labeled target
//! anchors, and only the closest `⌈r_u · n_u / K⌉` are kept.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coremath::{l1_distance, ProbVec};
use crate::datasets::{HiddenLabels, LabeledSample, UnlabeledSample};
use crate::error::{Error, Result};
use crate::network::{forward_classifier, forward_features, NetworkParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoAnnotation {
    /// Position in the unlabeled target set.
    pub index: usize,
    pub soft_label: ProbVec,
    pub hard_label: usize,
    /// Mean L1 distance to the anchors of `hard_label`; set by [`select`].
    pub distance: Option<f64>,
    #[serde(skip)]
    pub feature: Vec<f64>,
}

/// Soft and hard pseudo labels for every unlabeled sample.
pub fn infer_pseudo(params: &NetworkParams, unlabeled: &[UnlabeledSample]) -> Result<Vec<PseudoAnnotation>> {
    if unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled set"));
    }
    unlabeled
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let feature = forward_features(&s.x, params)?;
            let soft_label = forward_classifier(&feature, params)?;
            Ok(PseudoAnnotation {
                index,
                hard_label: soft_label.argmax(),
                soft_label,
                distance: None,
                feature,
            })
        })
        .collect()
}

/// Features of the labeled target anchors, grouped by class.
pub fn anchor_features(
    params: &NetworkParams,
    labeled_target: &[LabeledSample],
    num_classes: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for s in labeled_target {
        let slot = by_class
            .get_mut(s.y)
            .ok_or_else(|| Error::Shape(format!("label {} out of range", s.y)))?;
        slot.push(forward_features(&s.x, params)?);
    }
    Ok(by_class)
}

/// `d = (1/n) Σ_i ‖anchor_i − f_u‖₁`
pub fn feature_distance(f_u: &[f64], anchors: &[Vec<f64>]) -> Result<f64> {
    if anchors.is_empty() {
        return Err(Error::Empty("anchor set"));
    }
    let mut total = 0.0;
    for a in anchors {
        total += l1_distance(a, f_u)?;
    }
    Ok(total / anchors.len() as f64)
}

/// Per-class quota `⌈r_u · n_u / K⌉`; `r_u = 1` keeps everything.
pub fn class_quota(r_u: f64, n_u: usize, num_classes: usize) -> Result<usize> {
    if !(r_u > 0.0 && r_u <= 1.0) {
        return Err(Error::Config(format!("r_u must be in (0, 1], got {r_u}")));
    }
    if num_classes == 0 {
        return Err(Error::Config("no classes".into()));
    }
    if r_u >= 1.0 {
        return Ok(n_u);
    }
    let exact = r_u * n_u as f64 / num_classes as f64;
    // guard against representation error pushing an integer just above itself
    Ok((exact - 1e-9).ceil().max(0.0) as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class: usize,
    /// Samples whose hard label is this class.
    pub available: usize,
    /// Selected sample ids, closest first.
    pub selected: Vec<usize>,
    pub distances: Vec<f64>,
}

/// The trusted pseudo-labeled subset and its index set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSet {
    /// Every annotation, with distances filled in, ordered by index.
    pub annotations: Vec<PseudoAnnotation>,
    /// Selected ids, ascending.
    pub index_set: Vec<usize>,
    pub r_u: f64,
    pub n_u: usize,
    pub per_class_quota: usize,
    pub classes: Vec<ClassSelection>,
}

impl SelectedSet {
    pub fn len(&self) -> usize {
        self.index_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_set.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.index_set.binary_search(&index).is_ok()
    }

    /// Selected annotations in `index_set` order.
    pub fn selected(&self) -> impl Iterator<Item = &PseudoAnnotation> {
        self.index_set.iter().map(move |&i| &self.annotations[self.position(i)])
    }

    fn position(&self, index: usize) -> usize {
        self.annotations
            .binary_search_by_key(&index, |a| a.index)
            .expect("index set refers to a known annotation")
    }
}

/// Ranks each hard-label class by anchor distance and keeps the closest
/// `class_quota(r_u, n_u, K)` members.
pub fn select(
    annotations: Vec<PseudoAnnotation>,
    anchors_by_class: &[Vec<Vec<f64>>],
    r_u: f64,
    n_u: usize,
    num_classes: usize,
) -> Result<SelectedSet> {
    let quota = class_quota(r_u, n_u, num_classes)?;
    if anchors_by_class.len() != num_classes {
        return Err(Error::LengthMismatch {
            expected: num_classes,
            actual: anchors_by_class.len(),
        });
    }
    if let Some(c) = anchors_by_class.iter().position(Vec::is_empty) {
        return Err(Error::MissingAnchors(c));
    }
    let mut annotations = annotations;
    annotations.sort_by_key(|a| a.index);
    if annotations.windows(2).any(|w| w[0].index == w[1].index) {
        return Err(Error::Shape("duplicate annotation index".into()));
    }
    if let Some(a) = annotations.iter().find(|a| a.hard_label >= num_classes) {
        return Err(Error::Shape(format!("hard label {} out of range", a.hard_label)));
    }

    annotations.par_iter_mut().try_for_each(|a| -> Result<()> {
        a.distance = Some(feature_distance(&a.feature, &anchors_by_class[a.hard_label])?);
        Ok(())
    })?;

    let classes: Vec<ClassSelection> = (0..num_classes)
        .into_par_iter()
        .map(|class| {
            let mut members: Vec<(f64, usize)> = annotations
                .iter()
                .filter(|a| a.hard_label == class)
                .map(|a| (a.distance.unwrap_or(f64::INFINITY), a.index))
                .collect();
            members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let available = members.len();
            members.truncate(quota.min(available));
            ClassSelection {
                class,
                available,
                selected: members.iter().map(|m| m.1).collect(),
                distances: members.iter().map(|m| m.0).collect(),
            }
        })
        .collect();

    let mut index_set: Vec<usize> = classes.iter().flat_map(|c| c.selected.iter().copied()).collect();
    index_set.sort_unstable();
    Ok(SelectedSet {
        annotations,
        index_set,
        r_u,
        n_u,
        per_class_quota: quota,
        classes,
    })
}

/// Fraction of hard labels that agree with the hidden truth.
pub fn reliability<'a>(
    annotations: impl IntoIterator<Item = &'a PseudoAnnotation>,
    truth: &HiddenLabels,
) -> Result<f64> {
    reliability_of(annotations.into_iter().map(|a| (a.index, a.hard_label)), truth)
}

/// [`reliability`] over `(index, hard_label)` pairs.
pub fn reliability_of(pairs: impl IntoIterator<Item = (usize, usize)>, truth: &HiddenLabels) -> Result<f64> {
    let labels = truth.reveal();
    let (mut n, mut correct) = (0usize, 0usize);
    for (index, hard) in pairs {
        let y = labels
            .get(index)
            .ok_or_else(|| Error::Shape(format!("no ground truth for sample {index}")))?;
        n += 1;
        correct += usize::from(*y == hard);
    }
    if n == 0 {
        return Err(Error::Empty("annotation set"));
    }
    Ok(correct as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilitySummary {
    /// Over every annotation.
    pub before: f64,
    /// Over the selected subset.
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedEntry {
    pub index: usize,
    pub class: usize,
    pub distance: f64,
    pub soft_label: ProbVec,
}

pub const SELECTION_FORMAT_VERSION: u32 = 1;

/// On-disk form of a [`SelectedSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDump {
    pub format_version: u32,
    pub r_u: f64,
    pub n_u: usize,
    pub num_classes: usize,
    pub per_class_quota: usize,
    pub classes: Vec<ClassSelection>,
    pub selected: Vec<SelectedEntry>,
    /// Hard label of every unlabeled sample, by index.
    pub all_hard_labels: Vec<usize>,
    pub reliability: Option<ReliabilitySummary>,
}

impl SelectionDump {
    pub fn from_selection(set: &SelectedSet, num_classes: usize, truth: Option<&HiddenLabels>) -> Result<Self> {
        let reliability = match truth {
            Some(t) => Some(ReliabilitySummary {
                before: reliability(&set.annotations, t)?,
                after: reliability(set.selected(), t)?,
            }),
            None => None,
        };
        Ok(SelectionDump {
            format_version: SELECTION_FORMAT_VERSION,
            r_u: set.r_u,
            n_u: set.n_u,
            num_classes,
            per_class_quota: set.per_class_quota,
            classes: set.classes.clone(),
            selected: set
                .selected()
                .map(|a| SelectedEntry {
                    index: a.index,
                    class: a.hard_label,
                    distance: a.distance.unwrap_or(f64::NAN),
                    soft_label: a.soft_label.clone(),
                })
                .collect(),
            all_hard_labels: set.annotations.iter().map(|a| a.hard_label).collect(),
            reliability,
        })
    }

    pub fn index_set(&self) -> Vec<usize> {
        self.selected.iter().map(|e| e.index).collect()
    }

    /// Recomputes before/after reliability from the dump alone.
    pub fn reliability_against(&self, truth: &HiddenLabels) -> Result<ReliabilitySummary> {
        Ok(ReliabilitySummary {
            before: reliability_of(self.all_hard_labels.iter().copied().enumerate(), truth)?,
            after: reliability_of(self.selected.iter().map(|e| (e.index, e.class)), truth)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let dump: SelectionDump = crate::read_json(path)?;
        if dump.format_version != SELECTION_FORMAT_VERSION {
            return Err(Error::Version {
                found: dump.format_version,
                expected: SELECTION_FORMAT_VERSION,
            });
        }
        Ok(dump)
    }
}
