//! The classification model `p(x) = C(F(x; θ_F); θ_C)`.
//!
//! `F` is a small ReLU multilayer perceptron. `C` is a cosine-similarity
//! head: the feature is L2-normalized, multiplied by the class weight matrix
//! and divided by a fixed temperature before the softmax. Gradients are
//! computed analytically and kept split by parameter group so that the two
//! groups can be driven in opposite directions on the entropy term.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coremath::{self, l2_norm, Matrix, ProbVec, RngState, LOG_FLOOR};
use crate::error::{Error, Result};

/// Below this norm a feature is treated as degenerate and left unnormalized.
pub const DEGENERATE_NORM: f64 = 1e-12;

static DEGENERATE_FEATURES: AtomicU64 = AtomicU64::new(0);

/// Number of degenerate (near-zero) features seen by the classifier head
/// since process start.
pub fn degenerate_feature_events() -> u64 {
    DEGENERATE_FEATURES.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Layer sizes and head settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub temperature: f64,
    /// Activation on the last extractor layer (the feature itself).
    pub feature_activation: Activation,
    /// Half-width of the uniform initialization of the classifier weights.
    pub classifier_init_scale: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: 2,
            hidden: vec![64, 64],
            feature_dim: 32,
            num_classes: 5,
            temperature: 0.05,
            feature_activation: Activation::Identity,
            classifier_init_scale: 0.01,
        }
    }
}

impl Architecture {
    pub fn for_problem(input_dim: usize, num_classes: usize) -> Self {
        Architecture {
            input_dim,
            num_classes,
            ..Architecture::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Weights of the extractor `F` and the classifier `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub extractor: Vec<DenseLayer>,
    /// `K × d_f`
    pub classifier: Matrix,
    pub temperature: f64,
}

impl NetworkParams {
    /// He-style uniform initialization for the extractor; the classifier
    /// starts small so the initial predictions are close to uniform.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.feature_dim == 0 || arch.num_classes < 2 {
            return Err(Error::Config(format!("degenerate architecture {arch:?}")));
        }
        if arch.temperature.is_nan() || arch.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.feature_dim);
        let mut extractor = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let activation = if i + 2 == dims.len() {
                arch.feature_activation
            } else {
                Activation::Relu
            };
            extractor.push(DenseLayer {
                weights: Matrix::from_vec(fan_out, fan_in, w)?,
                bias: vec![0.0; fan_out],
                activation,
            });
        }
        let s = arch.classifier_init_scale;
        let c = (0..arch.num_classes * arch.feature_dim)
            .map(|_| if s > 0.0 { rng.random_range(-s..s) } else { 0.0 })
            .collect();
        Ok(NetworkParams {
            extractor,
            classifier: Matrix::from_vec(arch.num_classes, arch.feature_dim, c)?,
            temperature: arch.temperature,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.extractor
            .first()
            .map_or(self.classifier.cols(), DenseLayer::in_dim)
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_dim();
        for (i, layer) in self.extractor.iter().enumerate() {
            if layer.in_dim() != width || layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape(format!("extractor layer {i} does not chain")));
            }
            width = layer.out_dim();
        }
        if width != self.classifier.cols() {
            return Err(Error::Shape("classifier does not match feature width".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Shape("temperature must be positive".into()));
        }
        if !self.flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::Shape("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn num_extractor_params(&self) -> usize {
        self.extractor
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn num_classifier_params(&self) -> usize {
        self.classifier.as_slice().len()
    }

    /// All trainable values: extractor layers (weights then bias) then classifier.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_extractor_params() + self.num_classifier_params());
        for l in &self.extractor {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(self.classifier.as_slice());
        out
    }

    /// Inverse of [`NetworkParams::flatten`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_extractor_params() + self.num_classifier_params();
        if flat.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: flat.len(),
            });
        }
        let mut rest = flat;
        for l in &mut self.extractor {
            let w = l.weights.as_mut_slice();
            let (head, tail) = rest.split_at(w.len());
            w.copy_from_slice(head);
            let (head, tail) = tail.split_at(l.bias.len());
            l.bias.copy_from_slice(head);
            rest = tail;
        }
        self.classifier.as_mut_slice().copy_from_slice(rest);
        Ok(())
    }
}

fn check_input(x: &[f64], params: &NetworkParams) -> Result<()> {
    if x.len() != params.input_dim() {
        return Err(Error::LengthMismatch {
            expected: params.input_dim(),
            actual: x.len(),
        });
    }
    Ok(())
}

/// `f(x) = F(x; θ_F)`.
pub fn forward_features(x: &[f64], params: &NetworkParams) -> Result<Vec<f64>> {
    check_input(x, params)?;
    let mut h = x.to_vec();
    for layer in &params.extractor {
        let mut z = layer.weights.matvec(&h);
        for (v, b) in z.iter_mut().zip(&layer.bias) {
            *v = layer.activation.apply(*v + b);
        }
        h = z;
    }
    Ok(h)
}

/// Returns the normalized feature and whether the feature was degenerate.
fn normalize(f: &[f64]) -> (Vec<f64>, f64, bool) {
    let n = l2_norm(f);
    if n < DEGENERATE_NORM {
        DEGENERATE_FEATURES.fetch_add(1, Ordering::Relaxed);
        (f.to_vec(), n, true)
    } else {
        (f.iter().map(|v| v / n).collect(), n, false)
    }
}

fn logits(f_hat: &[f64], params: &NetworkParams) -> Vec<f64> {
    let t = params.temperature;
    params.classifier.matvec(f_hat).into_iter().map(|z| z / t).collect()
}

/// `p = softmax(W · (f/‖f‖₂) / T)`.
pub fn forward_classifier(f: &[f64], params: &NetworkParams) -> Result<ProbVec> {
    if f.len() != params.feature_dim() {
        return Err(Error::LengthMismatch {
            expected: params.feature_dim(),
            actual: f.len(),
        });
    }
    let (f_hat, _, _) = normalize(f);
    coremath::softmax(&logits(&f_hat, params))
}

/// Full forward pass `p(x)`.
pub fn predict(x: &[f64], params: &NetworkParams) -> Result<ProbVec> {
    forward_classifier(&forward_features(x, params)?, params)
}

/// What a batch is trained towards.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// Class indices; cross entropy against one-hot vectors.
    Hard(&'a [usize]),
    /// Soft labels, held constant.
    Soft(&'a [ProbVec]),
    /// Entropy of the model's own predictions.
    Entropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// `∂L/∂θ_F` and `∂L/∂θ_C`, shaped like the parameters they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub extractor: Vec<LayerGrad>,
    pub classifier: Matrix,
}

impl GradientBundle {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        GradientBundle {
            extractor: params
                .extractor
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            classifier: Matrix::zeros(params.classifier.rows(), params.classifier.cols()),
        }
    }

    pub fn extractor_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.extractor {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn classifier_flat(&self) -> &[f64] {
        self.classifier.as_slice()
    }

    /// Same ordering as [`NetworkParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.extractor_flat();
        out.extend_from_slice(self.classifier.as_slice());
        out
    }

    fn for_each_mut(&mut self, group: ParamGroup, mut f: impl FnMut(&mut [f64])) {
        if group.has_extractor() {
            for l in &mut self.extractor {
                f(l.weights.as_mut_slice());
                f(&mut l.bias);
            }
        }
        if group.has_classifier() {
            f(self.classifier.as_mut_slice());
        }
    }

    pub fn scale(&mut self, group: ParamGroup, s: f64) {
        self.for_each_mut(group, |xs| xs.iter_mut().for_each(|v| *v *= s));
    }

    /// `self += s · other` on the given group.
    pub fn add_scaled(&mut self, group: ParamGroup, s: f64, other: &GradientBundle) -> Result<()> {
        self.check_shape(other)?;
        if group.has_extractor() {
            for (a, b) in self.extractor.iter_mut().zip(&other.extractor) {
                axpy(a.weights.as_mut_slice(), s, b.weights.as_slice());
                axpy(&mut a.bias, s, &b.bias);
            }
        }
        if group.has_classifier() {
            axpy(self.classifier.as_mut_slice(), s, other.classifier.as_slice());
        }
        Ok(())
    }

    fn check_shape(&self, other: &GradientBundle) -> Result<()> {
        let same = self.extractor.len() == other.extractor.len()
            && self
                .extractor
                .iter()
                .zip(&other.extractor)
                .all(|(a, b)| a.weights.shape() == b.weights.shape() && a.bias.len() == b.bias.len())
            && self.classifier.shape() == other.classifier.shape();
        if same {
            Ok(())
        } else {
            Err(Error::Shape("gradient bundles are not congruent".into()))
        }
    }

    pub(crate) fn check_params(&self, params: &NetworkParams) -> Result<()> {
        self.check_shape(&GradientBundle::zeros_like(params))
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Parameter subset an update applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Classifier,
    All,
}

impl ParamGroup {
    fn has_extractor(self) -> bool {
        matches!(self, ParamGroup::Extractor | ParamGroup::All)
    }

    fn has_classifier(self) -> bool {
        matches!(self, ParamGroup::Classifier | ParamGroup::All)
    }
}

/// Mean loss over the batch and its exact gradient.
pub fn backward(xs: &[&[f64]], target: Target<'_>, params: &NetworkParams) -> Result<(f64, GradientBundle)> {
    if xs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let k = params.num_classes();
    match target {
        Target::Hard(ys) if ys.len() != xs.len() => {
            return Err(Error::LengthMismatch {
                expected: xs.len(),
                actual: ys.len(),
            })
        }
        Target::Hard(ys) => {
            if let Some(&y) = ys.iter().find(|&&y| y >= k) {
                return Err(Error::Shape(format!("label {y} out of range for {k} classes")));
            }
        }
        Target::Soft(ys) if ys.len() != xs.len() => {
            return Err(Error::LengthMismatch {
                expected: xs.len(),
                actual: ys.len(),
            })
        }
        Target::Soft(ys) => {
            if let Some(y) = ys.iter().find(|y| y.len() != k) {
                return Err(Error::LengthMismatch {
                    expected: k,
                    actual: y.len(),
                });
            }
        }
        Target::Entropy => {}
    }

    let mut grads = GradientBundle::zeros_like(params);
    let mut total = 0.0;
    let t = params.temperature;
    let n_layers = params.extractor.len();
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    let mut pres: Vec<Vec<f64>> = Vec::with_capacity(n_layers);

    for (i, x) in xs.iter().enumerate() {
        check_input(x, params)?;
        inputs.clear();
        pres.clear();
        let mut h = x.to_vec();
        for layer in &params.extractor {
            let mut pre = layer.weights.matvec(&h);
            for (v, b) in pre.iter_mut().zip(&layer.bias) {
                *v += b;
            }
            let out = pre.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut h, out));
            pres.push(pre);
        }
        let f = h;
        let (f_hat, norm, degenerate) = normalize(&f);
        let p = coremath::softmax(&logits(&f_hat, params))?;

        let mut g_logits = vec![0.0; k];
        match target {
            Target::Hard(ys) => {
                let y = ys[i];
                total -= p[y].max(LOG_FLOOR).ln();
                g_logits.copy_from_slice(&p);
                g_logits[y] -= 1.0;
            }
            Target::Soft(ys) => {
                let y = &ys[i];
                total += coremath::cross_entropy(&p, y)?;
                let mass: f64 = y.iter().sum();
                for c in 0..k {
                    g_logits[c] = p[c] * mass - y[c];
                }
            }
            Target::Entropy => {
                let h = coremath::entropy(&p);
                total += h;
                for c in 0..k {
                    g_logits[c] = -p[c] * (p[c].max(LOG_FLOOR).ln() + h);
                }
            }
        }
        // logits = W f̂ / T
        let g_z: Vec<f64> = g_logits.iter().map(|g| g / t).collect();
        grads.classifier.add_outer(1.0, &g_z, &f_hat);
        let g_fhat = params.classifier.matvec_t(&g_z);
        let mut g = if degenerate {
            g_fhat
        } else {
            let proj = coremath::dot(&f_hat, &g_fhat);
            g_fhat
                .iter()
                .zip(&f_hat)
                .map(|(gv, fv)| (gv - fv * proj) / norm)
                .collect()
        };
        for (l, layer) in params.extractor.iter().enumerate().rev() {
            for (gv, &pre) in g.iter_mut().zip(&pres[l]) {
                *gv *= layer.activation.derivative(pre);
            }
            let lg = &mut grads.extractor[l];
            lg.weights.add_outer(1.0, &g, &inputs[l]);
            axpy(&mut lg.bias, 1.0, &g);
            if l > 0 {
                g = layer.weights.matvec_t(&g);
            }
        }
    }
    let inv = 1.0 / xs.len() as f64;
    grads.scale(ParamGroup::All, inv);
    Ok((total * inv, grads))
}

/// Mean loss only, no gradient.
pub fn batch_loss(xs: &[&[f64]], target: Target<'_>, params: &NetworkParams) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut total = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let p = predict(x, params)?;
        total += match target {
            Target::Hard(ys) => -p[ys[i]].max(LOG_FLOOR).ln(),
            Target::Soft(ys) => coremath::cross_entropy(&p, &ys[i])?,
            Target::Entropy => coremath::entropy(&p),
        };
    }
    Ok(total / xs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdHyper {
    fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// `v ← μv + g + wd·θ; θ ← θ − lr·v`, with one velocity per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub velocity: GradientBundle,
}

impl Sgd {
    pub fn new(params: &NetworkParams) -> Self {
        Sgd {
            velocity: GradientBundle::zeros_like(params),
        }
    }

    pub fn step(
        &mut self,
        params: &mut NetworkParams,
        grads: &GradientBundle,
        hyper: SgdHyper,
        group: ParamGroup,
    ) -> Result<()> {
        hyper.validate()?;
        grads.check_params(params)?;
        self.velocity.check_params(params)?;
        let SgdHyper {
            lr,
            momentum,
            weight_decay,
        } = hyper;
        let update = |theta: &mut [f64], v: &mut [f64], g: &[f64]| {
            for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + g + weight_decay * *t;
                *t -= lr * *v;
            }
        };
        if group.has_extractor() {
            for ((layer, vel), g) in params
                .extractor
                .iter_mut()
                .zip(&mut self.velocity.extractor)
                .zip(&grads.extractor)
            {
                update(
                    layer.weights.as_mut_slice(),
                    vel.weights.as_mut_slice(),
                    g.weights.as_slice(),
                );
                update(&mut layer.bias, &mut vel.bias, &g.bias);
            }
        }
        if group.has_classifier() {
            update(
                params.classifier.as_mut_slice(),
                self.velocity.classifier.as_mut_slice(),
                grads.classifier.as_slice(),
            );
        }
        Ok(())
    }
}

/// Functional form of a single SGD step.
pub fn sgd_step(
    params: &NetworkParams,
    grads: &GradientBundle,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    optimizer: &mut Sgd,
) -> Result<NetworkParams> {
    let mut next = params.clone();
    optimizer.step(
        &mut next,
        grads,
        SgdHyper {
            lr,
            momentum,
            weight_decay,
        },
        ParamGroup::All,
    )?;
    Ok(next)
}

pub const ANNEAL_ALPHA: f64 = 10.0;
pub const ANNEAL_BETA: f64 = 0.75;

/// `base_lr / (1 + 10·progress)^0.75`; progress is clamped to `[0, 1]`.
pub fn anneal_lr(base_lr: f64, progress: f64) -> f64 {
    let p = if (0.0..=1.0).contains(&progress) {
        progress
    } else {
        log::warn!("annealing progress {progress} outside [0,1], clamping");
        progress.clamp(0.0, 1.0)
    };
    base_lr / (1.0 + ANNEAL_ALPHA * p).powf(ANNEAL_BETA)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus optimizer and RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: NetworkParams,
    pub optimizer: Option<Sgd>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn new(params: NetworkParams) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params,
            optimizer: None,
            rng: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = crate::read_json(path)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        ckpt.params.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coremath::{finite_diff_grad, seeded_rng};

    fn small_arch() -> Architecture {
        Architecture {
            input_dim: 3,
            hidden: vec![6, 5],
            feature_dim: 4,
            num_classes: 3,
            temperature: 0.5,
            feature_activation: Activation::Identity,
            classifier_init_scale: 0.5,
        }
    }

    fn random_batch(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed).substream("batch");
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut p = NetworkParams::init(&small_arch(), &mut seeded_rng(1).substream("init")).unwrap();
        let zeros = vec![0.0; p.flatten().len()];
        p.set_flat(&zeros).unwrap();
        assert_eq!(forward_features(&[1.0, -2.0, 3.0], &p).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p = NetworkParams {
            extractor: vec![DenseLayer {
                weights: Matrix::identity(3),
                bias: vec![0.0; 3],
                activation: Activation::Identity,
            }],
            classifier: Matrix::zeros(2, 3),
            temperature: 1.0,
        };
        let x = [0.25, -1.5, 3.0];
        assert_eq!(forward_features(&x, &p).unwrap(), x.to_vec());
        assert!(forward_features(&[1.0], &p).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = NetworkParams::init(&Architecture::default(), &mut seeded_rng(9).substream("init")).unwrap();
        let b = NetworkParams::init(&Architecture::default(), &mut seeded_rng(9).substream("init")).unwrap();
        let x = [0.3, -0.7];
        let fa = forward_features(&x, &a).unwrap();
        let fb = forward_features(&x, &b).unwrap();
        assert_eq!(
            fa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            fb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn identical_rows_give_uniform_output() {
        let mut p = NetworkParams::init(&small_arch(), &mut seeded_rng(2).substream("init")).unwrap();
        p.classifier = Matrix::from_vec(3, 4, [0.3, -0.1, 0.7, 0.2].repeat(3)).unwrap();
        let out = forward_classifier(&[1.0, 2.0, -3.0, 0.5], &p).unwrap();
        for v in out.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_is_scale_invariant() {
        let p = NetworkParams::init(&small_arch(), &mut seeded_rng(3).substream("init")).unwrap();
        let f = [0.4, -1.2, 0.9, 2.0];
        let f10: Vec<f64> = f.iter().map(|v| v * 10.0).collect();
        let a = forward_classifier(&f, &p).unwrap();
        let b = forward_classifier(&f10, &p).unwrap();
        assert_eq!(a.argmax(), b.argmax());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn lower_temperature_sharpens() {
        let mut p = NetworkParams::init(&small_arch(), &mut seeded_rng(4).substream("init")).unwrap();
        let f = [0.4, -1.2, 0.9, 2.0];
        let before = forward_classifier(&f, &p).unwrap();
        p.temperature /= 2.0;
        let after = forward_classifier(&f, &p).unwrap();
        let max = |v: &ProbVec| v.iter().copied().fold(0.0, f64::max);
        assert!(max(&after) > max(&before));
    }

    #[test]
    fn degenerate_feature_is_counted() {
        let p = NetworkParams::init(&small_arch(), &mut seeded_rng(5).substream("init")).unwrap();
        let before = degenerate_feature_events();
        let out = forward_classifier(&[0.0; 4], &p).unwrap();
        assert!(degenerate_feature_events() > before);
        assert!(coremath::check_simplex(&out).is_ok());
    }

    fn check_gradients(target: Target<'_>, xs: &[Vec<f64>], params: &NetworkParams) -> f64 {
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (loss, grads) = backward(&refs, target, params).unwrap();
        assert!((loss - batch_loss(&refs, target, params).unwrap()).abs() < 1e-12);
        let flat = params.flatten();
        let num = finite_diff_grad(
            |theta| {
                let mut q = params.clone();
                q.set_flat(theta).unwrap();
                batch_loss(&refs, target, &q).unwrap()
            },
            &flat,
            1e-5,
        );
        let analytic = grads.flatten();
        assert_eq!(analytic.len(), num.len());
        let scale = analytic.iter().map(|v| v.abs()).fold(0.0, f64::max);
        analytic
            .iter()
            .zip(&num)
            .map(|(a, n)| (a - n).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let params = NetworkParams::init(&small_arch(), &mut seeded_rng(11).substream("init")).unwrap();
        let xs = random_batch(12, 6, 3);
        let hard = [0, 1, 2, 2, 1, 0];
        let soft: Vec<ProbVec> = (0..6)
            .map(|i| coremath::softmax(&[i as f64 * 0.3, -0.5, 0.2]).unwrap())
            .collect();
        for target in [Target::Hard(&hard), Target::Soft(&soft), Target::Entropy] {
            let err = check_gradients(target, &xs, &params);
            assert!(err < 1e-4, "{target:?}: {err}");
        }
    }

    #[test]
    fn entropy_feeds_both_groups() {
        let params = NetworkParams::init(&small_arch(), &mut seeded_rng(13).substream("init")).unwrap();
        let xs = random_batch(14, 4, 3);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (_, g) = backward(&refs, Target::Entropy, &params).unwrap();
        assert!(g.extractor_flat().iter().any(|v| *v != 0.0));
        assert!(g.classifier_flat().iter().any(|v| *v != 0.0));
        assert_eq!(
            g.extractor_flat().len() + g.classifier_flat().len(),
            params.flatten().len()
        );
    }

    #[test]
    fn duplicating_batch_keeps_mean() {
        let params = NetworkParams::init(&small_arch(), &mut seeded_rng(15).substream("init")).unwrap();
        let xs = random_batch(16, 5, 3);
        let ys = [0, 1, 2, 0, 1];
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let doubled: Vec<&[f64]> = refs.iter().chain(refs.iter()).copied().collect();
        let ys2: Vec<usize> = ys.iter().chain(ys.iter()).copied().collect();
        let (l1, g1) = backward(&refs, Target::Hard(&ys), &params).unwrap();
        let (l2, g2) = backward(&doubled, Target::Hard(&ys2), &params).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(backward(&[], Target::Entropy, &params), Err(Error::Empty(_))));
    }

    #[test]
    fn init_loss_is_near_log_k() {
        let arch = Architecture::default();
        let params = NetworkParams::init(&arch, &mut seeded_rng(0).substream("init")).unwrap();
        let xs = random_batch(17, 200, 2);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let ys: Vec<usize> = (0..200).map(|i| i % 5).collect();
        let loss = batch_loss(&refs, Target::Hard(&ys), &params).unwrap();
        let lnk = 5f64.ln();
        assert!((loss - lnk).abs() < 0.1 * lnk, "loss {loss}");
    }

    #[test]
    fn sgd_examples() {
        let params = NetworkParams::init(&small_arch(), &mut seeded_rng(18).substream("init")).unwrap();
        let zero = GradientBundle::zeros_like(&params);
        let mut opt = Sgd::new(&params);
        assert_eq!(sgd_step(&params, &zero, 0.1, 0.9, 0.0, &mut opt).unwrap(), params);

        let xs = random_batch(19, 3, 3);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (_, g) = backward(&refs, Target::Entropy, &params).unwrap();
        let mut opt = Sgd::new(&params);
        let next = sgd_step(&params, &g, 0.05, 0.0, 0.0, &mut opt).unwrap();
        for ((a, b), gv) in next.flatten().iter().zip(params.flatten()).zip(g.flatten()) {
            assert_eq!(*a, b - 0.05 * gv);
        }

        let mut opt = Sgd::new(&params);
        let one = sgd_step(&params, &g, 0.05, 0.9, 0.0, &mut opt).unwrap();
        let two = sgd_step(&one, &g, 0.05, 0.9, 0.0, &mut opt).unwrap();
        for ((a, b), gv) in two.flatten().iter().zip(params.flatten()).zip(g.flatten()) {
            assert!((b - a - 0.05 * gv * 2.9).abs() < 1e-12);
        }
        assert!(sgd_step(&params, &g, 0.0, 0.0, 0.0, &mut opt).is_err());
    }

    #[test]
    fn sgd_rejects_mismatched_shapes() {
        let a = NetworkParams::init(&small_arch(), &mut seeded_rng(20).substream("init")).unwrap();
        let b = NetworkParams::init(&Architecture::default(), &mut seeded_rng(20).substream("init")).unwrap();
        let mut opt = Sgd::new(&a);
        assert!(sgd_step(&a, &GradientBundle::zeros_like(&b), 0.1, 0.0, 0.0, &mut opt).is_err());
    }

    #[test]
    fn annealing_schedule() {
        assert_eq!(anneal_lr(0.01, 0.0), 0.01);
        let end = anneal_lr(1.0, 1.0);
        assert!((end - 11f64.powf(-0.75)).abs() < 1e-12);
        assert!((end - 0.16556).abs() < 1e-5);
        let grid: Vec<f64> = (0..100).map(|i| anneal_lr(0.1, i as f64 / 99.0)).collect();
        assert!(grid.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(anneal_lr(0.1, 2.0), anneal_lr(0.1, 1.0));
        assert_eq!(anneal_lr(0.1, -1.0), 0.1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut rng = seeded_rng(21).substream("init");
        let params = NetworkParams::init(&Architecture::default(), &mut rng).unwrap();
        let mut ckpt = Checkpoint::new(params.clone());
        let mut opt = Sgd::new(&params);
        opt.velocity.classifier.as_mut_slice()[3] = 0.1 + 0.2;
        ckpt.optimizer = Some(opt);
        ckpt.rng = Some(RngState::capture(&rng));
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let bits = |p: &NetworkParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&params));
    }
}
