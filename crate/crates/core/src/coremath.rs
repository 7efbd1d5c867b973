//! Dense arithmetic, probability-vector primitives, a central-difference
//! gradient oracle and named deterministic random streams.
//!
//! Everything here is `f64` and pure.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Tolerance on the sum of a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A probability distribution over `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_simplex(&values)?;
        Ok(ProbVec(values))
    }

    pub fn uniform(k: usize) -> Self {
        ProbVec(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        ProbVec(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl std::ops::Deref for ProbVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Validates entries in `[0, 1]` summing to one within [`SIMPLEX_TOL`].
pub fn check_simplex(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidProbVec("no entries".into()));
    }
    if let Some((i, v)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(Error::InvalidProbVec(format!("entry {i} = {v}")));
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidProbVec(format!("sums to {sum}")));
    }
    Ok(())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<ProbVec> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(ProbVec(out))
}

/// `-sum_k y_k log p_k`, with `p_k` floored at [`LOG_FLOOR`].
pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: y.len(),
        });
    }
    Ok(-p
        .iter()
        .zip(y)
        .map(|(&pk, &yk)| yk * pk.max(LOG_FLOOR).ln())
        .sum::<f64>())
}

/// Shannon entropy in nats, logs floored like [`cross_entropy`].
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&pk| pk * pk.max(LOG_FLOOR).ln()).sum::<f64>()
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

/// Central-difference gradient `(f(θ+εe_i) − f(θ−εe_i)) / 2ε`.
pub fn finite_diff_grad<F>(f: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · g`
    pub fn matvec_t(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += gr * w;
            }
        }
        out
    }

    /// `self += scale · a bᵀ`
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += s * bc;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Root of a family of named random streams.
///
/// Each substream is keyed by `(seed, name)` alone, so the order in which
/// modules draw never perturbs one another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStream {
    seed: u64,
}

pub fn seeded_rng(seed: u64) -> SeedStream {
    SeedStream { seed }
}

impl SeedStream {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(b"ssda-lab/substream/v1");
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(digest)
    }
}

/// Exact, serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Malformed {
            path: "<rng state>".into(),
            reason: what.to_string(),
        };
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("bad word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(p[0], 2.0 / 3.0, 1e-12) && close(p[1], 1.0 / 3.0, 1e-12));
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(close(p[0], 1.0, 1e-12) && close(p[1], 0.0, 1e-12));
        assert!(matches!(softmax(&[]), Err(Error::EmptyLogits)));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(close(
            cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            2f64.ln(),
            1e-12
        ));
        assert_eq!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        let expect = -0.5 * (0.25f64.ln() + 0.75f64.ln());
        let got = cross_entropy(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
        assert!(close(got, expect, 1e-12));
        assert!(close(got, 0.836988, 1e-6));
        assert!(cross_entropy(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        assert!(close(entropy(&[0.5, 0.5]), 2f64.ln(), 1e-12));
        let h5 = entropy(ProbVec::uniform(5).as_slice());
        assert!(close(h5, 5f64.ln(), 1e-12));
        assert!(close(h5, 1.609438, 1e-6));
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(l1_distance(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 3.0);
        assert_eq!(l1_distance(&[-1.0, 1.0], &[1.0, -1.0]).unwrap(), 4.0);
        assert!(l1_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|t| t.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5);
        assert!(close(g[0], 2.0, 1e-6) && close(g[1], 4.0, 1e-6));
        let g = finite_diff_grad(|_| 3.5, &[0.3, -1.0, 7.0], 1e-5);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_matches_softmax_ce_gradient() {
        let mut rng = seeded_rng(7).substream("test");
        for _ in 0..5 {
            let theta: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y = ProbVec::one_hot(6, rng.random_range(0..6));
            let num = finite_diff_grad(|t| cross_entropy(&softmax(t).unwrap(), &y).unwrap(), &theta, 1e-5);
            let p = softmax(&theta).unwrap();
            for k in 0..6 {
                let analytic = p[k] - y[k];
                let rel = (num[k] - analytic).abs() / analytic.abs().max(1e-8);
                assert!(rel < 1e-6 || (num[k] - analytic).abs() < 1e-10, "k={k} rel={rel}");
            }
        }
    }

    #[test]
    fn seeded_streams() {
        let draws = |seed: u64, name: &str| -> Vec<u64> {
            let mut r = seeded_rng(seed).substream(name);
            (0..100).map(|_| r.random()).collect()
        };
        assert_eq!(draws(42, "data"), draws(42, "data"));
        assert_ne!(draws(42, "data"), draws(43, "data"));

        let root = seeded_rng(42);
        let mut init = root.substream("init");
        let _: Vec<u64> = (0..50).map(|_| init.random()).collect();
        let mut data = root.substream("data");
        let after: Vec<u64> = (0..100).map(|_| data.random()).collect();
        assert_eq!(after, draws(42, "data"));
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = seeded_rng(3).substream("batch");
        for _ in 0..37 {
            let _: u32 = rng.random();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        let a: Vec<u64> = (0..20).map(|_| rng.random()).collect();
        let b: Vec<u64> = (0..20).map(|_| restored.random()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn matrix_ops() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        let mut z = Matrix::zeros(2, 2);
        z.add_outer(2.0, &[1.0, 0.5], &[3.0, -1.0]);
        assert_eq!(z.as_slice(), &[6.0, -2.0, 3.0, -1.0]);
        assert!(Matrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in prop::collection::vec(-1e6f64..1e6, 1..12)) {
            let p = softmax(&logits).unwrap();
            prop_assert!(check_simplex(&p).is_ok());
        }

        #[test]
        fn softmax_preserves_unique_argmax(logits in prop::collection::vec(-50f64..50.0, 2..10)) {
            let top = argmax(&logits);
            let unique = logits.iter().enumerate().all(|(i, &v)| i == top || v < logits[top]);
            prop_assume!(unique);
            prop_assert_eq!(softmax(&logits).unwrap().argmax(), top);
        }

        #[test]
        fn self_cross_entropy_is_entropy(logits in prop::collection::vec(-20f64..20.0, 1..10)) {
            let p = softmax(&logits).unwrap();
            let ce = cross_entropy(&p, &p).unwrap();
            prop_assert!((ce - entropy(&p)).abs() <= 1e-9);
            prop_assert!(entropy(&p) >= -1e-15);
            prop_assert!(entropy(&p) <= (p.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn l1_triangle_and_symmetry(
            a in prop::collection::vec(-100f64..100.0, 4),
            b in prop::collection::vec(-100f64..100.0, 4),
            c in prop::collection::vec(-100f64..100.0, 4),
        ) {
            let ab = l1_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, l1_distance(&b, &a).unwrap());
            prop_assert!(ab <= l1_distance(&a, &c).unwrap() + l1_distance(&c, &b).unwrap() + 1e-9);
        }

        #[test]
        fn entropy_gradient_matches_finite_differences(logits in prop::collection::vec(-4f64..4.0, 2..7)) {
            let num = finite_diff_grad(|z| entropy(&softmax(z).unwrap()), &logits, 1e-5);
            let p = softmax(&logits).unwrap();
            let h = entropy(&p);
            for (j, &n) in num.iter().enumerate() {
                let analytic = -p[j] * (p[j].ln() + h);
                let err = (n - analytic).abs();
                prop_assert!(err <= 1e-4 * analytic.abs().max(1e-3), "j={} err={}", j, err);
            }
        }
    }
}
