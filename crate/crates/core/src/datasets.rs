//! Synthetic domain-shift benchmarks and the semi-supervised split protocol.
//!
//! Each class is an isotropic Gaussian blob whose mean sits on a circle in
//! the first two input dimensions. The target domain draws from the same
//! blobs and pushes every point through an affine shift (scale, rotation,
//! translation), optionally with skewed class proportions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coremath::seeded_rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// An unlabeled target sample. Its class is kept apart in [`HiddenLabels`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledSample {
    pub x: Vec<f64>,
}

/// Ground truth for the unlabeled target set, indexed like it.
///
/// Only evaluation and reporting code should call [`HiddenLabels::reveal`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        HiddenLabels(labels)
    }

    pub fn reveal(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub rotation_degrees: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    /// Exponential class-proportion skew in the target; 0 keeps classes balanced.
    pub label_skew: f64,
}

impl DomainShift {
    pub fn identity(input_dim: usize) -> Self {
        DomainShift {
            rotation_degrees: 0.0,
            translation: vec![0.0; input_dim],
            scale: 1.0,
            label_skew: 0.0,
        }
    }

    /// Applies `scale · R · x + translation`, rotating in the first two dims.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| v * self.scale).collect();
        if out.len() >= 2 && self.rotation_degrees != 0.0 {
            let (s, c) = self.rotation_degrees.to_radians().sin_cos();
            let (a, b) = (out[0], out[1]);
            out[0] = c * a - s * b;
            out[1] = s * a + c * b;
        }
        for (o, t) in out.iter_mut().zip(&self.translation) {
            *o += t;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPairSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub class_separation: f64,
    pub noise_std: f64,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for DomainPairSpec {
    /// The "synth-shift" benchmark.
    fn default() -> Self {
        DomainPairSpec {
            num_classes: 5,
            input_dim: 2,
            n_source: 500,
            n_target: 500,
            class_separation: 4.0,
            noise_std: 1.0,
            shift: DomainShift {
                rotation_degrees: 30.0,
                translation: vec![1.0, 1.0],
                scale: 1.0,
                label_skew: 0.0,
            },
            seed: 0,
        }
    }
}

impl DomainPairSpec {
    pub fn synth_shift(seed: u64) -> Self {
        DomainPairSpec {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_classes < 2 {
            errs.push(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.input_dim == 0 {
            errs.push("input_dim must be >= 1".to_string());
        }
        if self.n_source < self.num_classes {
            errs.push(format!("n_source {} is below the class count", self.n_source));
        }
        if self.n_target < self.num_classes {
            errs.push(format!("n_target {} is below the class count", self.n_target));
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            errs.push("class_separation must be finite and non-negative".to_string());
        }
        if !(self.noise_std.is_finite() && self.noise_std > 0.0) {
            errs.push("noise_std must be positive".to_string());
        }
        if self.shift.rotation_degrees != 0.0 && self.input_dim < 2 {
            errs.push("rotation needs input_dim >= 2".to_string());
        }
        if !self.shift.rotation_degrees.is_finite() {
            errs.push("rotation must be finite".to_string());
        }
        if self.shift.translation.len() != self.input_dim {
            errs.push(format!(
                "translation has {} components, input_dim is {}",
                self.shift.translation.len(),
                self.input_dim
            ));
        }
        if !(self.shift.scale.is_finite() && self.shift.scale > 0.0) {
            errs.push("scale must be positive".to_string());
        }
        if !(self.shift.label_skew.is_finite() && self.shift.label_skew >= 0.0) {
            errs.push("label_skew must be non-negative".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(errs))
        }
    }

    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let angle = std::f64::consts::TAU * class as f64 / self.num_classes as f64;
        let mut m = vec![0.0; self.input_dim];
        m[0] = self.class_separation * angle.cos();
        if self.input_dim >= 2 {
            m[1] = self.class_separation * angle.sin();
        }
        m
    }
}

/// Splits `total` into integer counts proportional to `weights`
/// (largest remainder, lowest index first on ties).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

fn draw_blob<R: Rng + ?Sized>(spec: &DomainPairSpec, class: usize, rng: &mut R) -> Vec<f64> {
    spec.class_mean(class)
        .into_iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            m + spec.noise_std * z
        })
        .collect()
}

/// Source and target pools, each shuffled, with ground-truth labels.
pub fn gen_domain_pair(spec: &DomainPairSpec) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    spec.validate()?;
    let k = spec.num_classes;
    let mut rng = seeded_rng(spec.seed).substream("data");

    let mut source = Vec::with_capacity(spec.n_source);
    for (class, n) in apportion(spec.n_source, &vec![1.0; k]).into_iter().enumerate() {
        for _ in 0..n {
            source.push(LabeledSample {
                x: draw_blob(spec, class, &mut rng),
                y: class,
            });
        }
    }
    source.shuffle(&mut rng);

    let weights: Vec<f64> = (0..k)
        .map(|c| (-spec.shift.label_skew * c as f64 / (k - 1) as f64).exp())
        .collect();
    let mut target = Vec::with_capacity(spec.n_target);
    for (class, n) in apportion(spec.n_target, &weights).into_iter().enumerate() {
        for _ in 0..n {
            let x = draw_blob(spec, class, &mut rng);
            target.push(LabeledSample {
                x: spec.shift.apply(&x),
                y: class,
            });
        }
    }
    target.shuffle(&mut rng);
    Ok((source, target))
}

/// The target side of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSplit {
    pub labeled_target: Vec<LabeledSample>,
    pub unlabeled_target: Vec<UnlabeledSample>,
    pub validation_target: Vec<LabeledSample>,
    pub truth: HiddenLabels,
    /// Pool index of every unlabeled sample, in order.
    pub unlabeled_pool_index: Vec<usize>,
}

/// Stratified draw of `n_t_per_class` labeled anchors and `n_val_per_class`
/// validation samples per class; everything else becomes unlabeled.
pub fn split_target(
    pool: &[LabeledSample],
    num_classes: usize,
    n_t_per_class: usize,
    n_val_per_class: usize,
    seed: u64,
) -> Result<TargetSplit> {
    if n_t_per_class == 0 {
        return Err(Error::Config("n_t_per_class must be >= 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, s) in pool.iter().enumerate() {
        if s.y >= num_classes {
            return Err(Error::Shape(format!("label {} out of range", s.y)));
        }
        by_class[s.y].push(i);
    }
    let required = n_t_per_class + n_val_per_class + 1;
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() < required {
            return Err(Error::InsufficientClass {
                class,
                available: idx.len(),
                required,
            });
        }
    }
    let mut rng = seeded_rng(seed).substream("split");
    let mut is_reserved = vec![false; pool.len()];
    let mut labeled_target = Vec::new();
    let mut validation_target = Vec::new();
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        for &i in &idx[..n_t_per_class] {
            labeled_target.push(pool[i].clone());
            is_reserved[i] = true;
        }
        for &i in &idx[n_t_per_class..n_t_per_class + n_val_per_class] {
            validation_target.push(pool[i].clone());
            is_reserved[i] = true;
        }
    }
    let unlabeled_pool_index: Vec<usize> = (0..pool.len()).filter(|&i| !is_reserved[i]).collect();
    let unlabeled_target = unlabeled_pool_index
        .iter()
        .map(|&i| UnlabeledSample { x: pool[i].x.clone() })
        .collect();
    let truth = HiddenLabels(unlabeled_pool_index.iter().map(|&i| pool[i].y).collect());
    Ok(TargetSplit {
        labeled_target,
        unlabeled_target,
        validation_target,
        truth,
        unlabeled_pool_index,
    })
}

/// `D_s`, `D_t`, `D_u` and a held-out validation set.
#[derive(Debug, Clone, PartialEq)]
pub struct SsdaSplit {
    pub spec: DomainPairSpec,
    pub source: Vec<LabeledSample>,
    pub labeled_target: Vec<LabeledSample>,
    pub unlabeled_target: Vec<UnlabeledSample>,
    pub validation_target: Vec<LabeledSample>,
    pub n_t_per_class: usize,
    pub n_val_per_class: usize,
    truth: HiddenLabels,
}

pub const DEFAULT_VAL_PER_CLASS: usize = 3;

impl SsdaSplit {
    /// Generates the domain pair and splits the target pool with the same seed.
    pub fn generate(spec: &DomainPairSpec, n_t_per_class: usize, n_val_per_class: usize) -> Result<Self> {
        let (source, pool) = gen_domain_pair(spec)?;
        let t = split_target(&pool, spec.num_classes, n_t_per_class, n_val_per_class, spec.seed)?;
        Ok(SsdaSplit {
            spec: spec.clone(),
            source,
            labeled_target: t.labeled_target,
            unlabeled_target: t.unlabeled_target,
            validation_target: t.validation_target,
            n_t_per_class,
            n_val_per_class,
            truth: t.truth,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Ground truth of `unlabeled_target`; evaluation only.
    pub fn hidden_truth(&self) -> &HiddenLabels {
        &self.truth
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        let mut t_counts = vec![0usize; k];
        for s in &self.labeled_target {
            *t_counts
                .get_mut(s.y)
                .ok_or_else(|| Error::Shape("label out of range".into()))? += 1;
        }
        let mut v_counts = vec![0usize; k];
        for s in &self.validation_target {
            *v_counts
                .get_mut(s.y)
                .ok_or_else(|| Error::Shape("label out of range".into()))? += 1;
        }
        let mut s_counts = vec![0usize; k];
        for s in &self.source {
            *s_counts
                .get_mut(s.y)
                .ok_or_else(|| Error::Shape("label out of range".into()))? += 1;
        }
        for c in 0..k {
            if t_counts[c] != self.n_t_per_class {
                return Err(Error::Shape(format!(
                    "class {c} has {} labeled targets, expected {}",
                    t_counts[c], self.n_t_per_class
                )));
            }
            if v_counts[c] != self.n_val_per_class {
                return Err(Error::Shape(format!("class {c} validation count is {}", v_counts[c])));
            }
            if s_counts[c] == 0 {
                return Err(Error::Shape(format!("class {c} missing from source")));
            }
        }
        if self.truth.len() != self.unlabeled_target.len() || self.truth.0.iter().any(|&y| y >= k) {
            return Err(Error::Shape("hidden labels do not match unlabeled set".into()));
        }
        Ok(())
    }
}

pub const SPLIT_FORMAT_VERSION: u32 = 1;

pub const SPLIT_TABLES: [&str; 5] = [
    "source.csv",
    "labeled_target.csv",
    "unlabeled_target.csv",
    "validation_target.csv",
    "unlabeled_truth.csv",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub source: usize,
    pub labeled_target: usize,
    pub unlabeled_target: usize,
    pub validation_target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableChecksum {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format_version: u32,
    pub spec: DomainPairSpec,
    pub seed: u64,
    pub n_t_per_class: usize,
    pub n_val_per_class: usize,
    pub counts: SplitCounts,
    pub tables: Vec<TableChecksum>,
    /// SHA-256 over the per-table digests, in table order.
    pub checksum: String,
}

impl SplitManifest {
    /// Reads `manifest.json` from a split directory without loading the tables.
    pub fn load(dir: &Path) -> Result<Self> {
        crate::read_json(&dir.join("manifest.json"))
    }
}

fn header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    h.push("label".to_string());
    h
}

fn table_bytes<'a>(dim: usize, rows: impl Iterator<Item = (&'a [f64], i64)>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(dim))?;
    for (x, label) in rows {
        let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        rec.push(label.to_string());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

fn labeled_bytes(dim: usize, samples: &[LabeledSample]) -> Result<Vec<u8>> {
    table_bytes(dim, samples.iter().map(|s| (s.x.as_slice(), s.y as i64)))
}

fn truth_bytes(truth: &HiddenLabels) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "label"])?;
    for (i, y) in truth.0.iter().enumerate() {
        w.write_record([i.to_string(), y.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

/// Lowercase hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn combined_checksum(tables: &[TableChecksum]) -> String {
    let mut h = Sha256::new();
    for t in tables {
        h.update(t.file.as_bytes());
        h.update(b":");
        h.update(t.sha256.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl SsdaSplit {
    fn encode_tables(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let dim = self.input_dim();
        Ok(vec![
            (SPLIT_TABLES[0], labeled_bytes(dim, &self.source)?),
            (SPLIT_TABLES[1], labeled_bytes(dim, &self.labeled_target)?),
            (
                SPLIT_TABLES[2],
                table_bytes(dim, self.unlabeled_target.iter().map(|s| (s.x.as_slice(), -1)))?,
            ),
            (SPLIT_TABLES[3], labeled_bytes(dim, &self.validation_target)?),
            (SPLIT_TABLES[4], truth_bytes(&self.truth)?),
        ])
    }

    /// Manifest for the split as it would be written to disk.
    pub fn manifest(&self) -> Result<SplitManifest> {
        let tables: Vec<TableChecksum> = self
            .encode_tables()?
            .iter()
            .map(|(name, bytes)| TableChecksum {
                file: name.to_string(),
                sha256: sha256_hex(bytes),
            })
            .collect();
        Ok(SplitManifest {
            format_version: SPLIT_FORMAT_VERSION,
            spec: self.spec.clone(),
            seed: self.spec.seed,
            n_t_per_class: self.n_t_per_class,
            n_val_per_class: self.n_val_per_class,
            counts: SplitCounts {
                source: self.source.len(),
                labeled_target: self.labeled_target.len(),
                unlabeled_target: self.unlabeled_target.len(),
                validation_target: self.validation_target.len(),
            },
            checksum: combined_checksum(&tables),
            tables,
        })
    }

    /// Writes `manifest.json` plus one CSV per subset into `dir`.
    /// Refuses to overwrite an existing split.
    pub fn save(&self, dir: &Path) -> Result<SplitManifest> {
        let manifest_path = dir.join("manifest.json");
        if manifest_path.exists() {
            return Err(Error::Config(format!(
                "{} already holds a split; refusing to overwrite",
                dir.display()
            )));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tables = self.encode_tables()?;
        let mut sums = Vec::new();
        for (name, bytes) in &tables {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            sums.push(TableChecksum {
                file: name.to_string(),
                sha256: sha256_hex(bytes),
            });
        }
        let manifest = self.manifest()?;
        debug_assert_eq!(manifest.tables, sums);
        crate::write_json(&manifest_path, &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: SplitManifest = crate::read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != SPLIT_FORMAT_VERSION {
            return Err(Error::Version {
                found: manifest.format_version,
                expected: SPLIT_FORMAT_VERSION,
            });
        }
        if combined_checksum(&manifest.tables) != manifest.checksum {
            return Err(Error::Checksum {
                path: dir.join("manifest.json"),
                expected: manifest.checksum.clone(),
                actual: combined_checksum(&manifest.tables),
            });
        }
        let mut blobs = Vec::new();
        for name in SPLIT_TABLES {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let entry = manifest
                .tables
                .iter()
                .find(|t| t.file == name)
                .ok_or_else(|| Error::Malformed {
                    path: dir.join("manifest.json"),
                    reason: format!("no checksum for {name}"),
                })?;
            let actual = sha256_hex(&bytes);
            if actual != entry.sha256 {
                return Err(Error::Checksum {
                    path,
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
            blobs.push((path, bytes));
        }
        let dim = manifest.spec.input_dim;
        let source = parse_labeled(&blobs[0].0, &blobs[0].1, dim)?;
        let labeled_target = parse_labeled(&blobs[1].0, &blobs[1].1, dim)?;
        let unlabeled_target = parse_rows(&blobs[2].0, &blobs[2].1, dim)?
            .into_iter()
            .map(|(x, label)| {
                if label != -1 {
                    return Err(Error::Malformed {
                        path: blobs[2].0.clone(),
                        reason: "unlabeled table must carry the -1 label sentinel".into(),
                    });
                }
                Ok(UnlabeledSample { x })
            })
            .collect::<Result<Vec<_>>>()?;
        let validation_target = parse_labeled(&blobs[3].0, &blobs[3].1, dim)?;
        let truth = parse_truth(&blobs[4].0, &blobs[4].1)?;
        let split = SsdaSplit {
            spec: manifest.spec.clone(),
            source,
            labeled_target,
            unlabeled_target,
            validation_target,
            n_t_per_class: manifest.n_t_per_class,
            n_val_per_class: manifest.n_val_per_class,
            truth,
        };
        split.validate().map_err(|e| Error::Malformed {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(split)
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_rows(path: &Path, bytes: &[u8], dim: usize) -> Result<Vec<(Vec<f64>, i64)>> {
    let mut r = csv::Reader::from_reader(bytes);
    let expected = header(dim);
    let h = r.headers()?.clone();
    if h.iter().ne(expected.iter().map(String::as_str)) {
        return Err(malformed(path, format!("unexpected header {h:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut x = Vec::with_capacity(dim);
        for field in rec.iter().take(dim) {
            x.push(field.parse::<f64>().map_err(|e| malformed(path, e.to_string()))?);
        }
        let label = rec
            .get(dim)
            .ok_or_else(|| malformed(path, "missing label"))?
            .parse::<i64>()
            .map_err(|e| malformed(path, e.to_string()))?;
        out.push((x, label));
    }
    Ok(out)
}

fn parse_labeled(path: &Path, bytes: &[u8], dim: usize) -> Result<Vec<LabeledSample>> {
    parse_rows(path, bytes, dim)?
        .into_iter()
        .map(|(x, label)| {
            let y = usize::try_from(label).map_err(|_| malformed(path, "negative label"))?;
            Ok(LabeledSample { x, y })
        })
        .collect()
}

fn parse_truth(path: &Path, bytes: &[u8]) -> Result<HiddenLabels> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let idx: usize = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(path, "bad index"))?;
        if idx != i {
            return Err(malformed(path, format!("row {i} has index {idx}")));
        }
        labels.push(
            rec.get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| malformed(path, "bad label"))?,
        );
    }
    Ok(HiddenLabels(labels))
}

/// Reads only `unlabeled_truth.csv` from a split directory (or a standalone file).
pub fn load_truth(path: &Path) -> Result<HiddenLabels> {
    let file: PathBuf = if path.is_dir() {
        path.join("unlabeled_truth.csv")
    } else {
        path.to_path_buf()
    };
    let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
    parse_truth(&file, &bytes)
}
