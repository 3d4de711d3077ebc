//! Datasets: synthetic domain-shift generators, IDX ingestion and CSV I/O.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{MecaError, Result};
use crate::linalg::DenseMatrix;
use crate::network::{check_one_hot, label_indices, LabeledBatch, UnlabeledBatch};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples stored feature-major (`d₀ × n`), with optional one-hot labels
/// (`n × K`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: DenseMatrix,
    labels: Option<DenseMatrix>,
    pub domain_tag: String,
}

impl Dataset {
    pub fn new(
        inputs: DenseMatrix,
        labels: Option<DenseMatrix>,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.rows() != inputs.cols() {
                return Err(MecaError::BadShape(format!(
                    "{} samples but {} label rows",
                    inputs.cols(),
                    l.rows()
                )));
            }
            check_one_hot(l)?;
        }
        Ok(Self {
            inputs,
            labels,
            domain_tag: domain_tag.into(),
        })
    }

    /// Builds one-hot labels from class indices.
    pub fn from_class_indices(
        inputs: DenseMatrix,
        classes: &[usize],
        num_classes: usize,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        let labels = one_hot(classes, num_classes)?;
        Self::new(inputs, Some(labels), domain_tag)
    }

    pub fn inputs(&self) -> &DenseMatrix {
        &self.inputs
    }

    pub fn labels(&self) -> Option<&DenseMatrix> {
        self.labels.as_ref()
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.rows()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(DenseMatrix::cols)
    }

    pub fn class_indices(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(label_indices)
    }

    /// The same samples with the labels dropped.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            inputs: self.inputs.clone(),
            labels: None,
            domain_tag: self.domain_tag.clone(),
        }
    }

    /// Pads or checks the label width so it equals `k`.
    pub fn with_num_classes(mut self, k: usize) -> Result<Dataset> {
        if let Some(classes) = self.class_indices() {
            self.labels = Some(one_hot(&classes, k)?);
        }
        Ok(self)
    }

    /// Samples at the given column indices, in order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_cols(idx),
            labels: self.labels.as_ref().map(|l| l.select_rows(idx)),
            domain_tag: self.domain_tag.clone(),
        }
    }

    pub fn labeled_batch(&self) -> Result<LabeledBatch> {
        let labels = self.labels.clone().ok_or_else(|| {
            MecaError::BadShape(format!("dataset {:?} has no labels", self.domain_tag))
        })?;
        LabeledBatch::new(self.inputs.clone(), labels)
    }

    pub fn unlabeled_batch(&self) -> Result<UnlabeledBatch> {
        UnlabeledBatch::new(self.inputs.clone())
    }
}

/// `n × k` one-hot matrix from class indices.
pub fn one_hot(classes: &[usize], k: usize) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(classes.len(), k);
    for (i, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(MecaError::BadShape(format!(
                "class {c} out of range for {k} classes"
            )));
        }
        m.set(i, c, 1.0);
    }
    Ok(m)
}

/// Gaussian blobs with class means on a circle of radius 4 in the first two
/// coordinates and unit isotropic noise.
pub fn gen_blobs(k_classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if k_classes < 2 {
        return Err(MecaError::BadParams(format!(
            "need at least 2 classes, got {k_classes}"
        )));
    }
    if dim < 2 {
        return Err(MecaError::BadParams(format!("need dim >= 2, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = k_classes * per_class;
    let mut inputs = DenseMatrix::zeros(dim, n);
    let mut classes = Vec::with_capacity(n);
    for c in 0..k_classes {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / k_classes as f64;
        let (mx, my) = (4.0 * angle.cos(), 4.0 * angle.sin());
        for i in 0..per_class {
            let j = c * per_class + i;
            for r in 0..dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let mean = match r {
                    0 => mx,
                    1 => my,
                    _ => 0.0,
                };
                inputs.set(r, j, mean + noise);
            }
            classes.push(c);
        }
    }
    Dataset::from_class_indices(inputs, &classes, k_classes, "blobs")
}

/// Two interleaved half circles in the plane with Gaussian noise.
pub fn gen_moons(per_class: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(MecaError::BadParams(format!("noise sigma {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = Uniform::new_inclusive(0.0, std::f64::consts::PI)
        .map_err(|e| MecaError::BadParams(e.to_string()))?;
    let n = 2 * per_class;
    let mut inputs = DenseMatrix::zeros(2, n);
    let mut classes = Vec::with_capacity(n);
    for c in 0..2 {
        for i in 0..per_class {
            let t: f64 = angle.sample(&mut rng);
            let (x, y) = if c == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            let j = c * per_class + i;
            inputs.set(0, j, x + noise_sigma * nx);
            inputs.set(1, j, y + noise_sigma * ny);
            classes.push(c);
        }
    }
    Dataset::from_class_indices(inputs, &classes, 2, "moons")
}

/// A synthetic domain shift `x ↦ scale·R(θ)·x + t + N(0, σ²)`, with the
/// rotation acting on the first two coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    pub rotation_deg: f64,
    /// Padded with zeros up to the data dimension.
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_sigma: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translation: Vec::new(),
            scale: 1.0,
            noise_sigma: 0.0,
        }
    }
}

pub fn apply_shift(ds: &Dataset, shift: &ShiftSpec, seed: u64) -> Result<Dataset> {
    if !(shift.scale > 0.0 && shift.scale.is_finite()) {
        return Err(MecaError::BadParams(format!(
            "scale {} must be positive",
            shift.scale
        )));
    }
    if !(shift.noise_sigma >= 0.0 && shift.noise_sigma.is_finite()) {
        return Err(MecaError::BadParams(format!(
            "noise sigma {} must be non-negative",
            shift.noise_sigma
        )));
    }
    let dim = ds.dim();
    if shift.translation.len() > dim {
        return Err(MecaError::BadParams(format!(
            "translation of length {} for {dim}-dimensional data",
            shift.translation.len()
        )));
    }
    if shift.rotation_deg != 0.0 && dim < 2 {
        return Err(MecaError::BadParams("rotation needs dim >= 2".into()));
    }
    let mut x = ds.inputs.clone();
    let n = x.cols();
    if shift.rotation_deg != 0.0 {
        let (s, c) = shift.rotation_deg.to_radians().sin_cos();
        for j in 0..n {
            let (a, b) = (x.get(0, j), x.get(1, j));
            x.set(0, j, c * a - s * b);
            x.set(1, j, s * a + c * b);
        }
    }
    if shift.scale != 1.0 {
        x = x.scale(shift.scale);
    }
    for (r, &t) in shift.translation.iter().enumerate() {
        if t != 0.0 {
            for v in x.row_mut(r) {
                *v += t;
            }
        }
    }
    if shift.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in x.as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += shift.noise_sigma * z;
        }
    }
    Ok(Dataset {
        inputs: x,
        labels: ds.labels.clone(),
        domain_tag: ds.domain_tag.clone(),
    })
}

/// Samples per class in the rotated-blobs benchmark.
pub const BENCHMARK_PER_CLASS: usize = 150;
pub const BENCHMARK_CLASSES: usize = 4;
pub const BENCHMARK_DIM: usize = 16;

/// The shift applied to the target domain of the rotated-blobs benchmark.
pub fn benchmark_shift() -> ShiftSpec {
    ShiftSpec {
        rotation_deg: 30.0,
        translation: vec![1.0, -1.0],
        scale: 1.3,
        noise_sigma: 0.2,
    }
}

/// Rotated-blobs source/target pair: 4 classes in 16 dimensions, the target
/// drawn independently and then shifted by [`benchmark_shift`]. Target labels
/// are kept for evaluation only.
pub fn rotated_blobs(seed: u64) -> Result<(Dataset, Dataset)> {
    let mut source = gen_blobs(BENCHMARK_CLASSES, BENCHMARK_PER_CLASS, BENCHMARK_DIM, seed)?;
    source.domain_tag = "source".into();
    let fresh = gen_blobs(
        BENCHMARK_CLASSES,
        BENCHMARK_PER_CLASS,
        BENCHMARK_DIM,
        seed.wrapping_add(1_000_003),
    )?;
    let mut target = apply_shift(&fresh, &benchmark_shift(), seed.wrapping_add(2_000_003))?;
    target.domain_tag = "target".into();
    Ok((source, target))
}

/// Two-moons source/target pair; the target is rotated by 30° about the
/// origin.
pub fn rotated_moons(seed: u64) -> Result<(Dataset, Dataset)> {
    let mut source = gen_moons(200, 0.1, seed)?;
    source.domain_tag = "source".into();
    let fresh = gen_moons(200, 0.1, seed.wrapping_add(1_000_003))?;
    let shift = ShiftSpec {
        rotation_deg: 30.0,
        ..ShiftSpec::identity()
    };
    let mut target = apply_shift(&fresh, &shift, seed.wrapping_add(2_000_003))?;
    target.domain_tag = "target".into();
    Ok((source, target))
}

fn read_u32_be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn truncated(path: &Path, expected: usize, found: usize) -> MecaError {
    MecaError::TruncatedFile {
        path: path.to_path_buf(),
        expected,
        found,
    }
}

/// Parses an IDX rank-3 `u8` image file into `(rows·cols) × n` pixel
/// values scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<DenseMatrix> {
    if bytes.len() < 16 {
        return Err(truncated(path, 16, bytes.len()));
    }
    let magic = read_u32_be(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(MecaError::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = read_u32_be(bytes, 4) as usize;
    let rows = read_u32_be(bytes, 8) as usize;
    let cols = read_u32_be(bytes, 12) as usize;
    let pixels = rows * cols;
    let expected = 16 + n * pixels;
    if bytes.len() < expected {
        return Err(truncated(path, expected, bytes.len()));
    }
    if bytes.len() > expected {
        return Err(MecaError::ParseError {
            line: 0,
            msg: format!(
                "{} trailing bytes after IDX payload",
                bytes.len() - expected
            ),
        });
    }
    let payload = &bytes[16..];
    let mut inputs = DenseMatrix::zeros(pixels, n);
    for j in 0..n {
        for p in 0..pixels {
            inputs.set(p, j, payload[j * pixels + p] as f64 / 255.0);
        }
    }
    Ok(inputs)
}

/// Parses an IDX rank-1 `u8` label file into class indices.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    if bytes.len() < 8 {
        return Err(truncated(path, 8, bytes.len()));
    }
    let magic = read_u32_be(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(MecaError::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = read_u32_be(bytes, 4) as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(truncated(path, expected, bytes.len()));
    }
    if bytes.len() > expected {
        return Err(MecaError::ParseError {
            line: 0,
            msg: format!(
                "{} trailing bytes after IDX payload",
                bytes.len() - expected
            ),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Reads MNIST-style IDX files. Labels, when given, are one-hot encoded with
/// `K = max label + 1`.
pub fn read_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let inputs = parse_idx_images(&fs::read(images_path)?, images_path)?;
    let labels = match labels_path {
        None => None,
        Some(p) => {
            let classes = parse_idx_labels(&fs::read(p)?, p)?;
            if classes.len() != inputs.cols() {
                return Err(MecaError::CountMismatch {
                    images: inputs.cols(),
                    labels: classes.len(),
                });
            }
            let k = classes.iter().max().map_or(0, |m| m + 1);
            Some(one_hot(&classes, k)?)
        }
    };
    Dataset::new(inputs, labels, "idx")
}

/// Shortest decimal form that reads back to the same bits (17 significant
/// digits).
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes one row per sample: `f0,…,f{d−1},label` with label `−1` when the
/// dataset is unlabeled.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let d = ds.dim();
    let header: Vec<String> = (0..d)
        .map(|i| format!("f{i}"))
        .chain(["label".into()])
        .collect();
    writeln!(w, "{}", header.join(","))?;
    let classes = ds.class_indices();
    let mut line = String::new();
    for j in 0..ds.len() {
        line.clear();
        for r in 0..d {
            line.push_str(&format_f64(ds.inputs.get(r, j)));
            line.push(',');
        }
        match &classes {
            Some(c) => line.push_str(&c[j].to_string()),
            None => line.push_str("-1"),
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_csv`]. Labels are all present or all `−1`; with
/// labels, `K = max label + 1`.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(MecaError::ParseError {
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    let names: Vec<&str> = header.trim_end().split(',').collect();
    let d = names.len().saturating_sub(1);
    let header_ok = names.last() == Some(&"label")
        && names[..d]
            .iter()
            .enumerate()
            .all(|(i, n)| *n == format!("f{i}"));
    if !header_ok {
        return Err(MecaError::ParseError {
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(MecaError::ParseError {
                line: lineno,
                msg: format!("{} fields, expected {}", fields.len(), d + 1),
            });
        }
        let row = fields[..d]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| MecaError::ParseError {
                        line: lineno,
                        msg: format!("bad value {f:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = fields[d]
            .trim()
            .parse::<i64>()
            .ok()
            .filter(|&l| l >= -1)
            .ok_or_else(|| MecaError::ParseError {
                line: lineno,
                msg: format!("bad label {:?}", fields[d]),
            })?;
        values.push(row);
        labels.push(label);
    }
    let n = values.len();
    let mut inputs = DenseMatrix::zeros(d, n);
    for (j, row) in values.iter().enumerate() {
        for (r, &v) in row.iter().enumerate() {
            inputs.set(r, j, v);
        }
    }
    let unlabeled = labels.iter().all(|&l| l == -1);
    let labels = if unlabeled {
        None
    } else {
        if let Some(pos) = labels.iter().position(|&l| l < 0) {
            return Err(MecaError::ParseError {
                line: pos + 2,
                msg: "missing label in a labeled file".into(),
            });
        }
        let classes: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let k = classes.iter().max().map_or(0, |m| m + 1);
        Some(one_hot(&classes, k)?)
    };
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(inputs, labels, tag)
}
