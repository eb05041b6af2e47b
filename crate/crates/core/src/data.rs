//! Datasets: the synthetic content-and-style transfer pair, target splits,
//! IDX and CSV ingestion, and standardization.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seeds;

/// Inputs (one sample per row) with integer labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!("{} inputs for {} labels", inputs.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Validation(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(LabeledSet { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: select_rows(&self.inputs, idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

pub fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Parameters of the synthetic pair with every random stream seeded explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub style_strength: f64,
    /// Scale of the class means around the origin.
    pub mean_scale: f64,
    pub source_content_seed: u64,
    pub target_content_seed: u64,
    pub style_seed: u64,
    pub source_noise_seed: u64,
    pub target_noise_seed: u64,
}

impl SyntheticSpec {
    /// Streams derived from one seed; source and target content differ.
    pub fn from_seed(seed: u64, dim: usize, classes: usize, n_source: usize, n_target: usize, style_strength: f64) -> Self {
        SyntheticSpec {
            dim,
            classes,
            n_source,
            n_target,
            style_strength,
            mean_scale: 3.0,
            source_content_seed: seeds::derive(seed, "source_content", 0),
            target_content_seed: seeds::derive(seed, "target_content", 0),
            style_seed: seeds::derive(seed, "style", 0),
            source_noise_seed: seeds::derive(seed, "source_noise", 0),
            target_noise_seed: seeds::derive(seed, "target_noise", 0),
        }
    }
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).expect("sized")
}

/// Haar-ish random orthogonal matrix by Gram–Schmidt on a Gaussian matrix.
pub fn random_rotation<R: Rng>(rng: &mut R, n: usize) -> Matrix {
    let g = normal_matrix(rng, n, n);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = g.row(i).to_vec();
        // Two passes keep the basis orthogonal to rounding.
        for _ in 0..2 {
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        q.push(v);
    }
    Matrix::from_rows(&q).expect("square")
}

fn blobs(means: &Matrix, n: usize, noise_seed: u64) -> LabeledSet {
    let (k, d) = means.shape();
    let mut rng = seeds::rng(noise_seed, "blob_noise", 0);
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let mut inputs = normal_matrix(&mut rng, n, d);
    for (r, &y) in labels.iter().enumerate() {
        inputs.row_mut(r).iter_mut().zip(means.row(y)).for_each(|(x, m)| *x += m);
    }
    LabeledSet { inputs, labels, classes: k }
}

fn class_means(seed: u64, classes: usize, dim: usize, scale: f64) -> Matrix {
    normal_matrix(&mut seeds::rng(seed, "class_means", 0), classes, dim).scale(scale)
}

/// Source: `K` Gaussian blobs with unit noise. Target: `K` freshly drawn
/// blobs mapped through one random rotation followed by per-coordinate
/// scaling `s_j = style^{u_j}`, `u_j ~ U[−1, 1]`.
pub fn make_synthetic_transfer_pair_with(spec: &SyntheticSpec) -> Result<(LabeledSet, LabeledSet)> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(Error::Validation(format!("need K >= 2 and D >= 2, got K={} D={}", spec.classes, spec.dim)));
    }
    if !(spec.style_strength > 0.0) {
        return Err(Error::Validation("style_strength must be positive".into()));
    }
    let source = blobs(&class_means(spec.source_content_seed, spec.classes, spec.dim, spec.mean_scale), spec.n_source, spec.source_noise_seed);
    let raw = blobs(&class_means(spec.target_content_seed, spec.classes, spec.dim, spec.mean_scale), spec.n_target, spec.target_noise_seed);
    let mut style_rng = seeds::rng(spec.style_seed, "style", 0);
    let rotation = random_rotation(&mut style_rng, spec.dim);
    let scales: Vec<f64> = (0..spec.dim).map(|_| spec.style_strength.powf(style_rng.random_range(-1.0..=1.0))).collect();
    let mut styled = raw.inputs.matmul(&rotation.transpose());
    for r in 0..styled.rows() {
        styled.row_mut(r).iter_mut().zip(&scales).for_each(|(x, s)| *x *= s);
    }
    Ok((source, LabeledSet { inputs: styled, ..raw }))
}

pub fn make_synthetic_transfer_pair(
    seed: u64,
    dim: usize,
    classes: usize,
    n_source: usize,
    n_target: usize,
    style_strength: f64,
) -> Result<(LabeledSet, LabeledSet)> {
    make_synthetic_transfer_pair_with(&SyntheticSpec::from_seed(seed, dim, classes, n_source, n_target, style_strength))
}

/// Target pool split into disjoint labeled, unlabeled and test parts.
#[derive(Clone, Debug)]
pub struct TargetSplit {
    pub labeled: LabeledSet,
    /// Inputs only; labels are discarded.
    pub unlabeled: Matrix,
    pub test: LabeledSet,
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// False when stratification fell back to a random draw.
    pub stratified: bool,
}

/// Draws the test part first, then a class-stratified labeled subset; the
/// rest becomes unlabeled.
pub fn split_target(pool: &LabeledSet, n_labeled: usize, n_test: usize, seed: u64) -> Result<TargetSplit> {
    if n_labeled + n_test > pool.len() {
        return Err(Error::Validation(format!("{n_labeled} labeled + {n_test} test exceeds pool of {}", pool.len())));
    }
    let mut rng = seeds::rng(seed, "split", 0);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let test_idx = order[..n_test].to_vec();
    let rest = &order[n_test..];

    let k = pool.classes;
    let mut stratified = n_labeled >= k;
    let mut labeled_idx = Vec::with_capacity(n_labeled);
    if stratified {
        let mut quota: Vec<usize> = (0..k).map(|c| n_labeled / k + usize::from(c < n_labeled % k)).collect();
        for &i in rest {
            let y = pool.labels[i];
            if quota[y] > 0 {
                quota[y] -= 1;
                labeled_idx.push(i);
            }
        }
        if labeled_idx.len() < n_labeled {
            log::warn!("target pool lacks samples for an even class split; filling the labeled part at random");
            stratified = false;
            let taken: std::collections::HashSet<usize> = labeled_idx.iter().copied().collect();
            labeled_idx.extend(rest.iter().copied().filter(|i| !taken.contains(i)).take(n_labeled - labeled_idx.len()));
        }
    } else {
        log::warn!("{n_labeled} labeled samples cannot cover {k} classes; drawing them at random");
        labeled_idx.extend_from_slice(&rest[..n_labeled]);
    }
    let taken: std::collections::HashSet<usize> = labeled_idx.iter().copied().collect();
    let unlabeled_idx: Vec<usize> = rest.iter().copied().filter(|i| !taken.contains(i)).collect();
    Ok(TargetSplit {
        labeled: pool.subset(&labeled_idx),
        unlabeled: select_rows(&pool.inputs, &unlabeled_idx),
        test: pool.subset(&test_idx),
        labeled_idx,
        unlabeled_idx,
        test_idx,
        stratified,
    })
}

/// Per-column affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Columns with (near) zero spread keep their scale.
    pub fn fit(m: &Matrix) -> Result<Self> {
        if m.rows() < 2 {
            return Err(Error::Validation("standardization needs at least 2 samples".into()));
        }
        let n = m.rows() as f64;
        let mean: Vec<f64> = (0..m.cols()).map(|j| (0..m.rows()).map(|r| m[(r, j)]).sum::<f64>() / n).collect();
        let std = (0..m.cols())
            .map(|j| {
                let s = ((0..m.rows()).map(|r| (m[(r, j)] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

// ----- IDX -----

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

/// Unsigned-byte IDX tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl IdxTensor {
    pub fn new(dims: Vec<usize>, bytes: Vec<u8>) -> Result<Self> {
        if dims.len() != 1 && dims.len() != 3 {
            return Err(Error::Validation(format!("IDX rank {} unsupported (1 or 3)", dims.len())));
        }
        if dims.iter().product::<usize>() != bytes.len() {
            return Err(Error::Shape(format!("dims {dims:?} do not match {} bytes", bytes.len())));
        }
        Ok(IdxTensor { dims, bytes })
    }

    /// Values rescaled to `[0, 1]`.
    pub fn values(&self) -> Vec<f64> {
        self.bytes.iter().map(|&b| b as f64 / 255.0).collect()
    }

    /// Raw bytes as class indices (label files).
    pub fn labels(&self) -> Vec<usize> {
        self.bytes.iter().map(|&b| b as usize).collect()
    }

    /// Rank-3 tensor as one flattened sample per row.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let n = self.dims[0];
        let d = self.bytes.len().checked_div(n).unwrap_or(0);
        Matrix::from_vec(n, d, self.values())
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Idx { offset: bytes.len(), message: format!("truncated header: expected {what}") })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    let magic = be_u32(bytes, 0, "magic number")?;
    let rank = match magic {
        IDX_IMAGES => 3,
        IDX_LABELS => 1,
        other => return Err(Error::Idx { offset: 0, message: format!("bad magic 0x{other:08x}") }),
    };
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, &format!("dimension {i}")).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Idx {
        offset: 4,
        message: "dimension product overflows".into(),
    })?;
    let payload = &bytes[start..];
    if payload.len() < len {
        return Err(Error::Idx {
            offset: bytes.len(),
            message: format!("truncated payload: expected {len} bytes after offset {start}, found {}", payload.len()),
        });
    }
    if payload.len() > len {
        return Err(Error::Idx { offset: start + len, message: format!("{} trailing bytes", payload.len() - len) });
    }
    IdxTensor::new(dims, payload.to_vec())
}

pub fn write_idx(t: &IdxTensor) -> Vec<u8> {
    let magic = if t.dims.len() == 3 { IDX_IMAGES } else { IDX_LABELS };
    let mut out = Vec::with_capacity(4 + 4 * t.dims.len() + t.bytes.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&t.bytes);
    out
}

/// Images from an IDX image file joined with labels from an IDX label file.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<LabeledSet> {
    let img = parse_idx(&std::fs::read(images)?)?;
    let lab = parse_idx(&std::fs::read(labels)?)?;
    if img.dims.len() != 3 || lab.dims.len() != 1 {
        return Err(Error::Validation("expected an image file and a label file".into()));
    }
    let labels = lab.labels();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    LabeledSet::new(img.to_matrix()?, labels, classes)
}

// ----- CSV -----

/// Numeric CSV with a header row; `label_column` names the integer label.
pub fn load_csv_dataset(path: &Path, label_column: &str) -> Result<LabeledSet> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let label_pos = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Csv(format!("missing label column `{label_column}`")))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(format!("row {}: {e}", line + 1)))?;
        for (j, cell) in rec.iter().enumerate() {
            if j == label_pos {
                let y: usize = cell
                    .trim()
                    .parse()
                    .map_err(|_| Error::Csv(format!("row {}: label `{cell}` is not a nonnegative integer", line + 1)))?;
                labels.push(y);
            } else {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| Error::Csv(format!("row {}, column `{}`: `{cell}` is not numeric", line + 1, &headers[j])))?;
                data.push(v);
            }
        }
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let d = headers.len() - 1;
    LabeledSet::new(Matrix::from_vec(labels.len(), d, data)?, labels, classes)
}

/// Writes `x0..x{D-1}` feature columns followed by `label`.
pub fn write_csv_dataset(set: &LabeledSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let mut header: Vec<String> = (0..set.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for r in 0..set.len() {
        let mut row: Vec<String> = set.inputs.row(r).iter().map(|v| format!("{v:?}")).collect();
        row.push(set.labels[r].to_string());
        w.write_record(&row).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
