//! Exact information measures on finite distributions, and brute-force
//! evaluation of the two cross-entropy decompositions over a joint table
//! `p(x, y, w)` and a classifier table `f(y | x, w)`.
//!
//! All quantities are in nats. `0·log 0` is taken as `0`.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Tolerance used to check that probability tables are normalized.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// A probability table over an arbitrary number of finite axes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTable {
    shape: Vec<usize>,
    p: Vec<f64>,
}

impl ProbTable {
    pub fn new(shape: Vec<usize>, p: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Validation(format!("zero-sized axis in shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if p.len() != len {
            return Err(Error::Shape(format!("{} probabilities for shape {shape:?}", p.len())));
        }
        check_pmf(&p)?;
        Ok(ProbTable { shape, p })
    }

    pub fn from_matrix<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let ncols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut p = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            if r.as_ref().len() != ncols {
                return Err(Error::Shape("ragged joint table".into()));
            }
            p.extend_from_slice(r.as_ref());
        }
        ProbTable::new(vec![rows.len(), ncols], p)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    /// Marginal over the listed axes, kept in the listed order.
    pub fn marginal(&self, keep: &[usize]) -> ProbTable {
        let shape: Vec<usize> = keep.iter().map(|&a| self.shape[a]).collect();
        let mut out = vec![0.0; shape.iter().product()];
        let mut idx = vec![0usize; self.shape.len()];
        for &v in &self.p {
            let mut flat = 0;
            for &a in keep {
                flat = flat * self.shape[a] + idx[a];
            }
            out[flat] += v;
            increment(&mut idx, &self.shape);
        }
        ProbTable { shape, p: out }
    }

    pub fn entropy(&self) -> f64 {
        entropy_unchecked(&self.p)
    }
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for a in (0..shape.len()).rev() {
        idx[a] += 1;
        if idx[a] < shape[a] {
            return;
        }
        idx[a] = 0;
    }
}

fn check_pmf(p: &[f64]) -> Result<()> {
    if let Some(bad) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!("probability entry {bad} is not a finite nonnegative number")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL * (p.len() as f64).max(1.0) {
        return Err(Error::Validation(format!("probabilities sum to {total}, expected 1")));
    }
    Ok(())
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx(v)).sum::<f64>()
}

/// Shannon entropy `−Σ p log p` of a probability vector.
pub fn entropy(pmf: &[f64]) -> Result<f64> {
    check_pmf(pmf)?;
    Ok(entropy_unchecked(pmf).max(0.0))
}

fn two_axis(joint: &ProbTable) -> Result<(usize, usize)> {
    match joint.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::Shape(format!("expected a 2-D joint table, got shape {s:?}"))),
    }
}

/// `Σ p(x,y) log(p(x,y) / (p(x)p(y)))`.
pub fn mutual_information(joint: &ProbTable) -> Result<f64> {
    let (nx, ny) = two_axis(joint)?;
    let px = joint.marginal(&[0]);
    let py = joint.marginal(&[1]);
    let mut mi = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            let pxy = joint.p[i * ny + j];
            if pxy > 0.0 {
                mi += pxy * (pxy / (px.p[i] * py.p[j])).ln();
            }
        }
    }
    Ok(mi)
}

/// `Σ p(x)p(y) log(p(x)p(y) / p(x,y))`.
///
/// Returns `f64::INFINITY` when a joint cell is zero while the product of
/// its marginals is positive.
pub fn lautum_information(joint: &ProbTable) -> Result<f64> {
    let (nx, ny) = two_axis(joint)?;
    let px = joint.marginal(&[0]);
    let py = joint.marginal(&[1]);
    let mut l = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            let prod = px.p[i] * py.p[j];
            if prod == 0.0 {
                continue;
            }
            let pxy = joint.p[i * ny + j];
            if pxy == 0.0 {
                return Ok(f64::INFINITY);
            }
            l += prod * (prod / pxy).ln();
        }
    }
    Ok(l)
}

/// `H(A | B) = H(A, B) − H(B)` where `B` are `condition_axes` and `A` all
/// remaining axes.
pub fn conditional_entropy(joint: &ProbTable, condition_axes: &[usize]) -> Result<f64> {
    if let Some(&a) = condition_axes.iter().find(|&&a| a >= joint.shape().len()) {
        return Err(Error::Validation(format!("axis {a} out of range for shape {:?}", joint.shape())));
    }
    let h_all = joint.entropy();
    let h_cond = if condition_axes.is_empty() { 0.0 } else { joint.marginal(condition_axes).entropy() };
    Ok((h_all - h_cond).max(0.0))
}

/// Joint table `p(x, y, w)` indexed `(x, y, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    table: ProbTable,
}

impl DiscreteJoint {
    pub fn new(nx: usize, ny: usize, nw: usize, p: Vec<f64>) -> Result<Self> {
        Ok(DiscreteJoint { table: ProbTable::new(vec![nx, ny, nw], p)? })
    }

    /// Joint with `w` independent of `(x, y)`: `p(x,y,w) = p(x,y) p(w)`.
    pub fn independent(pxy: &ProbTable, pw: &[f64]) -> Result<Self> {
        let (nx, ny) = two_axis(pxy)?;
        check_pmf(pw)?;
        let mut p = Vec::with_capacity(nx * ny * pw.len());
        for &a in pxy.probs() {
            for &b in pw {
                p.push(a * b);
            }
        }
        DiscreteJoint::new(nx, ny, pw.len(), p)
    }

    /// Strictly positive random joint: normalized i.i.d. uniform(0.05, 1) cells.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, nx: usize, ny: usize, nw: usize) -> Self {
        let raw: Vec<f64> = (0..nx * ny * nw).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p = raw.into_iter().map(|v| v / total).collect();
        DiscreteJoint { table: ProbTable { shape: vec![nx, ny, nw], p } }
    }

    pub fn nx(&self) -> usize {
        self.table.shape[0]
    }

    pub fn ny(&self) -> usize {
        self.table.shape[1]
    }

    pub fn nw(&self) -> usize {
        self.table.shape[2]
    }

    pub fn table(&self) -> &ProbTable {
        &self.table
    }

    pub fn p(&self, x: usize, y: usize, w: usize) -> f64 {
        self.table.p[(x * self.ny() + y) * self.nw() + w]
    }

    pub fn p_xy(&self) -> ProbTable {
        self.table.marginal(&[0, 1])
    }

    pub fn p_xw(&self) -> ProbTable {
        self.table.marginal(&[0, 2])
    }

    pub fn p_wx(&self) -> ProbTable {
        self.table.marginal(&[2, 0])
    }

    pub fn p_x(&self) -> Vec<f64> {
        self.table.marginal(&[0]).p
    }

    pub fn p_y(&self) -> Vec<f64> {
        self.table.marginal(&[1]).p
    }

    pub fn p_w(&self) -> Vec<f64> {
        self.table.marginal(&[2]).p
    }

    /// The classifier `f(y|x,w) = p(y|x,w)`, clamped at `1e-12` and renormalized.
    pub fn bayes_classifier(&self) -> DiscreteClassifier {
        let (nx, ny, nw) = (self.nx(), self.ny(), self.nw());
        let mut f = vec![0.0; nx * ny * nw];
        for x in 0..nx {
            for w in 0..nw {
                let pxw: f64 = (0..ny).map(|y| self.p(x, y, w)).sum();
                for y in 0..ny {
                    f[(x * ny + y) * nw + w] = if pxw > 0.0 { self.p(x, y, w) / pxw } else { 1.0 / ny as f64 };
                }
            }
        }
        DiscreteClassifier::clamped(nx, ny, nw, f)
    }
}

/// Conditional table `f(y | x, w)` indexed `(x, y, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteClassifier {
    nx: usize,
    ny: usize,
    nw: usize,
    f: Vec<f64>,
}

impl DiscreteClassifier {
    pub const CLAMP_FLOOR: f64 = 1e-12;

    pub fn new(nx: usize, ny: usize, nw: usize, f: Vec<f64>) -> Result<Self> {
        if f.len() != nx * ny * nw {
            return Err(Error::Shape(format!("{} entries for a {nx}x{ny}x{nw} classifier", f.len())));
        }
        if let Some(v) = f.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::Validation(format!("classifier entry {v} outside (0, 1]")));
        }
        for x in 0..nx {
            for w in 0..nw {
                let s: f64 = (0..ny).map(|y| f[(x * ny + y) * nw + w]).sum();
                if (s - 1.0).abs() > NORMALIZATION_TOL * ny as f64 {
                    return Err(Error::Validation(format!("f(.|x={x}, w={w}) sums to {s}")));
                }
            }
        }
        Ok(DiscreteClassifier { nx, ny, nw, f })
    }

    fn clamped(nx: usize, ny: usize, nw: usize, mut f: Vec<f64>) -> Self {
        for x in 0..nx {
            for w in 0..nw {
                let mut s = 0.0;
                for y in 0..ny {
                    let v = &mut f[(x * ny + y) * nw + w];
                    *v = v.max(Self::CLAMP_FLOOR);
                    s += *v;
                }
                for y in 0..ny {
                    f[(x * ny + y) * nw + w] /= s;
                }
            }
        }
        DiscreteClassifier { nx, ny, nw, f }
    }

    /// Uniform prediction over the labels.
    pub fn uniform(nx: usize, ny: usize, nw: usize) -> Self {
        DiscreteClassifier { nx, ny, nw, f: vec![1.0 / ny as f64; nx * ny * nw] }
    }

    /// Random strictly positive conditional, clamped at [`Self::CLAMP_FLOOR`].
    pub fn random<R: Rng + ?Sized>(rng: &mut R, nx: usize, ny: usize, nw: usize) -> Self {
        let f = (0..nx * ny * nw).map(|_| rng.random_range(0.0..1.0)).collect();
        Self::clamped(nx, ny, nw, f)
    }

    pub fn f(&self, x: usize, y: usize, w: usize) -> f64 {
        self.f[(x * self.ny + y) * self.nw + w]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nw)
    }
}

fn check_dims(j: &DiscreteJoint, f: &DiscreteClassifier) -> Result<()> {
    if (j.nx(), j.ny(), j.nw()) != f.dims() {
        return Err(Error::Shape(format!(
            "joint is {}x{}x{} but classifier is {:?}",
            j.nx(),
            j.ny(),
            j.nw(),
            f.dims()
        )));
    }
    Ok(())
}

/// Test cross-entropy with `(x, y)` and `w` averaged separately:
/// `−Σ p(x,y) p(w) log f(y|x,w)`.
pub fn expected_ce_factored(j: &DiscreteJoint, f: &DiscreteClassifier) -> Result<f64> {
    check_dims(j, f)?;
    let pxy = j.p_xy();
    let pw = j.p_w();
    let (nx, ny, nw) = f.dims();
    let mut ce = 0.0;
    for x in 0..nx {
        for y in 0..ny {
            let a = pxy.p[x * ny + y];
            if a == 0.0 {
                continue;
            }
            for (w, &b) in pw.iter().enumerate().take(nw) {
                ce -= a * b * f.f(x, y, w).ln();
            }
        }
    }
    Ok(ce)
}

/// Test cross-entropy under the joint: `−Σ p(x,y,w) log f(y|x,w)`.
pub fn expected_ce_joint(j: &DiscreteJoint, f: &DiscreteClassifier) -> Result<f64> {
    check_dims(j, f)?;
    let (nx, ny, nw) = f.dims();
    let mut ce = 0.0;
    for x in 0..nx {
        for y in 0..ny {
            for w in 0..nw {
                let p = j.p(x, y, w);
                if p > 0.0 {
                    ce -= p * f.f(x, y, w).ln();
                }
            }
        }
    }
    Ok(ce)
}

/// Terms of the Lautum decomposition of the factored test cross-entropy.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Theorem1Terms {
    /// `E_w KL(p(x,y) || f(x,y|w))` with `f(x,y|w) = f(y|x,w) p(x|w)`.
    pub classifier_mismatch: f64,
    /// `H(y|x)`.
    pub bayes_error: f64,
    /// `L(w; x)`.
    pub lautum_wx: f64,
    /// [`expected_ce_factored`].
    pub lhs: f64,
    /// `lhs − (mismatch + H(y|x) − L(w;x))`.
    pub residual: f64,
}

pub fn theorem1_terms(j: &DiscreteJoint, f: &DiscreteClassifier) -> Result<Theorem1Terms> {
    let lhs = expected_ce_factored(j, f)?;
    let (nx, ny, nw) = f.dims();
    let pxy = j.p_xy();
    let pxw = j.p_xw();
    let pw = j.p_w();

    let mut mismatch = 0.0;
    'outer: for (w, &pw_w) in pw.iter().enumerate() {
        if pw_w == 0.0 {
            continue;
        }
        for x in 0..nx {
            let p_x_given_w = pxw.p[x * nw + w] / pw_w;
            for y in 0..ny {
                let p = pxy.p[x * ny + y];
                if p == 0.0 {
                    continue;
                }
                let model = f.f(x, y, w) * p_x_given_w;
                if model == 0.0 {
                    mismatch = f64::INFINITY;
                    break 'outer;
                }
                mismatch += pw[w] * p * (p / model).ln();
            }
        }
    }
    let bayes_error = conditional_entropy(&pxy, &[0])?;
    let lautum_wx = lautum_information(&j.p_wx())?;
    let residual = lhs - (mismatch + bayes_error - lautum_wx);
    Ok(Theorem1Terms { classifier_mismatch: mismatch, bayes_error, lautum_wx, lhs, residual })
}

/// Terms of the mutual-information decomposition of the joint test cross-entropy.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Theorem2Terms {
    /// `E_{x,w} KL(p(y|x,w) || f(y|x,w))`.
    pub kl_term: f64,
    /// `H(x, y | w)`.
    pub cond_entropy_xy_given_w: f64,
    pub h_x: f64,
    pub h_y: f64,
    /// `I(x; w)`.
    pub mi_xw: f64,
    /// [`expected_ce_joint`].
    pub lhs_joint: f64,
    /// `lhs − (KL + H(x,y|w) − H(x) + I(x;w))`, the chain-rule form.
    pub residual_corrected: f64,
    /// `lhs − (KL + H(x,y|w) − H(y) + I(x;w))`, the form with `−H(y)`.
    pub residual_paper: f64,
}

pub fn theorem2_terms(j: &DiscreteJoint, f: &DiscreteClassifier) -> Result<Theorem2Terms> {
    let lhs_joint = expected_ce_joint(j, f)?;
    let (nx, ny, nw) = f.dims();
    let pxw = j.p_xw();

    let mut kl_term = 0.0;
    for x in 0..nx {
        for w in 0..nw {
            let a = pxw.p[x * nw + w];
            if a == 0.0 {
                continue;
            }
            for y in 0..ny {
                let p_cond = j.p(x, y, w) / a;
                if p_cond > 0.0 {
                    kl_term += a * p_cond * (p_cond / f.f(x, y, w)).ln();
                }
            }
        }
    }
    let cond_entropy_xy_given_w = conditional_entropy(j.table(), &[2])?;
    let h_x = j.table().marginal(&[0]).entropy();
    let h_y = j.table().marginal(&[1]).entropy();
    let mi_xw = mutual_information(&pxw)?;
    let residual_corrected = lhs_joint - (kl_term + cond_entropy_xy_given_w - h_x + mi_xw);
    let residual_paper = lhs_joint - (kl_term + cond_entropy_xy_given_w - h_y + mi_xw);
    Ok(Theorem2Terms {
        kl_term,
        cond_entropy_xy_given_w,
        h_x,
        h_y,
        mi_xw,
        lhs_joint,
        residual_corrected,
        residual_paper,
    })
}

/// Largest residuals seen while fuzzing both decompositions.
#[derive(Clone, Debug, Serialize)]
pub struct TheoremFuzzReport {
    pub cases: usize,
    pub max_theorem1_residual: f64,
    pub max_theorem2_residual_corrected: f64,
    /// `max |residual_paper − (H(y) − H(x))|`.
    pub max_theorem2_gap_deviation: f64,
    /// `max |residual_paper|`, i.e. how far the `−H(y)` form is from holding.
    pub max_theorem2_residual_paper: f64,
    pub min_mutual_information: f64,
    pub min_lautum_information: f64,
}

impl TheoremFuzzReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_theorem1_residual < tol
            && self.max_theorem2_residual_corrected < tol
            && self.max_theorem2_gap_deviation < tol
            && self.min_mutual_information >= -1e-12
            && self.min_lautum_information >= -1e-12
    }
}

/// Evaluates both decompositions on `cases` random strictly positive
/// instances with `nx ≤ 6`, `ny ≤ 5`, `nw ≤ 4`.
pub fn fuzz_theorems<R: Rng + ?Sized>(rng: &mut R, cases: usize) -> Result<TheoremFuzzReport> {
    let mut report = TheoremFuzzReport {
        cases,
        max_theorem1_residual: 0.0,
        max_theorem2_residual_corrected: 0.0,
        max_theorem2_gap_deviation: 0.0,
        max_theorem2_residual_paper: 0.0,
        min_mutual_information: f64::INFINITY,
        min_lautum_information: f64::INFINITY,
    };
    for _ in 0..cases {
        let nx = rng.random_range(1..=6);
        let ny = rng.random_range(2..=5);
        let nw = rng.random_range(1..=4);
        let j = DiscreteJoint::random(rng, nx, ny, nw);
        let f = DiscreteClassifier::random(rng, nx, ny, nw);
        let t1 = theorem1_terms(&j, &f)?;
        let t2 = theorem2_terms(&j, &f)?;
        report.max_theorem1_residual = report.max_theorem1_residual.max(t1.residual.abs());
        report.max_theorem2_residual_corrected =
            report.max_theorem2_residual_corrected.max(t2.residual_corrected.abs());
        report.max_theorem2_gap_deviation =
            report.max_theorem2_gap_deviation.max((t2.residual_paper - (t2.h_y - t2.h_x)).abs());
        report.max_theorem2_residual_paper = report.max_theorem2_residual_paper.max(t2.residual_paper.abs());
        for t in [j.p_xy(), j.p_xw()] {
            report.min_mutual_information = report.min_mutual_information.min(mutual_information(&t)?);
            report.min_lautum_information = report.min_lautum_information.min(lautum_information(&t)?);
        }
    }
    Ok(report)
}
