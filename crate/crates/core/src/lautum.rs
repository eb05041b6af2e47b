//! Gaussian Lautum information between inputs and weight proxies.
//!
//! Under a joint Gaussian model with covariance blocks `Σx`, `Σw`, `Σxw`,
//!
//! ```text
//! L = log det B + 2·tr(B⁻¹ − I),   B = I − Σx⁻¹ Σxw Σw⁻¹ Σwx.
//! ```
//!
//! `B` is similar to the symmetric `Bs = I − A Σw⁻¹ Aᵀ` with `A = Lx⁻¹ Σxw`
//! and `Σx = Lx Lxᵀ`, so both terms are evaluated on the eigenvalues of `Bs`.
//! Eigenvalues are floored at [`EIGEN_FLOOR`] since sample noise can push `B`
//! indefinite.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{from_eigen, symmetric_eigen, Cholesky, Matrix, SymMatrix};

pub const EIGEN_FLOOR: f64 = 1e-6;
pub const NORM_EPS: f64 = 1e-8;
pub const DEFAULT_ALPHA: f64 = 0.999;

/// Population covariance `(1/N) Σ (a_i − μa)(b_i − μb)ᵀ` of two row batches.
pub fn cross_covariance(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!("batches have {} and {} rows", a.rows(), b.rows())));
    }
    if a.rows() < 2 {
        return Err(Error::Validation("covariance needs at least 2 samples".into()));
    }
    let ac = center(a);
    let bc = center(b);
    Ok(ac.transpose().matmul(&bc).scale(1.0 / a.rows() as f64))
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut mu = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in mu.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    let n = m.rows() as f64;
    mu.iter_mut().for_each(|v| *v /= n);
    mu
}

fn center(m: &Matrix) -> Matrix {
    let mu = column_means(m);
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (v, mean) in out.row_mut(r).iter_mut().zip(&mu) {
            *v -= mean;
        }
    }
    out
}

/// Per-column population standard deviation.
pub fn column_std(m: &Matrix) -> Vec<f64> {
    let c = center(m);
    let n = m.rows() as f64;
    (0..m.cols())
        .map(|j| ((0..m.rows()).map(|r| c[(r, j)] * c[(r, j)]).sum::<f64>() / n).sqrt())
        .collect()
}

/// Divisors used by [`batch_normalize`]: `std + ε`, or 1 where `std ≤ ε`.
pub fn normalization_scales(m: &Matrix) -> Vec<f64> {
    column_std(m).into_iter().map(|s| if s > NORM_EPS { s + NORM_EPS } else { 1.0 }).collect()
}

pub fn scale_columns(m: &Matrix, divisors: &[f64]) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (v, d) in out.row_mut(r).iter_mut().zip(divisors) {
            *v /= d;
        }
    }
    out
}

/// Divides every column by its batch standard deviation (plus ε); the mean
/// is left in place. Returns the normalized batch and the divisors.
pub fn batch_normalize(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if m.rows() < 2 {
        return Err(Error::Validation("normalization needs a batch of at least 2".into()));
    }
    let scales = normalization_scales(m);
    Ok((scale_columns(m, &scales), scales))
}

/// Sample covariance of an input set; callers pass normalized inputs.
pub fn estimate_sigma_x(inputs: &Matrix) -> Result<SymMatrix> {
    Ok(SymMatrix::from_symmetrized(&cross_covariance(inputs, inputs)?))
}

/// Normalized inputs and weight proxies of one target batch.
#[derive(Clone, Debug)]
pub struct ProxyBatch {
    pub x_norm: Matrix,
    pub w_norm: Matrix,
    /// Divisors applied to the raw proxies.
    pub w_scale: Vec<f64>,
}

impl ProxyBatch {
    pub fn new(x: &Matrix, w: &Matrix) -> Result<Self> {
        if x.rows() != w.rows() {
            return Err(Error::Shape(format!("{} inputs for {} proxies", x.rows(), w.rows())));
        }
        let (x_norm, _) = batch_normalize(x)?;
        let (w_norm, w_scale) = batch_normalize(w)?;
        Ok(ProxyBatch { x_norm, w_norm, w_scale })
    }

    /// Batch already normalized by the caller.
    pub fn from_normalized(x_norm: Matrix, w_norm: Matrix) -> Result<Self> {
        if x_norm.rows() != w_norm.rows() || x_norm.rows() < 2 {
            return Err(Error::Shape(format!("{} inputs for {} proxies", x_norm.rows(), w_norm.rows())));
        }
        let w_scale = vec![1.0; w_norm.cols()];
        Ok(ProxyBatch { x_norm, w_norm, w_scale })
    }

    pub fn len(&self) -> usize {
        self.x_norm.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchCovariances {
    pub sigma_w: Matrix,
    pub sigma_xw: Matrix,
}

pub fn batch_covariances(pb: &ProxyBatch) -> Result<BatchCovariances> {
    Ok(BatchCovariances {
        sigma_w: cross_covariance(&pb.w_norm, &pb.w_norm)?.symmetrized(),
        sigma_xw: cross_covariance(&pb.x_norm, &pb.w_norm)?,
    })
}

/// Fixed `Σx` plus exponentially averaged `Σw` and `Σxw`.
#[derive(Clone, Debug)]
pub struct CovarianceState {
    sigma_x: SymMatrix,
    sigma_w: Matrix,
    sigma_xw: Matrix,
    alpha: f64,
    iteration: u64,
}

impl CovarianceState {
    /// EMA blocks start at zero.
    pub fn new(sigma_x: SymMatrix, proxy_dim: usize, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Validation(format!("EMA decay {alpha} outside [0, 1)")));
        }
        let d = sigma_x.dim();
        Ok(CovarianceState {
            sigma_x,
            sigma_w: Matrix::zeros(proxy_dim, proxy_dim),
            sigma_xw: Matrix::zeros(d, proxy_dim),
            alpha,
            iteration: 0,
        })
    }

    /// State with explicit blocks, e.g. a known population covariance.
    pub fn from_blocks(sigma_x: SymMatrix, sigma_w: SymMatrix, sigma_xw: Matrix, alpha: f64) -> Result<Self> {
        if sigma_xw.shape() != (sigma_x.dim(), sigma_w.dim()) {
            return Err(Error::Shape(format!("Σxw is {:?}, expected {}x{}", sigma_xw.shape(), sigma_x.dim(), sigma_w.dim())));
        }
        let mut s = Self::new(sigma_x, sigma_w.dim(), alpha)?;
        s.sigma_w = sigma_w.into_matrix();
        s.sigma_xw = sigma_xw;
        Ok(s)
    }

    pub fn sigma_x(&self) -> &SymMatrix {
        &self.sigma_x
    }

    pub fn sigma_w(&self) -> &Matrix {
        &self.sigma_w
    }

    pub fn sigma_xw(&self) -> &Matrix {
        &self.sigma_xw
    }

    /// Kept as the transpose of `Σxw`, never stored separately.
    pub fn sigma_wx(&self) -> Matrix {
        self.sigma_xw.transpose()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// `Σ(n) = α·Σ(n−1) + (1−α)·Σbatch` for `Σw` and `Σxw`.
    pub fn ema_update(&mut self, batch: &BatchCovariances) -> Result<()> {
        if batch.sigma_w.shape() != self.sigma_w.shape() || batch.sigma_xw.shape() != self.sigma_xw.shape() {
            return Err(Error::Shape("batch covariance shapes differ from state".into()));
        }
        let a = self.alpha;
        self.sigma_w = self.sigma_w.zip_map(&batch.sigma_w, |s, b| a * s + (1.0 - a) * b).symmetrized();
        self.sigma_xw = self.sigma_xw.zip_map(&batch.sigma_xw, |s, b| a * s + (1.0 - a) * b);
        self.iteration += 1;
        Ok(())
    }

    pub fn updated(&self, batch: &BatchCovariances) -> Result<Self> {
        let mut next = self.clone();
        next.ema_update(batch)?;
        Ok(next)
    }
}

#[derive(Clone, Debug)]
pub struct LautumEstimate {
    pub value: f64,
    /// Smallest eigenvalue of the symmetrized `B` before flooring.
    pub min_eigenvalue: f64,
    /// Largest diagonal jitter needed by the `Σx` / `Σw` factorizations.
    pub jitter: f64,
    /// Eigenvalues that were raised to the floor.
    pub clamped: usize,
}

struct Decomposition {
    chol_x: Cholesky,
    /// `Σw⁻¹ Aᵀ` with `A = Lx⁻¹ Σxw`.
    sw_inv_at: Matrix,
    eigenvalues: Vec<f64>,
    eigenvectors: Matrix,
    estimate: LautumEstimate,
}

fn decompose(sigma_x: &SymMatrix, sigma_w: &Matrix, sigma_xw: &Matrix) -> Result<Decomposition> {
    let chol_x = Cholesky::factor(sigma_x)?;
    let chol_w = Cholesky::factor(&SymMatrix::from_symmetrized(sigma_w))?;
    let a = chol_x.solve_lower(sigma_xw);
    let sw_inv_at = chol_w.solve(&a.transpose());
    let m = a.matmul(&sw_inv_at);
    let b = Matrix::identity(m.rows()).sub(&m);
    let (eigenvalues, eigenvectors) = symmetric_eigen(&SymMatrix::from_symmetrized(&b));
    let min_eigenvalue = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !eigenvalues.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateCorrelation { min_eigenvalue });
    }
    let mut value = 0.0;
    let mut clamped = 0;
    for &l in &eigenvalues {
        let l = if l < EIGEN_FLOOR {
            clamped += 1;
            EIGEN_FLOOR
        } else {
            l
        };
        value += l.ln() + 2.0 * (1.0 / l - 1.0);
    }
    let estimate = LautumEstimate { value, min_eigenvalue, jitter: chol_x.jitter().max(chol_w.jitter()), clamped };
    Ok(Decomposition { chol_x, sw_inv_at, eigenvalues, eigenvectors, estimate })
}

/// Closed form evaluated directly on covariance blocks.
pub fn lautum_from_covariances(sigma_x: &SymMatrix, sigma_w: &Matrix, sigma_xw: &Matrix) -> Result<LautumEstimate> {
    if sigma_xw.shape() != (sigma_x.dim(), sigma_w.rows()) || !sigma_w.is_square() {
        return Err(Error::Shape("inconsistent covariance blocks".into()));
    }
    Ok(decompose(sigma_x, sigma_w, sigma_xw)?.estimate)
}

pub fn lautum_gaussian(state: &CovarianceState) -> Result<LautumEstimate> {
    lautum_from_covariances(&state.sigma_x, &state.sigma_w, &state.sigma_xw)
}

/// One-shot estimate from paired samples: both sides are batch-normalized and
/// every block comes from the same sample.
pub fn lautum_from_samples(x: &Matrix, w: &Matrix) -> Result<LautumEstimate> {
    let pb = ProxyBatch::new(x, w)?;
    let sigma_x = estimate_sigma_x(&pb.x_norm)?;
    let c = batch_covariances(&pb)?;
    lautum_from_covariances(&sigma_x, &c.sigma_w, &c.sigma_xw)
}

/// `n` rows drawn from a zero-mean Gaussian with covariance `cov`.
pub fn sample_gaussian<R: Rng + ?Sized>(rng: &mut R, cov: &SymMatrix, n: usize) -> Result<Matrix> {
    let chol = Cholesky::factor(cov)?;
    let d = cov.dim();
    let noise: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Matrix::from_vec(n, d, noise)?.matmul(&chol.lower().transpose()))
}

/// Gradients of the closed form with respect to the covariance blocks.
#[derive(Clone, Debug)]
pub struct CovarianceGradient {
    pub estimate: LautumEstimate,
    /// `∂L/∂Σw`, symmetric.
    pub d_sigma_w: Matrix,
    pub d_sigma_xw: Matrix,
}

pub fn lautum_covariance_gradient(state: &CovarianceState) -> Result<CovarianceGradient> {
    let d = decompose(&state.sigma_x, &state.sigma_w, &state.sigma_xw)?;
    // dL/dBs = V diag(1/λ − 2/λ²) Vᵀ; floored eigenvalues are locally constant.
    let slopes: Vec<f64> = d
        .eigenvalues
        .iter()
        .map(|&l| if l < EIGEN_FLOOR { 0.0 } else { 1.0 / l - 2.0 / (l * l) })
        .collect();
    let gb = from_eigen(&slopes, &d.eigenvectors).symmetrized();
    // Bs = I − A Σw⁻¹ Aᵀ.
    let gb_a_swinv = gb.matmul(&d.sw_inv_at.transpose());
    let d_a = gb_a_swinv.scale(-2.0);
    let d_sigma_xw = d.chol_x.solve_upper(&d_a);
    let d_sigma_w = d.sw_inv_at.matmul(&gb_a_swinv).symmetrized();
    Ok(CovarianceGradient { estimate: d.estimate, d_sigma_w, d_sigma_xw })
}

/// Value and per-sample gradient of the Lautum estimate after the EMA update
/// with `pb`.
#[derive(Clone, Debug)]
pub struct ProxyGradient {
    pub estimate: LautumEstimate,
    /// `∂L/∂w_i` with respect to the normalized proxies, one row per sample.
    pub grad_w_norm: Matrix,
}

impl ProxyGradient {
    /// Gradient with respect to the raw proxies, holding the normalization
    /// scales fixed.
    pub fn grad_w_raw(&self, w_scale: &[f64]) -> Matrix {
        scale_columns(&self.grad_w_norm, w_scale)
    }
}

/// `∂L/∂w_i` where `L` is evaluated on `updated` (the state after the EMA
/// step with `pb`). `Σx`, the history term `α·Σ(n−1)` and the normalization
/// scales are treated as constants.
pub fn lautum_grad_wrt_proxies(updated: &CovarianceState, pb: &ProxyBatch) -> Result<ProxyGradient> {
    if pb.w_norm.cols() != updated.sigma_w.rows() || pb.x_norm.cols() != updated.sigma_x.dim() {
        return Err(Error::Shape("proxy batch does not match covariance state".into()));
    }
    let g = lautum_covariance_gradient(updated)?;
    let n = pb.len() as f64;
    let k = 1.0 - updated.alpha;
    let xc = center(&pb.x_norm);
    let wc = center(&pb.w_norm);
    // ∂Σw_batch/∂w_i contributes (2/N)·G_w (w_i − μw); ∂Σxw_batch/∂w_i contributes (1/N)·G_xwᵀ (x_i − μx).
    let from_w = wc.matmul(&g.d_sigma_w).scale(2.0 * k / n);
    let from_xw = xc.matmul(&g.d_sigma_xw).scale(k / n);
    Ok(ProxyGradient { estimate: g.estimate, grad_w_norm: from_w.add(&from_xw) })
}

/// One row of the per-iteration diagnostic stream.
#[derive(Clone, Debug, Serialize)]
pub struct LautumDiagnostic {
    pub iteration: u64,
    pub lautum: f64,
    pub min_eigenvalue: f64,
    pub jitter: f64,
}

pub fn write_diagnostics<W: Write>(rows: &[LautumDiagnostic], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn one_dimensional_closed_form() {
        let one = SymMatrix::identity(1);
        let l = lautum_from_covariances(&one, &Matrix::scalar(1.0), &Matrix::scalar(0.5)).unwrap();
        let expected = 0.75f64.ln() + 2.0 * (1.0 / 0.75 - 1.0);
        assert!((l.value - expected).abs() < 1e-12);
        assert!((l.value - 0.378_985).abs() < 1e-6);
        let zero = lautum_from_covariances(&one, &Matrix::scalar(1.0), &Matrix::scalar(0.0)).unwrap();
        assert_eq!(zero.value, 0.0);
    }

    #[test]
    fn matches_unsymmetrized_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 200, 3);
        let w = x.scale(0.7).add(&random_matrix(&mut rng, 200, 3));
        let sx = estimate_sigma_x(&x).unwrap();
        let sw = cross_covariance(&w, &w).unwrap();
        let sxw = cross_covariance(&x, &w).unwrap();
        let est = lautum_from_covariances(&sx, &sw, &sxw).unwrap();
        // B = I − Σx⁻¹ Σxw Σw⁻¹ Σwx formed explicitly (non-symmetric);
        // det by cofactors, tr(B⁻¹) = Σ principal 2x2 minors / det.
        let sw_inv_swx = crate::linalg::spd_factor_solve(&SymMatrix::from_symmetrized(&sw), &sxw.transpose()).unwrap();
        let b = Matrix::identity(3).sub(&crate::linalg::spd_factor_solve(&sx, &sxw.matmul(&sw_inv_swx)).unwrap());
        let minor = |i: usize, j: usize| b[(i, i)] * b[(j, j)] - b[(i, j)] * b[(j, i)];
        let det = b[(0, 0)] * minor(1, 2) - b[(0, 1)] * (b[(1, 0)] * b[(2, 2)] - b[(1, 2)] * b[(2, 0)])
            + b[(0, 2)] * (b[(1, 0)] * b[(2, 1)] - b[(1, 1)] * b[(2, 0)]);
        let tr_inv = (minor(0, 1) + minor(0, 2) + minor(1, 2)) / det;
        let direct = det.ln() + 2.0 * (tr_inv - 3.0);
        assert!((est.value - direct).abs() < 1e-9, "{} vs {direct}", est.value);
    }

    #[test]
    fn ema_first_step_and_limit() {
        let mut s = CovarianceState::new(SymMatrix::identity(2), 2, 0.999).unwrap();
        let c = BatchCovariances {
            sigma_w: Matrix::from_vec(2, 2, vec![2.0, 0.5, 0.5, 1.0]).unwrap(),
            sigma_xw: Matrix::from_vec(2, 2, vec![0.3, -0.1, 0.2, 0.4]).unwrap(),
        };
        s.ema_update(&c).unwrap();
        assert!(s.sigma_w().max_abs_diff(&c.sigma_w.scale(0.001)) < 1e-15);
        assert!(s.sigma_xw().max_abs_diff(&c.sigma_xw.scale(0.001)) < 1e-15);
        assert_eq!(s.sigma_x().as_matrix(), &Matrix::identity(2));
        let mut s0 = CovarianceState::new(SymMatrix::identity(2), 2, 0.0).unwrap();
        s0.ema_update(&c).unwrap();
        assert_eq!(s0.sigma_w(), &c.sigma_w);
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_matrix(&mut rng, 30, 4);
        let (a, _) = batch_normalize(&m).unwrap();
        let mut scaled = m.clone();
        for r in 0..30 {
            scaled.row_mut(r)[2] *= 10.0;
        }
        let (b, _) = batch_normalize(&scaled).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
        for s in column_std(&a) {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_column_passes_through() {
        let m = Matrix::from_vec(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let (n, scales) = batch_normalize(&m).unwrap();
        assert_eq!(scales[1], 1.0);
        assert_eq!(n[(0, 1)], 5.0);
    }

    #[test]
    fn covariance_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_matrix(&mut rng, 40, 3);
        let w = x.add(&random_matrix(&mut rng, 40, 3).scale(0.8));
        let sx = estimate_sigma_x(&x).unwrap();
        let sw = cross_covariance(&w, &w).unwrap();
        let sxw = cross_covariance(&x, &w).unwrap();
        let state = CovarianceState::from_blocks(sx.clone(), SymMatrix::from_symmetrized(&sw), sxw.clone(), 0.5).unwrap();
        let g = lautum_covariance_gradient(&state).unwrap();
        let mut f = |p: &[f64]| {
            let m = Matrix::from_vec(3, 3, p.to_vec()).unwrap();
            lautum_from_covariances(&sx, &sw, &m).unwrap().value
        };
        assert!(finite_diff_check(&mut f, sxw.as_slice(), g.d_sigma_xw.as_slice()) < 1e-6);
    }

    #[test]
    fn proxy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 8, 3);
        let w = x.scale(0.6).add(&random_matrix(&mut rng, 8, 3));
        let pb = ProxyBatch::from_normalized(x.clone(), w.clone()).unwrap();
        let sigma_x = estimate_sigma_x(&x).unwrap();
        let mut prev = CovarianceState::new(sigma_x, 3, 0.3).unwrap();
        let warm = ProxyBatch::from_normalized(x.clone(), random_matrix(&mut rng, 8, 3).add(&x)).unwrap();
        prev.ema_update(&batch_covariances(&warm).unwrap()).unwrap();
        let updated = prev.updated(&batch_covariances(&pb).unwrap()).unwrap();
        let grad = lautum_grad_wrt_proxies(&updated, &pb).unwrap();
        let mut f = |p: &[f64]| {
            let wb = Matrix::from_vec(8, 3, p.to_vec()).unwrap();
            let b = ProxyBatch::from_normalized(x.clone(), wb).unwrap();
            lautum_gaussian(&prev.updated(&batch_covariances(&b).unwrap()).unwrap()).unwrap().value
        };
        let err = finite_diff_check(&mut f, w.as_slice(), grad.grad_w_norm.as_slice());
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn independence_is_stationary() {
        let state = CovarianceState::from_blocks(SymMatrix::identity(2), SymMatrix::identity(2), Matrix::zeros(2, 2), 0.9).unwrap();
        let g = lautum_covariance_gradient(&state).unwrap();
        assert_eq!(g.estimate.value, 0.0);
        assert!(g.d_sigma_xw.max_abs() == 0.0 && g.d_sigma_w.max_abs() == 0.0);
    }

    #[test]
    fn diagnostics_csv_has_header() {
        let mut buf = Vec::new();
        write_diagnostics(&[LautumDiagnostic { iteration: 1, lautum: 0.5, min_eigenvalue: 0.9, jitter: 0.0 }], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,lautum,min_eigenvalue,jitter\n1,0.5,0.9,0.0"));
    }
}
