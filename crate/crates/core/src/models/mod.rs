//! Classifier network, cross-entropy, the projected input-gradient proxy,
//! Adam, and the model checkpoint format.

mod adam;
pub mod checkpoint;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{argmax, Activation, ForwardOutput, Layer, MlpModel, RecordedForward};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Validation(format!("label {y} out of range for {classes} classes")));
        }
        m[(i, y)] = 1.0;
    }
    Ok(m)
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.rows(), labels.len())));
    }
    if logits.rows() == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    if logits.as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN logits".into()));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        if y >= row.len() {
            return Err(Error::Validation(format!("label {y} out of range for {} classes", row.len())));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Records [`ce_loss`] on `logits` as a scalar node.
pub fn ce_loss_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = g.shape(logits);
    if rows != labels.len() || rows == 0 {
        return Err(Error::Shape(format!("{rows} logit rows for {} labels", labels.len())));
    }
    if g.value(logits).as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN logits".into()));
    }
    let targets = g.constant(one_hot(labels, classes)?);
    let lse = g.log_sum_exp_rows(logits);
    let total_lse = g.sum(lse);
    let picked = g.inner(logits, targets);
    let diff = g.sub(total_lse, picked);
    Ok(g.scale(diff, 1.0 / rows as f64))
}

/// Records `Σ_i r·logits(x_i)` and returns the rows `∇_{x_i}(r·logits(x_i))`
/// as a differentiable node. Samples do not interact, so the gradient of the
/// batch sum splits per row.
pub fn record_projected_input_gradient(
    g: &mut Graph,
    model: &MlpModel,
    x: Var,
    params: &[Var],
    r: &[f64],
) -> Result<Var> {
    if r.len() != model.output_dim() {
        return Err(Error::Shape(format!("projection has {} entries, model has {} logits", r.len(), model.output_dim())));
    }
    let out = model.record(g, x, params)?;
    let rows = g.shape(out.logits).0;
    let rv = g.constant(Matrix::row_vector(r));
    let rb = g.broadcast_rows(rv, rows);
    let s = g.inner(out.logits, rb);
    Ok(g.grad(s, &[x])?[0])
}

/// Per-sample input gradient of the randomly projected logits.
pub fn projected_input_gradient(model: &MlpModel, x: &Matrix, r: &[f64]) -> Result<Matrix> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let params = model.param_constants(&mut g);
    let grad = record_projected_input_gradient(&mut g, model, xv, &params, r)?;
    Ok(g.value(grad).clone())
}

/// Standard deviation of projection entries: variance `K^{-1/2}`.
pub fn projection_std(classes: usize) -> f64 {
    (classes as f64).powf(-0.25)
}

/// I.i.d. normal vector with mean 0 and variance `K^{-1/2}`, fixed by `seed`.
pub fn random_projection_vector(classes: usize, seed: u64) -> Result<Vec<f64>> {
    if classes == 0 {
        return Err(Error::Validation("projection dimension must be positive".into()));
    }
    let normal = Normal::new(0.0, projection_std(classes)).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..classes).map(|_| normal.sample(&mut rng)).collect())
}

/// Seed of the projection vector for `epoch` of a run seeded with `run_seed`.
pub fn projection_seed(run_seed: u64, epoch: usize) -> u64 {
    crate::seeds::derive(run_seed, "projection", epoch as u64)
}
