//! Two-stage transfer: pre-transfer training on labeled source data with a
//! regularizer on unlabeled target data, then fine-tuning of the whole
//! network on the few labeled target samples.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::config::ExperimentConfig;
use crate::data::{self, LabeledSet, Standardizer, SyntheticSpec, TargetSplit};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::{argmax, ce_loss_graph, AdamState, MlpModel};
use crate::regularizer::{RegDiagnostics, RegSetup, Regularizer, RegularizerRegistry};
use crate::seeds;

/// A run is flagged unstable when more than this fraction of pre-transfer
/// iterations had to be skipped.
pub const MAX_SKIP_FRACTION: f64 = 0.1;

/// Where a batch was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BatchOrigin {
    SourceLabeled,
    TargetUnlabeled,
    TargetLabeled,
}

/// Cycles through shuffled indices, reshuffling after each full pass.
#[derive(Clone, Debug)]
pub struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchCycler {
    pub fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Validation("cannot batch an empty set".into()));
        }
        let mut c = BatchCycler { order: (0..n).collect(), pos: 0, batch: batch.min(n), rng };
        c.order.shuffle(&mut c.rng);
        Ok(c)
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Full batches per pass.
    pub fn batches_per_pass(&self) -> usize {
        self.order.len() / self.batch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Standardized source and target data for one run.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub source_train: LabeledSet,
    pub source_test: LabeledSet,
    pub target: TargetSplit,
    pub standardizer: Standardizer,
}

fn split_off(set: &LabeledSet, n_test: usize, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    if n_test >= set.len() {
        return Err(Error::config("dataset.n_source_test", "leaves no source training data"));
    }
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.shuffle(&mut seeds::rng(seed, "source_split", 0));
    Ok((set.subset(&idx[n_test..]), set.subset(&idx[..n_test])))
}

/// Builds (or loads) the datasets, splits the target pool and standardizes
/// everything with source-train statistics.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.dataset;
    let data_seed = d.data_seed.unwrap_or(cfg.seed);
    let (source, pool) = match d.kind.as_str() {
        "synthetic" => {
            let mut spec = SyntheticSpec::from_seed(data_seed, d.dim, d.classes, d.n_source + d.n_source_test, d.n_target, d.style_strength);
            spec.mean_scale = d.mean_scale;
            data::make_synthetic_transfer_pair_with(&spec)?
        }
        "csv" => {
            let src = d.source_path.as_deref().ok_or_else(|| Error::config("dataset.source_path", "missing"))?;
            let tgt = d.target_path.as_deref().ok_or_else(|| Error::config("dataset.target_path", "missing"))?;
            let s = data::load_csv_dataset(src, &d.label_column)?;
            let t = data::load_csv_dataset(tgt, &d.label_column)?;
            if s.dim() != t.dim() {
                return Err(Error::Shape(format!("source has {} features, target {}", s.dim(), t.dim())));
            }
            let classes = s.classes.max(t.classes);
            (LabeledSet { classes, ..s }, LabeledSet { classes, ..t })
        }
        other => return Err(Error::config("dataset.kind", format!("unknown dataset kind `{other}`"))),
    };
    let (source_train, source_test) = if d.kind == "synthetic" {
        let n = d.n_source;
        let train: Vec<usize> = (0..n).collect();
        let test: Vec<usize> = (n..source.len()).collect();
        (source.subset(&train), source.subset(&test))
    } else {
        split_off(&source, d.n_source_test, data_seed)?
    };
    let split = data::split_target(&pool, cfg.labeled_target_count, d.n_target_test, seeds::derive(data_seed, "split", 0))?;
    let standardizer = Standardizer::fit(&source_train.inputs)?;
    let std_set = |s: &LabeledSet| LabeledSet { inputs: standardizer.apply(&s.inputs), ..s.clone() };
    let target = TargetSplit {
        labeled: std_set(&split.labeled),
        unlabeled: standardizer.apply(&split.unlabeled),
        test: std_set(&split.test),
        ..split
    };
    Ok(PreparedData { source_train: std_set(&source_train), source_test: std_set(&source_test), target, standardizer })
}

/// Bookkeeping for one pre-transfer iteration.
#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub ce: f64,
    pub lautum: Option<f64>,
    pub mi: Option<f64>,
    /// `ce + loss_term` for the applied update.
    pub applied_loss: f64,
    pub skipped: bool,
    pub ce_origin: BatchOrigin,
    pub reg_origin: Option<BatchOrigin>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub iterations: Vec<IterationRecord>,
    pub epoch_ce: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    pub epoch_lautum: Vec<f64>,
    pub epoch_mi: Vec<f64>,
    pub skipped: usize,
    pub unstable: bool,
    pub diagnostics: RegDiagnostics,
}

fn ce_and_grads(model: &MlpModel, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Matrix>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let params = model.param_inputs(&mut g);
    let out = model.record(&mut g, xv, &params)?;
    let loss = ce_loss_graph(&mut g, out.logits, labels)?;
    let grads = g.grad_values(loss, &params)?;
    Ok((g.scalar(loss), grads))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Pre-transfer stage. Each iteration takes a labeled source batch for the
/// cross-entropy and, when the regularizer is active, an unlabeled target
/// batch for the regularizer; both gradients are summed into one Adam step.
/// An iteration whose regularizer hits a singular covariance is skipped.
pub fn pretransfer_train(
    cfg: &ExperimentConfig,
    model: &mut MlpModel,
    source: &LabeledSet,
    target_unlabeled: &Matrix,
    reg: &mut dyn Regularizer,
) -> Result<PretrainOutput> {
    let mut adam = AdamState::new(cfg.optimizer, &model.param_shapes());
    let mut src = BatchCycler::new(source.len(), cfg.batch_size, seeds::rng(cfg.seed, "source_batches", 0))?;
    let mut tgt = if reg.is_active() {
        if target_unlabeled.rows() < 2 {
            return Err(Error::config("dataset", "regularization needs at least 2 unlabeled target samples"));
        }
        Some(BatchCycler::new(target_unlabeled.rows(), cfg.batch_size, seeds::rng(cfg.seed, "target_batches", 0))?)
    } else {
        None
    };
    let per_epoch = src.batches_per_pass().max(1);
    let mut out = PretrainOutput {
        iterations: Vec::with_capacity(per_epoch * cfg.pre_epochs),
        epoch_ce: Vec::new(),
        epoch_loss: Vec::new(),
        epoch_lautum: Vec::new(),
        epoch_mi: Vec::new(),
        skipped: 0,
        unstable: false,
        diagnostics: RegDiagnostics::default(),
    };
    for epoch in 0..cfg.pre_epochs {
        reg.begin_epoch(model, epoch)?;
        let (mut ces, mut losses, mut lts, mut mis) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..per_epoch {
            let idx = src.next_batch();
            let xb = data::select_rows(&source.inputs, &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| source.labels[i]).collect();
            let (ce, mut grads) = ce_and_grads(model, &xb, &yb)?;
            let mut record = IterationRecord {
                epoch,
                ce,
                lautum: None,
                mi: None,
                applied_loss: ce,
                skipped: false,
                ce_origin: BatchOrigin::SourceLabeled,
                reg_origin: None,
            };
            if let Some(t) = tgt.as_mut() {
                let tb = data::select_rows(target_unlabeled, &t.next_batch());
                record.reg_origin = Some(BatchOrigin::TargetUnlabeled);
                match reg.step(model, &tb) {
                    Ok(step) => {
                        record.lautum = step.lautum;
                        record.mi = step.mi;
                        record.applied_loss = ce + step.loss_term;
                        grads = grads.iter().zip(&step.grads).map(|(a, b)| a.add(b)).collect();
                    }
                    Err(e @ (Error::Singular { .. } | Error::DegenerateCorrelation { .. })) => {
                        log::warn!("epoch {epoch}: skipping iteration: {e}");
                        record.skipped = true;
                    }
                    Err(e) => return Err(e),
                }
            }
            if record.skipped {
                out.skipped += 1;
            } else {
                if grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Instability(format!("non-finite gradient in pre-transfer epoch {epoch}")));
                }
                adam.step(model.params_mut(), &grads)?;
                ces.push(record.ce);
                losses.push(record.applied_loss);
                lts.extend(record.lautum);
                mis.extend(record.mi);
            }
            out.iterations.push(record);
        }
        reg.end_epoch(epoch);
        out.epoch_ce.push(mean(&ces));
        out.epoch_loss.push(mean(&losses));
        out.epoch_lautum.push(mean(&lts));
        out.epoch_mi.push(mean(&mis));
    }
    out.unstable = out.skipped as f64 > MAX_SKIP_FRACTION * out.iterations.len() as f64;
    if out.unstable {
        log::warn!("{} of {} pre-transfer iterations skipped; run marked unstable", out.skipped, out.iterations.len());
    }
    out.diagnostics = reg.diagnostics();
    Ok(out)
}

/// Post-transfer stage: plain cross-entropy fine-tuning of every parameter
/// with a fresh optimizer. Returns the mean loss per epoch.
pub fn posttransfer_train(cfg: &ExperimentConfig, model: &mut MlpModel, labeled: &LabeledSet) -> Result<Vec<f64>> {
    if labeled.is_empty() {
        return Err(Error::Validation("post-transfer training needs labeled target samples".into()));
    }
    let mut adam = AdamState::new(cfg.post_optimizer, &model.param_shapes());
    let mut batches = BatchCycler::new(labeled.len(), cfg.batch_size, seeds::rng(cfg.seed, "post_batches", 0))?;
    let per_epoch = batches.batches_per_pass().max(1);
    let mut trace = Vec::with_capacity(cfg.post_epochs);
    for epoch in 0..cfg.post_epochs {
        let mut losses = Vec::with_capacity(per_epoch);
        for _ in 0..per_epoch {
            let idx = batches.next_batch();
            let xb = data::select_rows(&labeled.inputs, &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labeled.labels[i]).collect();
            let (ce, grads) = ce_and_grads(model, &xb, &yb)?;
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Instability(format!("non-finite gradient in post-transfer epoch {epoch}")));
            }
            adam.step(model.params_mut(), &grads)?;
            losses.push(ce);
        }
        trace.push(mean(&losses));
    }
    Ok(trace)
}

/// Fraction of samples whose largest logit (lowest index on ties) matches the label.
pub fn evaluate(model: &MlpModel, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty set".into()));
    }
    let logits = model.forward(&set.inputs)?.logits;
    let correct = (0..set.len()).filter(|&r| argmax(logits.row(r)) == set.labels[r]).count();
    Ok(correct as f64 / set.len() as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentResult {
    pub method: String,
    pub labeled_count: usize,
    pub seed: u64,
    pub target_test_accuracy: f64,
    /// Source test accuracy after pre-transfer training.
    pub source_test_accuracy: f64,
    /// Mean source cross-entropy per pre-transfer epoch.
    pub pre_ce_trace: Vec<f64>,
    /// Mean applied loss (cross-entropy plus signed regularizer term) per pre-transfer epoch.
    pub pre_loss_trace: Vec<f64>,
    pub lautum_trace: Vec<f64>,
    pub mi_trace: Vec<f64>,
    pub post_loss_trace: Vec<f64>,
    pub skipped_iterations: usize,
    pub total_iterations: usize,
    pub unstable: bool,
    pub wallclock_s: f64,
    pub config: ExperimentConfig,
}

pub const CSV_COLUMNS: [&str; 13] = [
    "method",
    "labeled_count",
    "seed",
    "target_test_acc",
    "source_test_acc",
    "pre_epochs",
    "post_epochs",
    "lambda_lautum",
    "lambda_mi",
    "tau",
    "alpha",
    "wallclock_s",
    "status",
];

impl ExperimentResult {
    /// A result with NaN metrics and empty traces, for rows of failed runs.
    pub fn placeholder(cfg: &ExperimentConfig) -> Self {
        ExperimentResult {
            method: cfg.method.clone(),
            labeled_count: cfg.labeled_target_count,
            seed: cfg.seed,
            target_test_accuracy: f64::NAN,
            source_test_accuracy: f64::NAN,
            pre_ce_trace: Vec::new(),
            pre_loss_trace: Vec::new(),
            lautum_trace: Vec::new(),
            mi_trace: Vec::new(),
            post_loss_trace: Vec::new(),
            skipped_iterations: 0,
            total_iterations: 0,
            unstable: false,
            wallclock_s: f64::NAN,
            config: cfg.clone(),
        }
    }

    pub fn status(&self) -> &'static str {
        if self.unstable {
            "unstable"
        } else {
            "ok"
        }
    }

    /// One row in [`CSV_COLUMNS`] order.
    pub fn csv_row(&self) -> Vec<String> {
        let c = &self.config;
        vec![
            self.method.clone(),
            self.labeled_count.to_string(),
            self.seed.to_string(),
            format!("{:?}", self.target_test_accuracy),
            format!("{:?}", self.source_test_accuracy),
            c.pre_epochs.to_string(),
            c.post_epochs.to_string(),
            format!("{:?}", c.lambda_lautum),
            format!("{:?}", c.lambda_mi),
            format!("{:?}", c.tau),
            format!("{:?}", c.alpha),
            format!("{:.3}", self.wallclock_s),
            self.status().to_string(),
        ]
    }
}

/// Writes rows in [`CSV_COLUMNS`] order, optionally preceded by the header.
pub fn write_csv_rows<W: Write>(w: W, header: bool, rows: &[Vec<String>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if header {
        out.write_record(CSV_COLUMNS).map_err(|e| Error::Csv(e.to_string()))?;
    }
    for r in rows {
        out.write_record(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

/// Everything a run produces, for callers that need more than the summary.
pub struct RunArtifacts {
    pub result: ExperimentResult,
    pub model: MlpModel,
    pub pretrain: PretrainOutput,
    pub data: PreparedData,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    Ok(run_experiment_with(cfg, &RegularizerRegistry::with_builtins())?.result)
}

pub fn run_experiment_with(cfg: &ExperimentConfig, registry: &RegularizerRegistry) -> Result<RunArtifacts> {
    let start = Instant::now();
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let d = data.source_train.dim();
    let k = data.source_train.classes.max(data.target.labeled.classes);
    let mut dims = vec![d];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(k);
    let mut model = MlpModel::new(&dims, crate::models::Activation::Tanh, seeds::derive(cfg.seed, "init", 0))?;
    let setup = RegSetup {
        config: cfg,
        input_dim: d,
        feature_dim: model.feature_dim(),
        classes: k,
        target_unlabeled: &data.target.unlabeled,
    };
    let mut reg = registry.create(&cfg.method, &setup)?;
    let pretrain = pretransfer_train(cfg, &mut model, &data.source_train, &data.target.unlabeled, reg.as_mut())?;
    let source_test_accuracy = evaluate(&model, &data.source_test)?;
    let post_loss_trace = posttransfer_train(cfg, &mut model, &data.target.labeled)?;
    let target_test_accuracy = evaluate(&model, &data.target.test)?;
    let result = ExperimentResult {
        method: cfg.method.clone(),
        labeled_count: cfg.labeled_target_count,
        seed: cfg.seed,
        target_test_accuracy,
        source_test_accuracy,
        pre_ce_trace: pretrain.epoch_ce.clone(),
        pre_loss_trace: pretrain.epoch_loss.clone(),
        lautum_trace: pretrain.epoch_lautum.clone(),
        mi_trace: pretrain.epoch_mi.clone(),
        post_loss_trace,
        skipped_iterations: pretrain.skipped,
        total_iterations: pretrain.iterations.len(),
        unstable: pretrain.unstable,
        wallclock_s: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    Ok(RunArtifacts { result, model, pretrain, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycler_covers_each_pass() {
        let mut c = BatchCycler::new(10, 3, seeds::rng(1, "t", 0)).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| c.next_batch()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(c.batches_per_pass(), 3);
    }

    #[test]
    fn evaluate_counts_matches_with_low_ties() {
        let model = MlpModel::zeros(&[2, 3], crate::models::Activation::Tanh).unwrap();
        let set = LabeledSet::new(Matrix::zeros(4, 2), vec![0, 0, 1, 2], 3).unwrap();
        assert_eq!(evaluate(&model, &set).unwrap(), 0.5);
    }
}
