//! Pre-transfer regularizers behind one trait, selected by name at runtime.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lautum::{
    batch_covariances, batch_normalize, estimate_sigma_x, lautum_grad_wrt_proxies, CovarianceState, LautumDiagnostic,
    ProxyBatch,
};
use crate::linalg::Matrix;
use crate::mine::{critic_train_epoch, mi_reg_grad, shuffle_permutation, CriticModel, MiDiagnostic, Phase};
use crate::models::{projection_seed, random_projection_vector, record_projected_input_gradient, AdamState, MlpModel};
use crate::seeds;

/// What a regularizer needs to know about the run.
pub struct RegSetup<'a> {
    pub config: &'a ExperimentConfig,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
    /// Unlabeled target inputs, already standardized.
    pub target_unlabeled: &'a Matrix,
}

/// Contribution of a regularizer to one pre-transfer iteration.
#[derive(Clone, Debug, Default)]
pub struct RegStep {
    /// Lautum estimate after this iteration's EMA update.
    pub lautum: Option<f64>,
    /// Clipped MI bound on this iteration's batch.
    pub mi: Option<f64>,
    /// Signed, weighted term added to the loss (`−λL` or `+λÎ`).
    pub loss_term: f64,
    /// Gradient of `loss_term` for each classifier parameter.
    pub grads: Vec<Matrix>,
}

#[derive(Clone, Debug, Default)]
pub struct RegDiagnostics {
    pub lautum: Vec<LautumDiagnostic>,
    pub mi: Vec<MiDiagnostic>,
}

pub trait Regularizer: Send {
    fn name(&self) -> &str;

    /// An inactive regularizer contributes nothing and consumes no target batches.
    fn is_active(&self) -> bool {
        true
    }

    fn begin_epoch(&mut self, _model: &MlpModel, _epoch: usize) -> Result<()> {
        Ok(())
    }

    fn step(&mut self, model: &MlpModel, target_batch: &Matrix) -> Result<RegStep>;

    fn end_epoch(&mut self, _epoch: usize) {}

    fn diagnostics(&self) -> RegDiagnostics {
        RegDiagnostics::default()
    }
}

/// Plain cross-entropy training.
pub struct Standard;

impl Regularizer for Standard {
    fn name(&self) -> &str {
        "standard"
    }

    fn is_active(&self) -> bool {
        false
    }

    fn step(&mut self, model: &MlpModel, _target_batch: &Matrix) -> Result<RegStep> {
        Ok(RegStep { grads: model.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(), ..Default::default() })
    }
}

/// Maximizes the Gaussian Lautum information between target inputs and the
/// projected input-gradient proxies (the term enters the loss as `−λL`).
pub struct LautumRegularizer {
    lambda: f64,
    seed: u64,
    classes: usize,
    state: CovarianceState,
    projection: Vec<f64>,
    log: Vec<LautumDiagnostic>,
}

impl LautumRegularizer {
    pub fn new(setup: &RegSetup, lambda: f64) -> Result<Self> {
        let (x_norm, _) = batch_normalize(setup.target_unlabeled)?;
        let sigma_x = estimate_sigma_x(&x_norm)?;
        Ok(LautumRegularizer {
            lambda,
            seed: setup.config.seed,
            classes: setup.classes,
            state: CovarianceState::new(sigma_x, setup.input_dim, setup.config.alpha)?,
            projection: Vec::new(),
            log: Vec::new(),
        })
    }

    pub fn state(&self) -> &CovarianceState {
        &self.state
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }
}

impl Regularizer for LautumRegularizer {
    fn name(&self) -> &str {
        "lautum"
    }

    fn begin_epoch(&mut self, _model: &MlpModel, epoch: usize) -> Result<()> {
        self.projection = random_projection_vector(self.classes, projection_seed(self.seed, epoch))?;
        Ok(())
    }

    fn step(&mut self, model: &MlpModel, target_batch: &Matrix) -> Result<RegStep> {
        if self.projection.is_empty() {
            return Err(Error::Validation("projection vector not drawn; call begin_epoch first".into()));
        }
        let mut g = Graph::new();
        let x = g.input(target_batch.clone());
        let params = model.param_inputs(&mut g);
        let w = record_projected_input_gradient(&mut g, model, x, &params, &self.projection)?;
        let pb = ProxyBatch::new(target_batch, g.value(w))?;
        let updated = self.state.updated(&batch_covariances(&pb)?)?;
        let pg = lautum_grad_wrt_proxies(&updated, &pb)?;
        // Σ_i ⟨∂L/∂w_i, w_i(θ)⟩ has the parameter gradient of L.
        let dl_dw = g.constant(pg.grad_w_raw(&pb.w_scale));
        let surrogate = g.inner(w, dl_dw);
        let term = g.scale(surrogate, -self.lambda);
        let grads = g.grad_values(term, &params)?;
        self.state = updated;
        let est = pg.estimate;
        self.log.push(LautumDiagnostic {
            iteration: self.state.iteration(),
            lautum: est.value,
            min_eigenvalue: est.min_eigenvalue,
            jitter: est.jitter,
        });
        Ok(RegStep { lautum: Some(est.value), mi: None, loss_term: -self.lambda * est.value, grads })
    }

    fn diagnostics(&self) -> RegDiagnostics {
        RegDiagnostics { lautum: self.log.clone(), mi: Vec::new() }
    }
}

/// Minimizes the clipped MINE estimate of `I(x; z)` on target inputs and
/// classifier features (the term enters the loss as `+λÎ`).
pub struct MiRegularizer {
    lambda: f64,
    tau: f64,
    batch_size: usize,
    alt_critic_epochs: usize,
    alt_classifier_epochs: usize,
    critic: CriticModel,
    adam: AdamState,
    rng: ChaCha8Rng,
    target: Matrix,
    log: Vec<MiDiagnostic>,
    epoch_bound: f64,
    epoch_saturation: f64,
    epoch_steps: usize,
}

impl MiRegularizer {
    pub fn new(setup: &RegSetup, lambda: f64) -> Result<Self> {
        let cfg = setup.config;
        if setup.target_unlabeled.rows() < 2 {
            return Err(Error::config("dataset", "MI regularization needs at least 2 unlabeled target samples"));
        }
        let critic = CriticModel::new(
            setup.input_dim,
            setup.feature_dim,
            &cfg.critic_hidden,
            seeds::derive(cfg.seed, "critic_init", 0),
        )?;
        let adam = AdamState::new(cfg.critic_optimizer, &critic.net().param_shapes());
        Ok(MiRegularizer {
            lambda,
            tau: cfg.tau,
            batch_size: cfg.batch_size,
            alt_critic_epochs: cfg.alt_critic_epochs,
            alt_classifier_epochs: cfg.alt_classifier_epochs,
            critic,
            adam,
            rng: seeds::rng(cfg.seed, "critic", 0),
            target: setup.target_unlabeled.clone(),
            log: Vec::new(),
            epoch_bound: 0.0,
            epoch_saturation: 0.0,
            epoch_steps: 0,
        })
    }

    pub fn critic(&self) -> &CriticModel {
        &self.critic
    }

    fn critic_batches(&mut self, model: &MlpModel) -> Result<Vec<(Matrix, Matrix)>> {
        let n = self.target.rows();
        let order = shuffle_permutation(n, &mut self.rng);
        let mut batches = Vec::new();
        for chunk in order.chunks(self.batch_size.min(n)) {
            if chunk.len() < 2 {
                continue;
            }
            let x = crate::data::select_rows(&self.target, chunk);
            let z = model.forward(&x)?.features;
            batches.push((x, z));
        }
        Ok(batches)
    }
}

impl Regularizer for MiRegularizer {
    fn name(&self) -> &str {
        "mi"
    }

    fn begin_epoch(&mut self, model: &MlpModel, epoch: usize) -> Result<()> {
        if !epoch.is_multiple_of(self.alt_classifier_epochs) {
            return Ok(());
        }
        for _ in 0..self.alt_critic_epochs {
            let batches = self.critic_batches(model)?;
            let stats = critic_train_epoch(&mut self.critic, &mut self.adam, &batches, self.tau, &mut self.rng)?;
            self.log.push(MiDiagnostic {
                epoch,
                phase: Phase::Critic,
                bound: stats.mean_bound,
                clip_saturation: stats.mean_saturation,
            });
        }
        Ok(())
    }

    fn step(&mut self, model: &MlpModel, target_batch: &Matrix) -> Result<RegStep> {
        let perm = shuffle_permutation(target_batch.rows(), &mut self.rng);
        let (est, grads) = mi_reg_grad(&self.critic, model, target_batch, &perm, self.tau, self.lambda)?;
        self.epoch_bound += est.value;
        self.epoch_saturation += est.saturation;
        self.epoch_steps += 1;
        Ok(RegStep { lautum: None, mi: Some(est.value), loss_term: self.lambda * est.value, grads })
    }

    fn end_epoch(&mut self, epoch: usize) {
        if self.epoch_steps > 0 {
            let n = self.epoch_steps as f64;
            self.log.push(MiDiagnostic {
                epoch,
                phase: Phase::Classifier,
                bound: self.epoch_bound / n,
                clip_saturation: self.epoch_saturation / n,
            });
        }
        self.epoch_bound = 0.0;
        self.epoch_saturation = 0.0;
        self.epoch_steps = 0;
    }

    fn diagnostics(&self) -> RegDiagnostics {
        RegDiagnostics { lautum: Vec::new(), mi: self.log.clone() }
    }
}

/// Applies several regularizers to the same target batch and sums their terms.
pub struct Composite {
    name: String,
    parts: Vec<Box<dyn Regularizer>>,
}

impl Composite {
    pub fn new(name: impl Into<String>, parts: Vec<Box<dyn Regularizer>>) -> Self {
        Composite { name: name.into(), parts }
    }
}

impl Regularizer for Composite {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_active(&self) -> bool {
        self.parts.iter().any(|p| p.is_active())
    }

    fn begin_epoch(&mut self, model: &MlpModel, epoch: usize) -> Result<()> {
        self.parts.iter_mut().try_for_each(|p| p.begin_epoch(model, epoch))
    }

    fn step(&mut self, model: &MlpModel, target_batch: &Matrix) -> Result<RegStep> {
        let mut total: Option<RegStep> = None;
        for p in self.parts.iter_mut().filter(|p| p.is_active()) {
            let s = p.step(model, target_batch)?;
            total = Some(match total {
                None => s,
                Some(t) => RegStep {
                    lautum: t.lautum.or(s.lautum),
                    mi: t.mi.or(s.mi),
                    loss_term: t.loss_term + s.loss_term,
                    grads: t.grads.iter().zip(&s.grads).map(|(a, b)| a.add(b)).collect(),
                },
            });
        }
        total.map_or_else(|| Standard.step(model, target_batch), Ok)
    }

    fn end_epoch(&mut self, epoch: usize) {
        self.parts.iter_mut().for_each(|p| p.end_epoch(epoch));
    }

    fn diagnostics(&self) -> RegDiagnostics {
        let mut d = RegDiagnostics::default();
        for p in &self.parts {
            let pd = p.diagnostics();
            d.lautum.extend(pd.lautum);
            d.mi.extend(pd.mi);
        }
        d
    }
}

pub type Factory = fn(&RegSetup) -> Result<Box<dyn Regularizer>>;

fn lautum_or_standard(setup: &RegSetup, lambda: f64) -> Result<Box<dyn Regularizer>> {
    if lambda == 0.0 {
        return Ok(Box::new(Standard));
    }
    Ok(Box::new(LautumRegularizer::new(setup, lambda)?))
}

fn mi_or_standard(setup: &RegSetup, lambda: f64) -> Result<Box<dyn Regularizer>> {
    if lambda == 0.0 {
        return Ok(Box::new(Standard));
    }
    Ok(Box::new(MiRegularizer::new(setup, lambda)?))
}

/// Regularizers by method name.
#[derive(Clone)]
pub struct RegularizerRegistry {
    factories: BTreeMap<String, Factory>,
}

impl RegularizerRegistry {
    pub fn empty() -> Self {
        RegularizerRegistry { factories: BTreeMap::new() }
    }

    /// `standard`, `lautum`, `mi` and `lautum+mi`. A regularizer whose `λ`
    /// is zero is replaced by `standard`, so it leaves training untouched.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("standard", |_| Ok(Box::new(Standard)));
        r.register("lautum", |s| lautum_or_standard(s, s.config.lambda_lautum));
        r.register("mi", |s| mi_or_standard(s, s.config.lambda_mi));
        r.register("lautum+mi", |s| {
            let parts = vec![lautum_or_standard(s, s.config.lambda_lautum)?, mi_or_standard(s, s.config.lambda_mi)?];
            Ok(Box::new(Composite::new("lautum+mi", parts)))
        });
        r
    }

    pub fn register(&mut self, name: &str, factory: Factory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, setup: &RegSetup) -> Result<Box<dyn Regularizer>> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| Error::config("method", format!("unknown method `{name}`")))?;
        f(setup)
    }
}
