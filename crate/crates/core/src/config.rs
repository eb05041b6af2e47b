//! Experiment configuration: a JSON document with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::AdamConfig;
use crate::regularizer::RegularizerRegistry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Name of a registered regularizer: `standard`, `lautum`, `mi`, `lautum+mi`.
    pub method: String,
    pub lambda_lautum: f64,
    pub lambda_mi: f64,
    /// EMA decay of the Lautum covariances.
    pub alpha: f64,
    /// Clip threshold of the MI bound.
    pub tau: f64,
    pub batch_size: usize,
    pub pre_epochs: usize,
    pub post_epochs: usize,
    pub optimizer: AdamConfig,
    pub post_optimizer: AdamConfig,
    pub critic_optimizer: AdamConfig,
    /// Hidden widths of the classifier.
    pub hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub alt_critic_epochs: usize,
    pub alt_classifier_epochs: usize,
    pub seed: u64,
    pub labeled_target_count: usize,
    pub dataset: DatasetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: "standard".into(),
            lambda_lautum: 0.01,
            lambda_mi: 0.01,
            alpha: 0.999,
            tau: 5.0,
            batch_size: 50,
            pre_epochs: 50,
            post_epochs: 100,
            optimizer: AdamConfig::default(),
            post_optimizer: AdamConfig::default(),
            critic_optimizer: AdamConfig { lr: 1e-4, ..AdamConfig::default() },
            hidden: vec![64, 32],
            critic_hidden: vec![64, 64],
            alt_critic_epochs: 1,
            alt_classifier_epochs: 1,
            seed: 0,
            labeled_target_count: 10,
            dataset: DatasetConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// `synthetic` or `csv`.
    pub kind: String,
    pub dim: usize,
    pub classes: usize,
    pub n_source: usize,
    pub n_source_test: usize,
    /// Size of the target pool, test part included.
    pub n_target: usize,
    pub n_target_test: usize,
    pub style_strength: f64,
    pub mean_scale: f64,
    /// Seed of the generated data; the run seed when absent.
    pub data_seed: Option<u64>,
    pub source_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
    pub label_column: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: "synthetic".into(),
            dim: 16,
            classes: 5,
            n_source: 1000,
            n_source_test: 500,
            n_target: 1500,
            n_target_test: 500,
            style_strength: 1.5,
            mean_scale: 3.0,
            data_seed: None,
            source_path: None,
            target_path: None,
            label_column: "label".into(),
        }
    }
}

impl ExperimentConfig {
    /// The desk-scale synthetic benchmark (D=16, K=5, style 1.5). Fine-tuning
    /// length and regularization weights were picked on seeds 1000–1009,
    /// kept disjoint from evaluation seeds.
    pub fn benchmark() -> Self {
        ExperimentConfig { post_epochs: 60, lambda_lautum: 2.0, lambda_mi: 0.01, ..Default::default() }
    }

    /// Reads a JSON file, applies `KEY=VALUE` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::config("--config", e.to_string()))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(base, overrides)
    }

    pub fn from_value(doc: Value, overrides: &[String]) -> Result<Self> {
        let mut merged = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
        match doc {
            Value::Null => {}
            Value::Object(_) => merge(&mut merged, doc, "")?,
            _ => return Err(Error::config("--config", "top level must be an object")),
        }
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(|e| schema_error(&e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let registry = RegularizerRegistry::with_builtins();
        if !registry.contains(&self.method) {
            return Err(Error::config(
                "method",
                format!("unknown method `{}`; expected one of {}", self.method, registry.names().join(", ")),
            ));
        }
        for (field, v) in [("lambda_lautum", self.lambda_lautum), ("lambda_mi", self.lambda_mi)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(field, format!("must be a nonnegative number, got {v}")));
            }
        }
        if self.method == "lautum+mi" && !(self.lambda_lautum > 0.0 && self.lambda_mi > 0.0) {
            return Err(Error::config("method", "lautum+mi requires lambda_lautum > 0 and lambda_mi > 0"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", format!("must be positive, got {}", self.tau)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.pre_epochs == 0 {
            return Err(Error::config("pre_epochs", "must be positive"));
        }
        if self.alt_critic_epochs == 0 || self.alt_classifier_epochs == 0 {
            return Err(Error::config("alt_critic_epochs", "alternation counts must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "needs at least one positive width"));
        }
        if self.critic_hidden.contains(&0) {
            return Err(Error::config("critic_hidden", "widths must be positive"));
        }
        for (field, o) in [("optimizer", &self.optimizer), ("post_optimizer", &self.post_optimizer), ("critic_optimizer", &self.critic_optimizer)] {
            if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
                return Err(Error::config(field, "invalid Adam hyperparameters"));
            }
        }
        if self.labeled_target_count == 0 {
            return Err(Error::config("labeled_target_count", "must be positive"));
        }
        let d = &self.dataset;
        match d.kind.as_str() {
            "synthetic" => {
                if d.dim < 2 || d.classes < 2 {
                    return Err(Error::config("dataset.dim", "synthetic data needs dim >= 2 and classes >= 2"));
                }
                if d.n_source < 2 {
                    return Err(Error::config("dataset.n_source", "must be at least 2"));
                }
                if self.labeled_target_count + d.n_target_test > d.n_target {
                    return Err(Error::config("labeled_target_count", "labeled + test exceeds the target pool"));
                }
            }
            "csv" => {
                if d.source_path.is_none() || d.target_path.is_none() {
                    return Err(Error::config("dataset.source_path", "csv datasets need source_path and target_path"));
                }
            }
            other => return Err(Error::config("dataset.kind", format!("unknown dataset kind `{other}`"))),
        }
        Ok(())
    }

    /// `λ` actually applied by the selected method.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        match self.method.as_str() {
            "lautum" => (self.lambda_lautum, 0.0),
            "mi" => (0.0, self.lambda_mi),
            "lautum+mi" => (self.lambda_lautum, self.lambda_mi),
            _ => (0.0, 0.0),
        }
    }
}

fn schema_error(msg: &str) -> Error {
    // serde messages look like "unknown field `x`, expected ..." or "invalid type: ... at line"
    let field = msg.split('`').nth(1).unwrap_or("config").to_string();
    Error::config(field, msg.to_string())
}

fn merge(base: &mut Value, doc: Value, prefix: &str) -> Result<()> {
    match doc {
        Value::Object(map) => {
            let Value::Object(target) = base else {
                return Err(Error::config(prefix.trim_end_matches('.'), "expected a scalar, found an object"));
            };
            for (k, v) in map {
                let path = format!("{prefix}{k}");
                match target.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &format!("{path}."))?,
                    Some(slot) => *slot = v,
                    None => return Err(Error::config(path, "unknown key")),
                }
            }
            Ok(())
        }
        other => {
            *base = other;
            Ok(())
        }
    }
}

/// Applies `a.b.c=VALUE`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like KEY=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *doc;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(key))
            .ok_or_else(|| Error::config(path, "unknown key"))?;
    }
    *slot = value;
    Ok(())
}
