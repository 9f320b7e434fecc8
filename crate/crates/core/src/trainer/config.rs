use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::quantizers::{Quantizer, ScqConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    Vq,
    /// Nearest-code VQ with dead-code replacement.
    VqReplace,
    Gumbel,
    Rq,
    ScqFast,
    ScqExact,
    Identity,
}

impl QuantizerKind {
    pub fn is_scq(self) -> bool {
        matches!(self, QuantizerKind::ScqFast | QuantizerKind::ScqExact)
    }
}

/// Everything a training run depends on. Loaded from JSON; every field but
/// `quantizer`, `seed` and `dataset` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub quantizer: QuantizerKind,
    /// `K`
    pub codebook_size: usize,
    /// `F`
    pub latent_dim: usize,
    pub lambda: f64,
    /// Projection rounds `m` of the fast SCQ relaxation.
    pub steps: usize,
    pub final_clamp: bool,
    pub beta: f64,
    /// Residual quantization depth.
    pub depth: usize,
    /// Gumbel temperature (fixed, not annealed).
    pub tau: f64,
    /// Whether the SCQ variants add the commitment term to the loss.
    pub commit: bool,
    /// Steps without assignment before a code is replaced (`vq_replace`).
    pub replacement_threshold: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dataset: String,
    /// Separate test file; otherwise the tail `test_fraction` of `dataset`.
    pub test_dataset: Option<String>,
    pub test_fraction: f64,
    pub output_dir: String,
    pub model: ModelConfig,
    pub log_interval: u64,
    /// Record elapsed milliseconds; off keeps metrics byte-reproducible.
    pub wall_clock: bool,
}

const FIELDS: &[&str] = &[
    "quantizer",
    "codebook_size",
    "latent_dim",
    "lambda",
    "steps",
    "final_clamp",
    "beta",
    "depth",
    "tau",
    "commit",
    "replacement_threshold",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "dataset",
    "test_dataset",
    "test_fraction",
    "output_dir",
    "model",
    "log_interval",
    "wall_clock",
];

const REQUIRED: &[&str] = &["quantizer", "seed", "dataset"];

impl TrainConfig {
    /// A config with defaults for everything optional.
    pub fn new(quantizer: QuantizerKind, seed: u64, dataset: impl Into<String>) -> Self {
        TrainConfig {
            quantizer,
            codebook_size: 64,
            latent_dim: 8,
            lambda: 0.1,
            steps: 20,
            final_clamp: false,
            beta: 0.25,
            depth: 2,
            tau: 1.0,
            commit: true,
            replacement_threshold: 100,
            learning_rate: 2e-4,
            batch_size: 32,
            epochs: 5,
            seed,
            dataset: dataset.into(),
            test_dataset: None,
            test_fraction: 0.125,
            output_dir: "out".into(),
            model: ModelConfig::default(),
            log_interval: 50,
            wall_clock: false,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Schema(vec![format!("/: invalid JSON: {e}")]))?;
        Self::from_value(&value)
    }

    /// Parses and validates, reporting every problem with its JSON pointer.
    pub fn from_value(value: &Value) -> Result<Self> {
        let Some(obj) = value.as_object() else {
            return Err(Error::Schema(vec!["/: expected a JSON object".into()]));
        };
        let mut issues = Vec::new();
        for key in obj.keys() {
            if !FIELDS.contains(&key.as_str()) {
                issues.push(format!("/{key}: unknown field"));
            }
        }
        for key in REQUIRED {
            if !obj.contains_key(*key) {
                issues.push(format!("/{key}: required field missing"));
            }
        }
        let mut cfg = TrainConfig::new(QuantizerKind::Vq, 0, "");
        read_fields(obj, &mut cfg, &mut issues);
        if issues.is_empty() {
            issues.extend(cfg.range_issues());
        }
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Schema(issues))
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; values parse as JSON, falling back to
    /// a plain string. Dotted keys reach into `model`.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = self.to_value();
        for (key, raw) in overrides {
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(m) => m.entry(part.to_string()).or_insert(Value::Null),
                    _ => return Err(Error::Schema(vec![format!("/{}: not an object", key.replace('.', "/"))])),
                };
            }
            *slot = parsed;
        }
        Self::from_value(&value)
    }

    fn range_issues(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut need = |ok: bool, ptr: &str, what: &str| {
            if !ok {
                v.push(format!("{ptr}: {what}"));
            }
        };
        need(self.codebook_size >= 1, "/codebook_size", "must be at least 1");
        need(self.latent_dim >= 1, "/latent_dim", "must be at least 1");
        need(self.lambda.is_finite() && self.lambda >= 0.0, "/lambda", "must be finite and >= 0");
        if self.quantizer == QuantizerKind::ScqFast {
            need(self.lambda > 0.0, "/lambda", "scq_fast needs lambda > 0");
        }
        need(self.steps >= 1, "/steps", "must be at least 1");
        need((0.0..=1.0).contains(&self.beta), "/beta", "must lie in [0, 1]");
        need(self.depth >= 1, "/depth", "must be at least 1");
        need(self.tau.is_finite() && self.tau > 0.0, "/tau", "must be > 0");
        need(self.replacement_threshold >= 1, "/replacement_threshold", "must be at least 1");
        need(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "/learning_rate",
            "must be > 0",
        );
        need(self.batch_size >= 1, "/batch_size", "must be at least 1");
        need(
            self.test_fraction > 0.0 && self.test_fraction < 1.0,
            "/test_fraction",
            "must lie in (0, 1)",
        );
        need(!self.dataset.is_empty(), "/dataset", "must not be empty");
        need(self.log_interval >= 1, "/log_interval", "must be at least 1");
        if let Err(e) = self.model.validate() {
            v.push(format!("/model: {e}"));
        }
        v
    }

    pub fn quantizer(&self) -> Quantizer {
        let beta = self.beta;
        match self.quantizer {
            QuantizerKind::Vq | QuantizerKind::VqReplace => Quantizer::Vq { beta },
            QuantizerKind::Gumbel => Quantizer::Gumbel { beta, tau: self.tau },
            QuantizerKind::Rq => Quantizer::Residual {
                beta,
                depth: self.depth,
            },
            QuantizerKind::ScqFast => Quantizer::ScqFast {
                beta,
                config: ScqConfig {
                    lambda: self.lambda,
                    steps: self.steps,
                    final_clamp: self.final_clamp,
                },
                commit: self.commit,
            },
            QuantizerKind::ScqExact => Quantizer::ScqExact {
                beta,
                lambda: self.lambda,
                commit: self.commit,
            },
            QuantizerKind::Identity => Quantizer::Identity,
        }
    }
}

fn read_fields(obj: &Map<String, Value>, cfg: &mut TrainConfig, issues: &mut Vec<String>) {
    fn take<T: serde::de::DeserializeOwned>(
        obj: &Map<String, Value>,
        key: &str,
        slot: &mut T,
        issues: &mut Vec<String>,
    ) {
        if let Some(v) = obj.get(key) {
            match T::deserialize(v) {
                Ok(x) => *slot = x,
                Err(e) => issues.push(format!("/{key}: {e}")),
            }
        }
    }
    take(obj, "quantizer", &mut cfg.quantizer, issues);
    take(obj, "codebook_size", &mut cfg.codebook_size, issues);
    take(obj, "latent_dim", &mut cfg.latent_dim, issues);
    take(obj, "lambda", &mut cfg.lambda, issues);
    take(obj, "steps", &mut cfg.steps, issues);
    take(obj, "final_clamp", &mut cfg.final_clamp, issues);
    take(obj, "beta", &mut cfg.beta, issues);
    take(obj, "depth", &mut cfg.depth, issues);
    take(obj, "tau", &mut cfg.tau, issues);
    take(obj, "commit", &mut cfg.commit, issues);
    take(obj, "replacement_threshold", &mut cfg.replacement_threshold, issues);
    take(obj, "learning_rate", &mut cfg.learning_rate, issues);
    take(obj, "batch_size", &mut cfg.batch_size, issues);
    take(obj, "epochs", &mut cfg.epochs, issues);
    take(obj, "seed", &mut cfg.seed, issues);
    take(obj, "dataset", &mut cfg.dataset, issues);
    take(obj, "test_dataset", &mut cfg.test_dataset, issues);
    take(obj, "test_fraction", &mut cfg.test_fraction, issues);
    take(obj, "output_dir", &mut cfg.output_dir, issues);
    take(obj, "log_interval", &mut cfg.log_interval, issues);
    take(obj, "wall_clock", &mut cfg.wall_clock, issues);
    if let Some(m) = obj.get("model") {
        match m.as_object() {
            None => issues.push("/model: expected an object".into()),
            Some(inner) => {
                for key in inner.keys() {
                    if !["hidden", "residual", "res_blocks", "downsample"].contains(&key.as_str()) {
                        issues.push(format!("/model/{key}: unknown field"));
                    }
                }
                let mut model = cfg.model;
                let before = issues.len();
                for (key, slot) in [
                    ("hidden", &mut model.hidden),
                    ("residual", &mut model.residual),
                    ("res_blocks", &mut model.res_blocks),
                    ("downsample", &mut model.downsample),
                ] {
                    if let Some(v) = inner.get(key) {
                        match usize::deserialize(v) {
                            Ok(x) => *slot = x,
                            Err(e) => issues.push(format!("/model/{key}: {e}")),
                        }
                    }
                }
                if issues.len() == before {
                    cfg.model = model;
                }
            }
        }
    }
}
