use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::nn::Architecture;
use crate::objectives::{TransferKind, TransferLossConfig};
use crate::optim::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Uniform source and target batches.
    Random,
    /// Class-stratified source, uniform target.
    SourceBalanced,
    /// Class-aligned batches stratified by target pseudo-labels.
    Aligned,
    /// Class-aligned batches stratified by the hidden target labels.
    AlignedOracle,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Random => "random",
            SamplerKind::SourceBalanced => "source_balanced",
            SamplerKind::Aligned => "aligned",
            SamplerKind::AlignedOracle => "aligned_oracle",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown sampler {s:?}"))
    }
}

/// Layer widths; input and class counts come from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            feature_dim: 64,
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            num_classes,
            head_hidden: self.head_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub sampler: SamplerKind,
    /// Classes per batch (N); `None` means every class.
    pub classes_per_batch: Option<usize>,
    /// Examples per class and domain (K). The random sampler draws N*K rows.
    pub per_class: usize,
    pub objective: TransferLossConfig,
    pub sgd: SgdConfig,
    pub refresh_period: usize,
    /// Steps at the start during which the aligned samplers fall back to
    /// source-balanced batches, so the first pseudo-labels come from a
    /// classifier that has seen every source class.
    pub warmup_steps: usize,
    pub eval_period: usize,
    /// Fewer live pseudo-label classes than this aborts training.
    pub min_live_classes: usize,
    pub model: ModelConfig,
    /// Alignment distribution weights; `None` means uniform.
    pub alignment: Option<Vec<f64>>,
    /// Log the exact label-oracle divergence of the current batch at eval steps.
    pub probe_divergence: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 5000,
            sampler: SamplerKind::Aligned,
            classes_per_batch: None,
            per_class: 1,
            objective: TransferLossConfig::new(TransferKind::MddMasked),
            sgd: SgdConfig::default(),
            refresh_period: 20,
            warmup_steps: 500,
            eval_period: 500,
            min_live_classes: 1,
            model: ModelConfig::default(),
            alignment: None,
            probe_divergence: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} config error(s): {}", self.0.len(), self.0.join("; "))
    }
}

impl std::error::Error for ConfigErrors {}

impl TrainConfig {
    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("steps", self.steps),
            ("per_class", self.per_class),
            ("refresh_period", self.refresh_period),
            ("eval_period", self.eval_period),
            ("model.feature_dim", self.model.feature_dim),
            ("model.head_hidden", self.model.head_hidden),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.classes_per_batch == Some(0) {
            errs.push("classes_per_batch must be positive".into());
        }
        if self.model.hidden.contains(&0) {
            errs.push("model.hidden widths must be positive".into());
        }
        if let Err(e) = self.sgd.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.objective.validate() {
            errs.extend(e);
        }
        if let Some(p) = &self.alignment {
            if p.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || p.iter().sum::<f64>() <= 0.0 {
                errs.push("alignment weights must be nonnegative with positive sum".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errs))
        }
    }

    /// Checks that depend on the data.
    pub fn validate_for(&self, num_classes: usize) -> Result<(), ConfigErrors> {
        let mut errs = match self.validate() {
            Ok(()) => Vec::new(),
            Err(e) => e.0,
        };
        if let Some(n) = self.classes_per_batch {
            if n > num_classes {
                errs.push(format!("classes_per_batch {n} exceeds {num_classes} classes"));
            }
        }
        if let Some(p) = &self.alignment {
            if p.len() != num_classes {
                errs.push(format!("alignment has {} weights for {num_classes} classes", p.len()));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errs))
        }
    }

    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Builds a config from dotted keys layered over the defaults. Unknown
    /// keys and type errors are all reported.
    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self, ConfigErrors> {
        Self::default().with_overrides(flat)
    }

    /// Applies dotted-key overrides.
    pub fn with_overrides(&self, overrides: &BTreeMap<String, Value>) -> Result<Self, ConfigErrors> {
        let mut flat = self.to_flat();
        // a new objective kind replaces the variant-specific keys of the old one
        if overrides.contains_key("objective.kind") {
            flat.retain(|k, _| {
                !k.starts_with("objective.") || k == "objective.eta" || k == "objective.gamma"
            });
        }
        for (k, v) in overrides {
            flat.insert(k.clone(), v.clone());
        }
        let cfg: TrainConfig = serde_json::from_value(unflatten(&flat))
            .map_err(|e| ConfigErrors(vec![e.to_string()]))?;
        let known = cfg.to_flat();
        let unknown: Vec<String> = overrides
            .keys()
            .filter(|k| !known.contains_key(*k))
            .map(|k| format!("unknown key {k:?}"))
            .collect();
        if !unknown.is_empty() {
            return Err(ConfigErrors(unknown));
        }
        Ok(cfg)
    }
}

/// Nested JSON objects to `a.b.c` keys; arrays and scalars are leaves.
pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn go(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(&key, x, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    go("", v, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let parts: Vec<&str> = k.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            if !entry.is_object() {
                *entry = Value::Object(Map::new());
            }
            node = entry.as_object_mut().expect("object");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}
