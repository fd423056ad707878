//! Run configuration: one JSON document holding every hyperparameter.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::TrainError;
use crate::data::{AugmentConfig, DatasetSpec, Family};
use crate::model::ModelConfig;
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub precision: Precision,
    pub optim: OptimConfig,
    pub model: ModelConfig,
    pub data: DatasetSpec,
    pub augment: AugmentConfig,
    /// Open choices made by this implementation, carried with every output.
    pub assumptions: Vec<String>,
}

fn default_assumptions() -> Vec<String> {
    vec![
        "constant learning rate (no schedule)".into(),
        "AdamW weight decay 0.01, betas (0.9, 0.999)".into(),
        "margin-free logits at inference".into(),
        "band masking disabled at evaluation".into(),
    ]
}

impl RunConfig {
    /// Full-scale hyperparameters (expressible, not trainable on a desk).
    pub fn full_scale() -> Self {
        RunConfig {
            seed: 0,
            epochs: 3,
            batch_size: 64,
            precision: Precision::F64,
            optim: OptimConfig::default(),
            model: ModelConfig {
                in_channels: 3,
                image_size: 224,
                patch_size: 14,
                embed_dim: 1024,
                depth: 24,
                heads: 16,
                mlp_ratio: 4,
                lora_rank: 8,
                lora_scale: 16.0,
                stem_c1: 64,
                stem_c2: 256,
                rho: 0.4,
                mask_patch: 8,
                freq_dropout: 0.1,
                gate_init: 0.01,
                scale: 30.0,
                margin: 0.35,
                variant: "full".into(),
            },
            data: DatasetSpec {
                n_train: 2000,
                n_eval: 500,
                image_size: 224,
                train_family: Family::A,
                eval_families: vec![Family::A, Family::B],
                amplitude: 0.1,
                seed: 0,
            },
            augment: AugmentConfig::default(),
            assumptions: default_assumptions(),
        }
    }

    /// Desk-scale default: 64×64 images, D=128, eight blocks.
    pub fn desk() -> Self {
        let mut c = Self::full_scale();
        c.optim.lr = 3e-4;
        c.model.image_size = 64;
        c.model.patch_size = 8;
        c.model.embed_dim = 128;
        c.model.depth = 8;
        c.model.heads = 4;
        c.data.image_size = 64;
        c
    }

    /// Small configuration for the pinned toy experiments.
    pub fn toy() -> Self {
        let mut c = Self::desk();
        c.batch_size = 32;
        c.model.patch_size = 16;
        c.model.embed_dim = 32;
        c.model.depth = 4;
        c.model.heads = 2;
        c.model.mlp_ratio = 2;
        c.model.lora_rank = 4;
        c.model.stem_c1 = 16;
        c.model.stem_c2 = 32;
        c
    }

    pub fn preset(name: &str) -> Result<Self, TrainError> {
        match name {
            "full-scale" => Ok(Self::full_scale()),
            "desk" => Ok(Self::desk()),
            "toy" => Ok(Self::toy()),
            other => Err(TrainError::Config(format!("unknown preset '{other}' (full-scale, desk, toy)"))),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad(format!("betas must lie in [0, 1): {} {}", o.beta1, o.beta2));
        }
        let m = &self.model;
        if !(0.0..=1.0).contains(&m.rho) {
            return bad(format!("rho {} outside [0, 1]", m.rho));
        }
        if !(0.0..1.0).contains(&m.freq_dropout) {
            return bad(format!("dropout {} outside [0, 1)", m.freq_dropout));
        }
        if m.lora_rank == 0 {
            return bad("lora_rank must be positive".into());
        }
        if m.image_size != self.data.image_size {
            return bad(format!(
                "model image size {} differs from data image size {}",
                m.image_size, self.data.image_size
            ));
        }
        m.parsed_variant()?;
        m.vit().validate()?;
        self.data.validate()?;
        let a = &self.augment;
        if !(0.0 < a.scale_min && a.scale_min <= a.scale_max && a.scale_max <= 1.0) {
            return bad(format!("crop scale range [{}, {}] invalid", a.scale_min, a.scale_max));
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_value(v: Value) -> Result<Self, TrainError> {
        serde_json::from_value(v).map_err(|e| TrainError::Config(e.to_string()))
    }

    /// Applies `key=value` overrides; see [`apply_override`].
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, TrainError> {
        let mut v = self.to_value();
        for o in overrides {
            apply_override(&mut v, o.as_ref())?;
        }
        let c = Self::from_value(v)?;
        c.validate()?;
        Ok(c)
    }
}

fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if child.is_object() {
                leaf_paths(child, &path, out);
            } else {
                out.push(path);
            }
        }
    }
}

/// Sets one dotted key, e.g. `model.rho=0.4` or `optim.lr=1e-3`. A key with
/// no exact match may name a unique leaf anywhere (`rho=0.4`). The value is
/// parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), TrainError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| TrainError::Config(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    let mut leaves = Vec::new();
    leaf_paths(root, "", &mut leaves);
    let path = if leaves.iter().any(|p| p == key) {
        key.to_string()
    } else {
        let suffix = format!(".{key}");
        let hits: Vec<&String> = leaves.iter().filter(|p| p.ends_with(&suffix)).collect();
        match hits[..] {
            [one] => one.clone(),
            [] => return Err(TrainError::Config(format!("unknown config key '{key}'"))),
            _ => {
                return Err(TrainError::Config(format!(
                    "ambiguous config key '{key}': {}",
                    hits.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                )))
            }
        }
    };
    let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut slot = &mut *root;
    for part in path.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| TrainError::Config(format!("unknown config key '{path}'")))?;
    }
    *slot = value;
    Ok(())
}
