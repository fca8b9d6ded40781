use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{DEFAULT_JITTER, SWISS_DEFAULT_SIGMA};
use crate::heads::train::TrainSchedule;
use crate::heads::{HeadConfig, HeadKind};
use crate::mar::{DecodeConfig, MarConfig, MarSchedule};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("override '{0}' is not of the form key=value")]
    BadOverride(String),
    #[error("invalid value for '{key}': {detail}")]
    Invalid { key: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub swiss_sigma: f64,
    pub jitter: f64,
    /// Training traces per class for the sequence task.
    pub train_per_class: usize,
    pub heldout_per_class: usize,
    pub data_seed: u64,
    pub heldout_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            swiss_sigma: SWISS_DEFAULT_SIGMA,
            jitter: DEFAULT_JITTER,
            train_per_class: 1000,
            heldout_per_class: 200,
            data_seed: 1,
            heldout_seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarSection {
    pub model: MarConfig,
    /// The teacher shares the backbone shape; its head settings come from
    /// `model.head` with this kind.
    pub teacher_kind: HeadKind,
    pub teacher: MarSchedule,
    pub teacher_seed: u64,
    pub teacher_head_steps: usize,
    pub student: MarSchedule,
}

impl Default for MarSection {
    fn default() -> Self {
        Self {
            model: MarConfig::default(),
            teacher_kind: HeadKind::Diffusion,
            teacher: MarSchedule {
                steps: 3000,
                ..MarSchedule::default()
            },
            teacher_seed: 1000,
            teacher_head_steps: 100,
            student: MarSchedule {
                steps: 1000,
                lambda: 10.0,
                ..MarSchedule::default()
            },
        }
    }
}

impl MarSection {
    pub fn teacher_config(&self) -> MarConfig {
        let mut cfg = self.model.clone();
        cfg.head.kind = self.teacher_kind;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Points drawn per toy sampler evaluation.
    pub samples: usize,
    /// Decoded sequences per class in sequence evaluations.
    pub eval_per_class: usize,
    pub seeds: Vec<u64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            samples: 1024,
            eval_per_class: 100,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

/// Everything a command needs; serialised in full into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub data: DataConfig,
    pub head: HeadConfig,
    pub train: TrainSchedule,
    pub mar: MarSection,
    pub decode: DecodeConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: "runs".into(),
            data: DataConfig::default(),
            // Four samples per context: clearly better one-step fits than two
            // at this width, for twice the head evaluations.
            head: HeadConfig {
                width: 64,
                m: 4,
                meanflow_adaptive_p: 0.5,
                ..HeadConfig::default()
            },
            train: TrainSchedule {
                steps: 3000,
                ..TrainSchedule::default()
            },
            mar: MarSection::default(),
            decode: DecodeConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Overlays `doc` onto `base`: objects merge key by key, anything else
/// replaces. Keys absent from `base` are rejected.
fn merge(base: &mut Value, doc: Value, path: &str) -> Result<(), ConfigError> {
    match (base, doc) {
        (Value::Object(b), Value::Object(d)) => {
            for (k, v) in d {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v, &key)?,
                    Some(slot) => *slot = v,
                    None => return Err(ConfigError::UnknownKey(key)),
                }
            }
            Ok(())
        }
        (b, d) => {
            *b = d;
            Ok(())
        }
    }
}

/// Sets the dotted `key` in `root`; every path component must already exist.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let child = obj
            .get_mut(*part)
            .ok_or_else(|| ConfigError::UnknownKey(parts[..=i].join(".")))?;
        if i + 1 == parts.len() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    Err(ConfigError::UnknownKey(key.to_string()))
}

impl RunConfig {
    /// Defaults, overlaid with an optional JSON document, then `key=value`
    /// overrides in order.
    pub fn resolve(json: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value = RunConfig::default().to_json_value();
        if let Some(text) = json {
            let doc: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
            merge(&mut value, doc, "")?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            let k = k.trim();
            set_path(&mut value, k, parse_value(v.trim()))?;
            // Re-parse after each override so type errors name their key.
            serde_json::from_value::<RunConfig>(value.clone()).map_err(|e| ConfigError::Invalid {
                key: k.to_string(),
                detail: e.to_string(),
            })?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, e: String| ConfigError::Invalid {
            key: key.into(),
            detail: e,
        };
        self.head.validate().map_err(|e| invalid("head", e.to_string()))?;
        self.mar.model.validate().map_err(|e| invalid("mar.model", e.to_string()))?;
        if self.metrics.seeds.is_empty() {
            return Err(invalid("metrics.seeds", "at least one seed is required".into()));
        }
        if self.metrics.samples < 2 {
            return Err(invalid("metrics.samples", "need at least two samples".into()));
        }
        if self.train.batch == 0 {
            return Err(invalid("train.batch", "must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the compact JSON serialisation.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_are_named() {
        let cfg = RunConfig::resolve(None, &["train.lr=0.01".into(), "head.kind=flow".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.head.kind, HeadKind::Flow);
        assert_eq!(
            RunConfig::resolve(None, &["train.bogus=1".into()]),
            Err(ConfigError::UnknownKey("train.bogus".into()))
        );
        assert!(matches!(
            RunConfig::resolve(None, &["train.lr=fast".into()]),
            Err(ConfigError::Invalid { key, .. }) if key == "train.lr"
        ));
        assert!(matches!(
            RunConfig::resolve(None, &["train.lr".into()]),
            Err(ConfigError::BadOverride(_))
        ));
    }

    #[test]
    fn json_documents_merge_onto_defaults() {
        assert_eq!(
            RunConfig::resolve(Some(r#"{"seed": 3, "head": {"extra": 1}}"#), &[]),
            Err(ConfigError::UnknownKey("head.extra".into()))
        );
        let cfg = RunConfig::resolve(Some(r#"{"seed": 3, "head": {"kind": "meanflow"}}"#), &[]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.head.kind, HeadKind::Meanflow);
        assert_eq!(cfg.head.width, RunConfig::default().head.width);
        assert!(RunConfig::resolve(Some("[1, 2]"), &[]).is_err());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = RunConfig::default();
        assert_eq!(a.digest(), RunConfig::default().digest());
        assert_eq!(a.digest().len(), 64);
        let b = RunConfig {
            seed: 2,
            ..RunConfig::default()
        };
        assert_ne!(a.digest(), b.digest());
        let back: RunConfig = serde_json::from_str(&a.to_pretty_json()).unwrap();
        assert_eq!(back, a);
    }
}
