//! Run configuration: JSON file plus `--section.key value` overrides.
//!
//! Keys live in five sections: `model`, `ttt`, `train`, `induction` and
//! `recall`. A file may nest them (`{"ttt": {"eta": 0.1}}`) or use dotted
//! keys (`{"ttt.eta": 0.1}`); both forms can be mixed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use iptt_core::experiments::{InductionSettings, RecallProtocol};
use iptt_core::model::ModelConfig;
use iptt_core::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {0:?} is a section, not a value")]
    Section(String),
    #[error("bad value for {key:?}: {message}")]
    Value { key: String, message: String },
    #[error("config file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub induction: InductionSettings,
    pub recall: RecallProtocol,
}

/// `ttt.d_model` and `ttt.d_ff` follow the model and are not settable.
const DERIVED_TTT_KEYS: [&str; 2] = ["d_model", "d_ff"];

impl RunConfig {
    /// The sectioned key tree as JSON.
    pub fn to_tree(&self) -> Value {
        let mut model = serde_json::to_value(&self.model).expect("model config serializes");
        let mut ttt = model.as_object_mut().and_then(|m| m.remove("ttt")).expect("ttt section");
        for k in DERIVED_TTT_KEYS {
            ttt.as_object_mut().expect("ttt object").remove(k);
        }
        let mut root = Map::new();
        root.insert("model".into(), model);
        root.insert("ttt".into(), ttt);
        root.insert("train".into(), serde_json::to_value(&self.train).expect("train config serializes"));
        root.insert("induction".into(), serde_json::to_value(&self.induction).expect("induction settings serialize"));
        root.insert("recall".into(), serde_json::to_value(&self.recall).expect("recall protocol serializes"));
        Value::Object(root)
    }

    fn from_tree(mut tree: Value) -> Result<Self> {
        let root = tree.as_object_mut().expect("root object");
        let mut ttt = root.remove("ttt").expect("ttt section");
        for k in DERIVED_TTT_KEYS {
            ttt.as_object_mut().expect("ttt object").insert(k.into(), Value::from(0));
        }
        root.get_mut("model").and_then(Value::as_object_mut).expect("model section").insert("ttt".into(), ttt);
        let section = |name: &str, tree: &Value| tree.get(name).cloned().expect("section present");
        let value_err = |name: &str| {
            let name = name.to_string();
            move |e: serde_json::Error| ConfigError::Value {
                key: name.clone(),
                message: e.to_string(),
            }
        };
        let mut model: ModelConfig = serde_json::from_value(section("model", &tree)).map_err(value_err("model"))?;
        model.sync_dims();
        Ok(Self {
            model,
            train: serde_json::from_value(section("train", &tree)).map_err(value_err("train"))?,
            induction: serde_json::from_value(section("induction", &tree)).map_err(value_err("induction"))?,
            recall: serde_json::from_value(section("recall", &tree)).map_err(value_err("recall"))?,
        })
    }

    /// Every settable key with its default rendered as JSON.
    pub fn keys(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        leaves(&self.to_tree(), String::new(), &mut out);
        out
    }

    /// Cross-field checks on top of each section's own validation.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.recall.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let s = &self.induction;
        if s.vocab < 2 || s.d_model == 0 || s.d_ff == 0 || s.prior_len == 0 {
            return Err(ConfigError::Invalid("induction.vocab must be >= 2 and induction.d_model, d_ff, prior_len >= 1".into()));
        }
        Ok(())
    }
}

fn leaves(v: &Value, prefix: String, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(child, key, out);
            }
        }
        _ => {
            out.insert(prefix, v.to_string());
        }
    }
}

/// Writes `value` at `path` in `tree`, descending into objects when the
/// value is itself an object.
fn set(tree: &mut Value, path: &[&str], value: Value, full: &str) -> Result<()> {
    let Some((head, rest)) = path.split_first() else {
        return merge(tree, value, full);
    };
    let node = tree
        .as_object_mut()
        .and_then(|m| m.get_mut(*head))
        .ok_or_else(|| ConfigError::UnknownKey(full.to_string()))?;
    set(node, rest, value, full)
}

fn merge(node: &mut Value, value: Value, full: &str) -> Result<()> {
    let is_section = matches!(node, Value::Object(m) if !m.is_empty());
    match (is_section, value) {
        (true, Value::Object(entries)) => {
            for (k, v) in entries {
                let key = if full.is_empty() { k.clone() } else { format!("{full}.{k}") };
                let parts: Vec<&str> = k.split('.').collect();
                set(node, &parts, v, &key)?;
            }
            Ok(())
        }
        (true, _) => Err(ConfigError::Section(full.to_string())),
        (false, v) => {
            *node = v;
            Ok(())
        }
    }
}

/// Parses a flag value: JSON when it parses, otherwise a plain string.
pub fn flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Defaults, then `text` (a JSON object), then `overrides` in order.
pub fn parse_config(text: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut tree = RunConfig::default().to_tree();
    if let Some(text) = text {
        let v: Value = serde_json::from_str(text)?;
        if !v.is_object() {
            return Err(ConfigError::Invalid("config file must hold a JSON object".into()));
        }
        merge(&mut tree, v, "")?;
    }
    for (key, raw) in overrides {
        let parts: Vec<&str> = key.split('.').collect();
        set(&mut tree, &parts, flag_value(raw), key)?;
    }
    let config = RunConfig::from_tree(tree)?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = path.map(std::fs::read_to_string).transpose()?;
    parse_config(text.as_deref(), overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = parse_config(Some("{}"), &[]).unwrap();
        assert_eq!(c, parse_config(None, &[]).unwrap());
        let mut d = RunConfig::default();
        d.model.sync_dims();
        assert_eq!(c, d);
    }

    #[test]
    fn tree_roundtrip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_tree(c.to_tree()).unwrap(), c);
        let keys = c.keys();
        assert!(keys.contains_key("ttt.eta"));
        assert!(keys.contains_key("train.init.std"));
        assert!(!keys.contains_key("ttt.d_model"));
        assert!(!keys.contains_key("model.ttt"));
    }

    #[test]
    fn nested_and_flat_agree() {
        let a = parse_config(Some(r#"{"ttt": {"eta": 0.5}, "train": {"init": {"std": 0.1}}}"#), &[]).unwrap();
        let b = parse_config(Some(r#"{"ttt.eta": 0.5, "train.init.std": 0.1}"#), &[]).unwrap();
        let c = parse_config(Some(r#"{"train": {"init.std": 0.1}}"#), &[("ttt.eta".into(), "0.5".into())]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.model.ttt.eta, 0.5);
    }
}
