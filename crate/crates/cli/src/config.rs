//! Strict JSON run configuration with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use cspt::data::{DomainKind, DomainSpec, Split};
use cspt::eval::StrategyArm;
use cspt::train::StageConfig;
use cspt::vit::VitConfig;

/// A configuration problem, always tied to the dotted key at fault.
#[derive(Debug)]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.reason)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: VitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<StageConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Master seed. Replaces `stage.seed` for stage commands, seeds corpora
    /// that do not carry their own seed, and drives reconstruction masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub corpora: Vec<CorpusSpec>,
}

/// One synthetic corpus to generate into `<out>/<id>/`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub id: String,
    pub domain: DomainKind,
    pub classes: usize,
    pub count: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Field overrides applied on top of the domain preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<Value>,
}

impl CorpusSpec {
    pub fn domain_label(&self) -> &'static str {
        match self.domain {
            DomainKind::Canonical => "canonical",
            DomainKind::Overhead => "overhead",
        }
    }

    /// The preset for `domain`, with `spec` overrides merged in.
    pub fn domain_spec(&self, image_size: usize, key: &str) -> Result<DomainSpec, ConfigError> {
        let preset = match self.domain {
            DomainKind::Canonical => DomainSpec::canonical(self.classes, image_size),
            DomainKind::Overhead => DomainSpec::overhead(self.classes, image_size),
        };
        let Some(overrides) = &self.spec else {
            return Ok(preset);
        };
        let Value::Object(fields) = overrides else {
            return Err(ConfigError::new(format!("{key}.spec"), "must be an object"));
        };
        let mut merged = serde_json::to_value(&preset).expect("domain spec serializes");
        for (k, v) in fields {
            merged[k.as_str()] = v.clone();
        }
        deserialize_at(merged, &format!("{key}.spec"))
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Strategy arms for `compare`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arms: Vec<StrategyArm>,
    /// Checkpoint read by `attnmap` and `reconstruct`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Corpus whose first images feed the figure emitters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Index of the image used by `attnmap`.
    #[serde(default)]
    pub index: usize,
    #[serde(default)]
    pub ref_patch: usize,
    /// Images in the reconstruction panel.
    #[serde(default = "default_panel_count")]
    pub count: usize,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    /// Comparison output directory scanned by `export-curves`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<PathBuf>,
}

fn default_panel_count() -> usize {
    4
}

fn default_mask_ratio() -> f64 {
    0.75
}

/// Deserializes `value`, reporting the failing dotted path under `root`.
pub fn deserialize_at<T: serde::de::DeserializeOwned>(value: Value, root: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let mut key = e.path().to_string();
        let inner = e.inner().to_string();
        // serde reports a missing field against its parent object.
        if let Some(field) = inner
            .strip_prefix("missing field `")
            .and_then(|s| s.split('`').next())
        {
            key = if key == "." { field.to_string() } else { format!("{key}.{field}") };
        }
        if key == "." {
            key.clear();
        }
        let key = match (root.is_empty(), key.is_empty()) {
            (true, true) => "config".to_string(),
            (true, false) => key,
            (false, true) => root.to_string(),
            (false, false) => format!("{root}.{key}"),
        };
        ConfigError::new(key, inner)
    })
}

/// Parses an override value: JSON when it parses, a bare string otherwise.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `key.path=value` to a JSON document, creating objects on the
/// way. Array elements are addressed by numeric segments.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::new(assignment, "override must look like key.path=value"))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(ConfigError::new(path, "malformed override path"));
    }
    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        node = match node {
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| ConfigError::new(path, format!("{seg:?} is not an array index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| ConfigError::new(path, format!("index {idx} out of range ({len} items)")))?
            }
            Value::Object(map) => map.entry(seg.to_string()).or_insert(if last { Value::Null } else { Value::Object(Default::default()) }),
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut()
                    .expect("just created")
                    .entry(seg.to_string())
                    .or_insert(Value::Object(Default::default()))
            }
            _ => return Err(ConfigError::new(path, format!("{seg:?} is inside a non-object value"))),
        };
    }
    *node = override_value(raw);
    Ok(())
}

/// Reads the config file, applies overrides and parses strictly.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    parse(doc)
}

pub fn parse(doc: Value) -> Result<RunConfig, ConfigError> {
    let config: RunConfig = deserialize_at(doc, "")?;
    config.model.validate().map_err(core_config_error)?;
    Ok(config)
}

/// Converts a core error raised by validation into a keyed config error.
pub fn core_config_error(e: cspt::error::Error) -> ConfigError {
    match e {
        cspt::error::Error::Config { key, reason } => ConfigError::new(key, reason),
        other => ConfigError::new("config", other.to_string()),
    }
}
