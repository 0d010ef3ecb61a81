//! Run configuration: defaults, a JSON config file, and dotted-key command
//! line overrides, resolved in that order (later wins). The resolved value
//! is a plain struct so a run can snapshot exactly what it executed with.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalProtocol;
use crate::training::{fingerprint, PipelineConfig};

/// Sampler and guidance settings for synthesis commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub ddim_steps: usize,
    /// How many grid steps of noise the coarse estimate receives before
    /// denoising starts.
    pub perturb_steps: usize,
    /// Guidance scale λ.
    pub lambda: f64,
    /// Start from pure noise instead of the perturbed coarse estimate.
    pub random_start: bool,
    pub seed: u64,
    pub prompt_template: String,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 20,
            perturb_steps: 20,
            lambda: 2.0,
            random_start: false,
            seed: 0,
            prompt_template: "a picture of <class_name>".into(),
        }
    }
}

impl InferenceConfig {
    pub fn to_options(&self) -> crate::diffusion::NvsOptions {
        crate::diffusion::NvsOptions {
            ddim_steps: self.ddim_steps,
            perturb_steps: self.perturb_steps,
            lambda: self.lambda,
            random_start: self.random_start,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ddim_steps == 0 {
            return Err(Error::Config("ddim_steps must be positive".into()));
        }
        if self.perturb_steps > self.ddim_steps {
            return Err(Error::Config(format!(
                "perturb_steps {} exceeds ddim_steps {}",
                self.perturb_steps, self.ddim_steps
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, fully resolved. Unknown keys anywhere in the
/// tree are rejected with the list of keys that would have been valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub eval: EvalProtocol,
    pub inference: InferenceConfig,
    /// Settings for pretraining the built-in denoiser when no external
    /// weights are supplied.
    pub pretrain: crate::diffusion::ToyTrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.eval.validate()?;
        self.inference.validate()?;
        if self.pretrain.steps == 0
            || !(self.pretrain.learning_rate.is_finite() && self.pretrain.learning_rate > 0.0)
        {
            return Err(Error::Config(
                "pretrain needs a positive step count and learning rate".into(),
            ));
        }
        Ok(())
    }
}

/// Parse a config file. Missing keys fall back to defaults; unknown keys
/// fail with the valid alternatives named in the message.
pub fn parse_run_config(bytes: &[u8], path: &Path) -> Result<RunConfig> {
    let config: RunConfig = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok(config)
}

/// Interpret an override value: JSON when it parses (numbers, booleans,
/// arrays, quoted strings), a bare string otherwise.
fn parse_override_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

fn object_keys(value: &serde_json::Value) -> String {
    match value.as_object() {
        Some(map) => {
            let keys: Vec<&str> = map.keys().map(String::as_str).collect();
            keys.join(", ")
        }
        None => String::new(),
    }
}

/// Apply one `dotted.key=value` override in place.
pub fn apply_override(tree: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw_value) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override {assignment:?} must have the form dotted.key=value"
        ))
    })?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {assignment:?} has an empty key")));
    }
    let segments: Vec<&str> = key.split('.').collect();
    let mut node = &mut *tree;
    for (depth, segment) in segments.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "key {key:?} descends into {:?}, which is not a group",
                segments[..depth].join(".")
            ))
        })?;
        if !map.contains_key(*segment) {
            let scope = if depth == 0 {
                "the top level".to_string()
            } else {
                format!("{:?}", segments[..depth].join("."))
            };
            let mut valid: Vec<&str> = map.keys().map(String::as_str).collect();
            valid.sort_unstable();
            return Err(Error::Config(format!(
                "unknown configuration key {key:?}: {segment:?} does not exist under {scope}; \
                 valid keys: {}",
                valid.join(", ")
            )));
        }
        node = map.get_mut(*segment).expect("checked just above");
    }
    if node.is_object() {
        return Err(Error::Config(format!(
            "key {key:?} names a group, not a value; valid keys inside it: {}",
            object_keys(node)
        )));
    }
    *node = parse_override_value(raw_value);
    Ok(())
}

/// Resolve the final configuration: defaults, then the file (if any), then
/// overrides, then validation.
pub fn resolve_config(
    file: Option<(&[u8], &Path)>,
    overrides: &[String],
) -> Result<RunConfig> {
    let base = match file {
        Some((bytes, path)) => parse_run_config(bytes, path)?,
        None => RunConfig::default(),
    };
    let mut tree = serde_json::to_value(&base).expect("config serializes");
    for assignment in overrides {
        apply_override(&mut tree, assignment)?;
    }
    let config: RunConfig = serde_json::from_value(tree)
        .map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Provenance record written next to every command's outputs: the resolved
/// configuration, the code version, and a hash of every input file. No
/// timestamps, so identical runs produce identical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub code_version: String,
    pub config: RunConfig,
    /// Input label → SHA-256 of the file's bytes.
    pub input_hashes: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(command: &str, code_version: &str, config: RunConfig) -> Self {
        Self {
            command: command.to_string(),
            code_version: code_version.to_string(),
            config,
            input_hashes: BTreeMap::new(),
        }
    }

    /// Hash a file's bytes under `label`.
    pub fn add_input(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.input_hashes.insert(label.to_string(), fingerprint(&bytes));
        Ok(())
    }

    /// Write the record as `run.json` inside `dir`.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run.json");
        let json = serde_json::to_string_pretty(self).expect("record serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
