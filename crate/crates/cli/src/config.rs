use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fadenoise::align::AlignParams;
use fadenoise::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything a run can be configured with. Each subcommand reads its section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub array: ArrayConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub align: AlignParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayConfig {
    pub models: usize,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self { models: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Noise seed for the generated pairs.
    pub pair_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 64,
            height: 192,
            width: 192,
            seed: 0,
            pair_seed: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.array.models == 0 {
            bail!("array.models must be >= 1");
        }
        if self.synth.count == 0 || self.synth.height < 2 || self.synth.width < 2 {
            bail!("synth.count must be >= 1 and synth.height/width >= 2");
        }
        if self.align.window < 3 || self.align.window.is_multiple_of(2) {
            bail!(
                "align.window must be odd and >= 3, got {}",
                self.align.window
            );
        }
        Ok(())
    }
}

/// Reads `path` (TOML, or built-in defaults for `None` / `"default"`), applies
/// `key.path=value` overrides and validates the result.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base = match path {
        None => RunConfig::default(),
        Some(p) if p.as_os_str() == "default" => RunConfig::default(),
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
    };
    let mut tree = serde_json::to_value(&base)?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("override {o:?} is not of the form key=value"))?;
        set_path(&mut tree, key.trim(), parse_value(raw.trim())?)?;
    }
    let cfg: RunConfig = serde_json::from_value(tree).context("applying overrides")?;
    cfg.validate()?;
    Ok(cfg)
}

/// TOML literal when it parses as one, else a bare string.
fn parse_value(raw: &str) -> Result<Value> {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => Ok(serde_json::to_value(t.remove("v").expect("key present"))?),
        Err(_) => Ok(Value::String(raw.to_string())),
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override key {key:?}");
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        node = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {part:?} is not a table"))?
            .entry(part.to_string())
            .or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Default::default());
    }
    node.as_object_mut()
        .ok_or_else(|| anyhow!("override {key:?}: parent is not a table"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
