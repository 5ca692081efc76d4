//! Config-file parsing for the CLI. Every config is a JSON object whose
//! omitted keys take their defaults; unknown keys are usage errors so that
//! a typo never silently falls back to a default.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use animer::bodymodel::{build_toy_template, ModelTemplate, Taxon};
use animer::datagen::GenConfig;
use animer::network::NetworkConfig;
use animer::trainer::TrainConfig;

use crate::usage;

pub fn read_json_object(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(usage!("{}: config must be a JSON object", path.display())),
        Err(e) => Err(usage!("{}: invalid JSON: {e}", path.display())),
    }
}

/// Deep-merges `given` into `base`, rejecting keys `base` does not have.
/// Maps keyed by user data (dataset weights) are replaced wholesale.
fn merge_strict(context: &str, base: &mut Map<String, Value>, given: Map<String, Value>) -> anyhow::Result<()> {
    for (k, v) in given {
        let Some(slot) = base.get_mut(&k) else {
            return Err(usage!("{context}: unknown key {k:?}"));
        };
        match (slot, v) {
            (Value::Object(inner), Value::Object(v)) if k != "dataset_weights" => merge_strict(&format!("{context}.{k}"), inner, v)?,
            (slot, v) => *slot = v,
        }
    }
    Ok(())
}

/// `T::default()` with the keys of `map` applied on top, at any depth.
pub fn parse_strict<T: Default + DeserializeOwned + Serialize>(context: &str, map: Map<String, Value>) -> anyhow::Result<T> {
    let Value::Object(mut base) = serde_json::to_value(T::default())? else { unreachable!("configs serialize to objects") };
    merge_strict(context, &mut base, map)?;
    serde_json::from_value(Value::Object(base)).map_err(|e| usage!("{context}: {e}"))
}

/// Toy body-template dimensions used by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateSpec {
    pub joints: usize,
    pub betas: usize,
    pub vertices: usize,
    pub seed: u64,
}

impl Default for TemplateSpec {
    fn default() -> Self {
        Self { joints: 6, betas: 4, vertices: 200, seed: 7 }
    }
}

impl TemplateSpec {
    pub fn build(&self) -> anyhow::Result<Vec<ModelTemplate>> {
        Taxon::ALL
            .iter()
            .map(|&t| build_toy_template(t, self.joints, self.betas, self.vertices, self.seed).map_err(|e| usage!("template: {e}")))
            .collect()
    }
}

/// `gen-data` config: [`GenConfig`] keys plus an optional `template`
/// object.
pub fn load_gen_config(path: Option<&Path>) -> anyhow::Result<(GenConfig, TemplateSpec)> {
    let Some(path) = path else { return Ok((GenConfig::default(), TemplateSpec::default())) };
    let mut map = read_json_object(path)?;
    let ctx = path.display().to_string();
    let template = match map.remove("template") {
        Some(Value::Object(t)) => parse_strict(&format!("{ctx}.template"), t)?,
        Some(_) => return Err(usage!("{ctx}: template must be an object")),
        None => TemplateSpec::default(),
    };
    let config: GenConfig = parse_strict(&ctx, map)?;
    config.validate().map_err(|e| usage!("{ctx}: {e}"))?;
    Ok((config, template))
}

/// `train` config: [`TrainConfig`] keys plus an optional `network` object
/// overriding fields of the toy network configuration.
pub struct TrainFile {
    pub train: TrainConfig,
    pub network_overrides: Map<String, Value>,
}

pub fn load_train_config(path: Option<&Path>) -> anyhow::Result<TrainFile> {
    let Some(path) = path else { return Ok(TrainFile { train: TrainConfig::default(), network_overrides: Map::new() }) };
    let mut map = read_json_object(path)?;
    let ctx = path.display().to_string();
    let network_overrides = match map.remove("network") {
        Some(Value::Object(n)) => n,
        Some(_) => return Err(usage!("{ctx}: network must be an object")),
        None => Map::new(),
    };
    let train: TrainConfig = parse_strict(&ctx, map)?;
    train.validate().map_err(|e| usage!("{ctx}: {e}"))?;
    Ok(TrainFile { train, network_overrides })
}

/// Applies `overrides` on top of `base`; the merged object must still be a
/// valid configuration.
pub fn apply_network_overrides(base: &NetworkConfig, overrides: &Map<String, Value>) -> anyhow::Result<NetworkConfig> {
    if overrides.is_empty() {
        return Ok(base.clone());
    }
    let Value::Object(mut merged) = serde_json::to_value(base)? else { unreachable!("network config serializes to an object") };
    merge_strict("network", &mut merged, overrides.clone())?;
    let config: NetworkConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| usage!("network: {e}"))?;
    config.validate().map_err(|e| usage!("network: {e}"))?;
    Ok(config)
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
