//! Registration settings, loadable from TOML with dotted keys
//! (`convex.search_radius = 8`) and overridable key by key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::convex::ConvexConfig;
use crate::error::{Error, Result};
use crate::features::{MindConfig, PcaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    #[default]
    Mind,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preprocessing {
    #[default]
    Mri,
    Ct,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StridePolicy {
    /// Interpolate token features to image voxels before registering.
    #[default]
    UpsampleToVoxel,
    /// Register on the token grid, then scale and interpolate the field.
    Native,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub feature_source: FeatureSource,
    pub preprocessing: Preprocessing,
    pub feature_stride_policy: StridePolicy,
    pub mind: MindConfig,
    pub pca: PcaConfig,
    pub convex: ConvexConfig,
    pub adam: AdamConfig,
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.mind.validate()?;
        self.pca.validate()?;
        self.convex.validate()?;
        self.adam.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets one dotted key. The value is parsed as a TOML literal, falling
    /// back to a bare string (`feature_source=external`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = parse_literal(value);
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (depth, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
            if !table.contains_key(*part) {
                return Err(Error::Config(format!("unknown configuration key {key}")));
            }
            if depth + 1 == parts.len() {
                table.insert((*part).to_string(), parsed.clone());
                break;
            }
            node = table.get_mut(*part).expect("checked above");
        }
        let updated: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Applies `key=value` strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for item in overrides {
            let item = item.as_ref();
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

fn parse_literal(value: &str) -> toml::Value {
    match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}
