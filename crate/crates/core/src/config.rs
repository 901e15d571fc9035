//! Run configuration: one TOML document covering morphology, environment,
//! networks, trainer and seeds, with `a.b.c=value` command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Arch, BaselineConfig, EncoderConfig};
use crate::kingraph::GraphSpec;
use crate::ppo::PpoConfig;
use crate::toyenv::{EnvConfig, EnvError, Scene};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key.path=value")]
    OverrideSyntax(String),
    #[error("override `{key}`: {reason}")]
    Override { key: String, reason: String },
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Arch,
    /// Training seeds; each seed trains into its own subdirectory.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Morphology file. Mutually exclusive with an inline `[graph]` table.
    pub graph_spec: Option<PathBuf>,
    pub graph: Option<GraphSpec>,
    pub env: EnvConfig,
    pub encoder: EncoderConfig,
    pub baseline: BaselineConfig,
    pub ppo: PpoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: Arch::PhysGraph,
            seeds: vec![0],
            output_dir: PathBuf::from("runs/default"),
            graph_spec: None,
            graph: None,
            env: EnvConfig::default(),
            encoder: EncoderConfig::default(),
            baseline: BaselineConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses, applies overrides, resolves the graph spec and validates.
    /// Relative `graph_spec` paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, overrides: &[String], base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.resolve(base_dir)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, overrides, path.parent())
    }

    /// Inlines the graph spec so the config is self-contained.
    fn resolve(&mut self, base_dir: Option<&Path>) -> Result<(), ConfigError> {
        match (&self.graph_spec, &self.graph) {
            (Some(_), Some(_)) => Err(invalid("graph_spec", "set either graph_spec or an inline [graph] table, not both")),
            (Some(p), None) => {
                let path = match base_dir {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                let spec = GraphSpec::load(&path).map_err(|e| invalid("graph_spec", format!("{}: {e}", path.display())))?;
                self.graph = Some(spec);
                self.graph_spec = None;
                Ok(())
            }
            (None, Some(_)) => Ok(()),
            (None, None) => {
                self.graph = Some(GraphSpec::bimanual(3, 3));
                Ok(())
            }
        }
    }

    /// Scene for this config's morphology with `env.geometry_swap` applied.
    pub fn scene(&self) -> Result<Scene, EnvError> {
        Scene::new(&self.graph_spec(), self.env.geometry_swap.as_ref())
    }

    pub fn graph_spec(&self) -> GraphSpec {
        self.graph.clone().unwrap_or_else(|| GraphSpec::bimanual(3, 3))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let spec = self.graph_spec();
        spec.validate().map_err(|e| invalid("graph", e))?;
        if !spec.tool {
            return Err(invalid("graph.tool", "the environment needs a tool"));
        }
        self.env.validate().map_err(|e| invalid("env", e))?;
        self.encoder.validate().map_err(|e| invalid("encoder", e))?;
        if let Some(h) = &self.baseline.hidden {
            if h.is_empty() || h.contains(&0) {
                return Err(invalid("baseline.hidden", "widths must be positive and non-empty"));
            }
        }
        self.ppo.validate().map_err(|e| match e {
            crate::ppo::PpoError::Config { field, reason } => invalid(&format!("ppo.{field}"), reason),
            other => invalid("ppo", other),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Sets `a.b.c = value` inside a TOML tree. The value is parsed as a TOML
/// literal when possible (numbers, booleans, arrays, quoted strings) and
/// taken as a bare string otherwise.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::OverrideSyntax(spec.into()))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::OverrideSyntax(spec.into()));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| ConfigError::Override {
            key: key.into(),
            reason: format!("`{}` is not a table", parts[..i].join(".")),
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("loop returns on the last key")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml_str("", &[], None).unwrap();
        assert_eq!(c.arch, Arch::PhysGraph);
        assert_eq!(c.graph, Some(GraphSpec::bimanual(3, 3)));
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let o = vec![
            "ppo.lr=0".to_string(),
            "env.task=carry-tool".to_string(),
            "arch=mlp-baseline".to_string(),
            "encoder.bias.d_max=4".to_string(),
            "seeds=[3, 4]".to_string(),
        ];
        let c = RunConfig::from_toml_str("[ppo]\nlr = 0.1\n", &o, None).unwrap();
        assert_eq!(c.ppo.lr, 0.0);
        assert_eq!(c.env.task, crate::toyenv::Task::CarryTool);
        assert_eq!(c.arch, Arch::MlpBaseline);
        assert_eq!(c.encoder.bias.d_max, 4);
        assert_eq!(c.seeds, vec![3, 4]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml_str("[ppo]\nlearning_rate = 1.0\n", &[], None).unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        assert!(RunConfig::from_toml_str("", &["env.nope=1".into()], None).is_err());
        assert!(matches!(
            RunConfig::from_toml_str("", &["novalue".into()], None),
            Err(ConfigError::OverrideSyntax(_))
        ));
    }

    #[test]
    fn invalid_values_name_the_field() {
        let e = RunConfig::from_toml_str("", &["ppo.clip=-1".into()], None).unwrap_err();
        assert!(e.to_string().contains("ppo.clip"), "{e}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::from_toml_str("", &["env.horizon=90".into()], None).unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml_string(), &[], None).unwrap();
        assert_eq!(c, back);
    }
}
