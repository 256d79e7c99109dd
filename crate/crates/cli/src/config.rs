//! Run configuration: defaults, then the TOML file, then `--set` overrides,
//! then dedicated flags. The resolved value is written next to every run's
//! outputs and can be fed back through `--config`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use s4mil::model::ModelConfig;
use s4mil::train::{SyntheticTaskSpec, TrainConfig};

use crate::error::{CliError, CliResult};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest to load. Empty means "generate the synthetic task".
    pub manifest: String,
    /// Percentile for the long-sequence evaluation subset.
    pub long_percentile: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: String::new(),
            long_percentile: 85.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub length: usize,
    pub dim: usize,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            length: 30_000,
            dim: 1024,
            repeats: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelCheckSection {
    pub trials: usize,
    pub max_state: usize,
    pub max_length: usize,
    pub tolerance: f64,
}

impl Default for KernelCheckSection {
    fn default() -> Self {
        Self {
            trials: 100,
            max_state: 16,
            max_length: 512,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub length: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub state_dim: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            length: 16,
            input_dim: 8,
            hidden_dim: 4,
            state_dim: 4,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub folds: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticTaskSpec,
    pub bench: BenchSection,
    pub kernel_check: KernelCheckSection,
    pub grad_check: GradCheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            folds: 10,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synthetic: SyntheticTaskSpec::default(),
            bench: BenchSection::default(),
            kernel_check: KernelCheckSection::default(),
            grad_check: GradCheckSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Applies one `key=value` override. `key` is a dotted path that must
    /// already exist; `value` is read as a TOML literal, or as a bare string
    /// if it does not parse as one.
    pub fn apply_override(&mut self, assignment: &str) -> CliResult<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let key = key.trim();
        if key == "train.seed" {
            return Err(CliError::Config("unknown key `train.seed`; set `seed` instead".into()));
        }
        let value = parse_literal(raw.trim());

        let mut root = Value::try_from(&*self).map_err(|e| CliError::Config(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
        }
        if slot.is_table() {
            return Err(CliError::Config(format!("key `{key}` names a section, not a value")));
        }
        // Integers are accepted where floats are expected.
        *slot = match (&*slot, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (_, v) => v,
        };
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("override `{key}`: {}", e.message())))?;
        Ok(())
    }

    /// Keeps derived fields consistent and validates every section.
    pub fn finish(&mut self) -> CliResult<()> {
        self.train.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        if !(0.0..=100.0).contains(&self.data.long_percentile) {
            return Err(CliError::Config(format!("data.long_percentile {} outside [0, 100]", self.data.long_percentile)));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Option<PathBuf> {
        (!self.data.manifest.is_empty()).then(|| PathBuf::from(&self.data.manifest))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn write_resolved(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

fn parse_literal(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let mut c = RunConfig::default();
        c.apply_override("model.hidden_dim=64").unwrap();
        c.apply_override("train.learning_rate=1").unwrap();
        c.apply_override("synthetic.task=majority").unwrap();
        c.apply_override("model.discretization=\"zoh\"").unwrap();
        assert_eq!(c.model.hidden_dim, 64);
        assert_eq!(c.train.learning_rate, 1.0);
        assert_eq!(c.synthetic.task, s4mil::train::SyntheticTask::Majority);
        assert_eq!(c.model.discretization, s4mil::ssm::Discretization::Zoh);
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut c = RunConfig::default();
        for bad in ["model.hiden_dim=3", "nope=1", "model=3", "train.seed=4"] {
            let msg = c.apply_override(bad).unwrap_err().to_string();
            let key = bad.split('=').next().unwrap();
            assert!(msg.contains(key), "{msg}");
        }
        assert!(c.apply_override("model.hidden_dim").is_err());
        assert!(c.apply_override("model.hidden_dim=big").is_err());
    }

    #[test]
    fn file_rejects_unknown_fields() {
        assert!(toml::from_str::<RunConfig>("[model]\nwidth = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
        let c: RunConfig = toml::from_str("seed = 9\n[train]\npatience = 2\n").unwrap();
        assert_eq!((c.seed, c.train.patience, c.folds), (9, 2, 10));
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 3;
        c.apply_override("data.manifest=some/dir/manifest.csv").unwrap();
        c.finish().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
