use std::path::{Path, PathBuf};

use gda_core::data::{DomainSpec, Style};
use gda_core::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Everything a command may read from `--config`. Flags take precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub train: TrainConfig,
    /// Domains rendered by `gen-data`.
    pub domains: Vec<DomainSpec>,
    pub model: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub data: Vec<PathBuf>,
    pub reference: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            domains: default_domains(),
            model: None,
            generator: None,
            data: Vec::new(),
            reference: None,
        }
    }
}

/// A labeled source domain and an unlabeled target domain with a style gap,
/// 300 training and 100 test samples per class each.
pub fn default_domains() -> Vec<DomainSpec> {
    let domain = |name: &str, style: Style, seed: u64, labeled: bool| DomainSpec {
        name: name.into(),
        style,
        count_per_class: 400,
        seed,
        test_fraction: 0.25,
        labeled,
    };
    vec![
        domain("source", Style::source(), 1, true),
        domain("target", Style::target(), 2, false),
    ]
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        let mut names = std::collections::HashSet::new();
        for d in &self.domains {
            d.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
            if !names.insert(d.name.as_str()) {
                return Err(CliError::Invalid(format!("domain {} listed twice", d.name)));
            }
        }
        Ok(())
    }

    /// Writes the effective configuration as pretty JSON.
    pub fn persist(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}
