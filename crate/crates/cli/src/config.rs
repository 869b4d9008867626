//! Run configuration: profile defaults, then the TOML file, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use remtime_core::model::ModelConfig;
use remtime_core::prefixing::SplitMode;
use remtime_core::training::{Profile, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub folds: usize,
    pub train_ratio: f64,
    pub validation_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mode: SplitMode::Cv,
            folds: 5,
            train_ratio: 0.8,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Training seeds of the cross-validation grid.
    pub seeds: Vec<u64>,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub split: Option<SplitMode>,
    pub folds: Option<usize>,
    pub epochs: Option<usize>,
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    profile: Option<Profile>,
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    split: Option<toml::Table>,
    model: Option<toml::Table>,
    train: Option<toml::Table>,
}

fn layer<T: Clone + Serialize + for<'de> Deserialize<'de>>(base: &T, patch: Option<toml::Table>, section: &str) -> Result<T, CliError> {
    let Some(patch) = patch else {
        return Ok(base.clone());
    };
    let mut table = toml::Table::try_from(base).map_err(|e| CliError::Usage(format!("[{section}]: {e}")))?;
    for (k, v) in patch {
        if !table.contains_key(&k) && !optional_key(section, &k) {
            return Err(CliError::Usage(format!("unknown key `{k}` in [{section}]")));
        }
        table.insert(k, v);
    }
    table
        .try_into()
        .map_err(|e| CliError::Usage(format!("[{section}]: {e}")))
}

/// Keys whose default is absent and therefore missing from the base table.
fn optional_key(section: &str, key: &str) -> bool {
    section == "train" && key == "early_stop"
}

impl RunConfig {
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<RunConfig, CliError> {
        let file = match path {
            Some(p) => {
                if !p.is_file() {
                    return Err(CliError::Usage(format!("config file {} does not exist", p.display())));
                }
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                toml::from_str::<FileConfig>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };
        let profile = o.profile.or(file.profile).unwrap_or(Profile::Desk);
        let (model, train) = profile.configs();
        let mut cfg = RunConfig {
            profile,
            seed: file.seed.unwrap_or(42),
            seeds: file.seeds.unwrap_or_else(|| vec![1, 2, 3]),
            split: layer(&SplitConfig::default(), file.split, "split")?,
            model: layer(&model, file.model, "model")?,
            train: layer(&train, file.train, "train")?,
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(m) = o.split {
            cfg.split.mode = m;
        }
        if let Some(f) = o.folds {
            cfg.split.folds = f;
        }
        if let Some(e) = o.epochs {
            cfg.train.epochs = e;
            cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(e.saturating_sub(1));
        }
        if let Some(s) = &o.seeds {
            cfg.seeds = s.clone();
        }
        cfg.model.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
