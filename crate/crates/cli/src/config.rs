use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fatigue_rec_core::data::{SplitRatios, SyntheticConfig};
use fatigue_rec_core::model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything a run needs, read from a TOML file.
///
/// Sections: `[model]`, `[model.ablations]`, `[train]`, `[synthetic]`,
/// `[prepare]` and `[paths]`. Missing keys take their defaults and unknown
/// keys are rejected. `train.seed` is the root of the initialisation,
/// negative-sampling, shuffling and augmentation streams; `synthetic.seed`
/// drives the corpus generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub prepare: PrepareConfig,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareConfig {
    pub k_core: usize,
    pub max_len: usize,
    /// Train, validation and test shares of each user's targets.
    pub ratios: [usize; 3],
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            k_core: 10,
            max_len: 100,
            ratios: [8, 1, 1],
        }
    }
}

impl PrepareConfig {
    pub fn split_ratios(&self) -> SplitRatios {
        let [train, valid, test] = self.ratios;
        SplitRatios { train, valid, test }
    }
}

/// File locations. Relative paths are resolved against the directory of
/// the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Holds `events.tsv`, `exposures.tsv`, `splits.tsv` and `stats.json`.
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.frec"),
            history: PathBuf::from("history.jsonl"),
        }
    }
}

pub const EVENTS_FILE: &str = "events.tsv";
pub const EXPOSURES_FILE: &str = "exposures.tsv";
pub const SPLITS_FILE: &str = "splits.tsv";
pub const STATS_FILE: &str = "stats.json";

impl Paths {
    pub fn events(&self) -> PathBuf {
        self.data_dir.join(EVENTS_FILE)
    }

    pub fn exposures(&self) -> PathBuf {
        self.data_dir.join(EXPOSURES_FILE)
    }

    pub fn splits(&self) -> PathBuf {
        self.data_dir.join(SPLITS_FILE)
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.data_dir, &mut self.checkpoint, &mut self.history] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        cfg.paths.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.prepare.ratios.iter().sum::<usize>() == 0 {
            anyhow::bail!("prepare.ratios must not all be zero");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert_eq!(cfg.model.dim, 40);
        assert_eq!(cfg.prepare.k_core, 10);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(format!("{err:#}").contains("learning_rat"), "{err:#}");
        let err = RunConfig::parse("[synthetic]\nn_user = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("n_user"), "{err:#}");
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::parse("[model]\ndim = 8\n[model.ablations]\nno_cl = true\n").unwrap();
        assert_eq!(cfg.model.dim, 8);
        assert!(cfg.model.ablations.no_cl);
        assert_eq!(cfg.model.window, ModelConfig::default().window);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[paths]\ndata_dir = \"d\"\ncheckpoint = \"/abs/m.frec\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.splits(), dir.path().join("d").join(SPLITS_FILE));
        assert_eq!(cfg.paths.checkpoint, PathBuf::from("/abs/m.frec"));
    }
}
