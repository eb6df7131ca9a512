use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Components switched off for ablation runs.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Mean pooling over interests instead of attentive fusion.
    pub no_fusion: bool,
    /// Plain GRU instead of the fatigue-gated unit.
    pub no_fru: bool,
    /// Dense residual layers instead of cross layers.
    pub no_cross: bool,
    /// Contrastive weight set to zero.
    pub no_cl: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 4] = ["no_fusion", "no_fru", "no_cross", "no_cl"];

    pub fn all() -> Self {
        Self {
            no_fusion: true,
            no_fru: true,
            no_cross: true,
            no_cl: true,
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    /// Turns on the ablation called `name`; `all` turns on every one.
    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name {
            "no_fusion" => self.no_fusion = true,
            "no_fru" => self.no_fru = true,
            "no_cross" => self.no_cross = true,
            "no_cl" => self.no_cl = true,
            "all" => *self = Self::all(),
            other => {
                return Err(Error::InvalidArgument {
                    op: "ablation",
                    reason: format!("unknown ablation {other:?}; expected one of {:?} or \"all\"", Self::NAMES),
                })
            }
        }
        Ok(())
    }
}

impl FromStr for Ablations {
    type Err = Error;

    /// Comma-separated ablation names; an empty string or `none` disables all.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Self::default();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty() && *n != "none") {
            out.enable(name)?;
        }
        Ok(out)
    }
}

impl fmt::Display for Ablations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flags = [self.no_fusion, self.no_fru, self.no_cross, self.no_cl];
        let on: Vec<&str> = Self::NAMES.iter().zip(flags).filter(|(_, on)| *on).map(|(n, _)| *n).collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join(","))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// Number of interests `K`.
    pub interests: usize,
    /// Cross depth `C`, shared by row cross, column cross and the conv stack.
    pub cross_layers: usize,
    /// Convolution kernel width `s`.
    pub kernel_width: usize,
    /// Recent-window threshold `T`.
    pub window: usize,
    pub conv_channels: Vec<usize>,
    pub score_hidden: Vec<usize>,
    /// Contrastive weight `α`.
    pub alpha: f64,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 40,
            interests: 4,
            cross_layers: 2,
            kernel_width: 5,
            window: 50,
            conv_channels: vec![20, 40],
            score_hidden: vec![100, 64],
            alpha: 0.4,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidArgument { op: "model config", reason });
        for (name, v) in [
            ("dim", self.dim),
            ("interests", self.interests),
            ("kernel_width", self.kernel_width),
            ("window", self.window),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.conv_channels.len() != self.cross_layers {
            return bad(format!(
                "conv_channels has {} entries but cross_layers is {}",
                self.conv_channels.len(),
                self.cross_layers
            ));
        }
        if self.conv_channels.contains(&0) || self.score_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.score_hidden.is_empty() {
            return bad("score_hidden needs at least one layer".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be a finite non-negative number, got {}", self.alpha));
        }
        Ok(())
    }

    /// `α` after ablations.
    pub fn contrastive_weight(&self) -> f64 {
        if self.ablations.no_cl {
            0.0
        } else {
            self.alpha
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// L2 weight on dense weight matrices and kernels.
    pub l2: f64,
    pub max_epochs: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Caps the optimizer steps per epoch; `None` runs full epochs.
    pub max_steps_per_epoch: Option<usize>,
    /// Caps the validation instances scored per epoch.
    pub max_valid_instances: Option<usize>,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 500,
            l2: 1e-4,
            max_epochs: 100,
            clip_norm: None,
            max_steps_per_epoch: None,
            max_valid_instances: None,
            eval_batch_size: 250,
            seed: 2024,
        }
    }
}

/// Clip threshold used when clipping is switched on without a value.
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidArgument { op: "train config", reason });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 must be non-negative, got {}", self.l2));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.max_epochs == 0 {
            return bad("batch sizes and max_epochs must be positive".into());
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        if self.max_steps_per_epoch == Some(0) || self.max_valid_instances == Some(0) {
            return bad("step and validation caps must be positive".into());
        }
        Ok(())
    }
}
