//! Model and run configuration.
//!
//! Configuration files are TOML with one section per concern:
//!
//! ```toml
//! [data]      # SyntheticSpec
//! [model]     # ModelConfig
//! [grid]      # GridSpec (optional)
//! [sweep]     # SweepSpec (optional)
//! ```
//!
//! Keys are the Rust field names verbatim.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::CoreError;
use crate::training::GridSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Supervised concepts read by a trainable affine head.
    Cbm,
    /// Unsupervised concepts only, with discriminator and relevance penalty.
    Msenn,
    /// Supervised plus unsupervised concepts.
    Cbmauc,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Cbm => "cbm",
            ModelKind::Msenn => "msenn",
            ModelKind::Cbmauc => "cbmauc",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cbm" => Ok(ModelKind::Cbm),
            "msenn" => Ok(ModelKind::Msenn),
            "cbmauc" => Ok(ModelKind::Cbmauc),
            other => Err(format!("unknown model kind `{other}` (expected cbm, msenn or cbmauc)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptLossKind {
    Mse,
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Which feature extractor produces the shared features `h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneName {
    /// `3×3` conv blocks (ReLU, 2×2 max-pool between blocks), global average
    /// pooling after the last block. `D_h` is the last block's channel count.
    Conv,
    /// Fully connected tanh layers on the flattened input. Used for small
    /// derivative checks; has no spatial feature map.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model: ModelKind,
    pub d_ex: usize,
    pub d_im: usize,
    pub k: usize,
    pub num_targets: usize,
    pub task_kind: TaskKind,
    pub concept_loss: ConceptLossKind,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub backbone: BackboneName,
    /// Channels per conv block, or hidden widths for the MLP backbone.
    /// The last entry is `D_h`.
    pub backbone_widths: Vec<usize>,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    /// Hidden widths of the relevance network; `None` means `[D_h/2, D_h/4]`.
    #[serde(default)]
    pub theta_hidden: Option<[usize; 2]>,
    #[serde(default = "default_dis_hidden")]
    pub dis_hidden: usize,
    /// Stop discriminator gradients at `h` (they still reach the concepts).
    #[serde(default)]
    pub dis_detach_h: bool,
    #[serde(default)]
    pub freeze_backbone: bool,
}

fn default_dis_hidden() -> usize {
    512
}

impl Default for ModelConfig {
    /// The desk-scale benchmark model.
    fn default() -> Self {
        ModelConfig {
            model: ModelKind::Cbmauc,
            d_ex: 3,
            d_im: 8,
            k: 4,
            num_targets: 2,
            task_kind: TaskKind::Multiclass,
            concept_loss: ConceptLossKind::Mse,
            alpha: 0.1,
            beta: 0.001,
            lambda: 1.0,
            lr: 0.01,
            optimizer: OptimizerKind::Adam,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            backbone: BackboneName::Conv,
            backbone_widths: vec![8, 16, 64],
            input_shape: [3, 12, 12],
            theta_hidden: None,
            dis_hidden: 64,
            dis_detach_h: false,
            freeze_backbone: false,
        }
    }
}

impl ModelConfig {
    pub fn d_h(&self) -> usize {
        self.backbone_widths.last().copied().unwrap_or(0)
    }

    /// Number of concept units feeding the prediction.
    pub fn num_concepts(&self) -> usize {
        match self.model {
            ModelKind::Cbm => self.d_ex,
            ModelKind::Msenn | ModelKind::Cbmauc => self.d_ex + self.d_im,
        }
    }

    pub fn theta_widths(&self) -> [usize; 2] {
        self.theta_hidden
            .unwrap_or_else(|| [(self.d_h() / 2).max(1), (self.d_h() / 4).max(1)])
    }

    pub fn uses_discriminator(&self) -> bool {
        self.model != ModelKind::Cbm
    }

    /// Every violated invariant, not just the first.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        match self.model {
            ModelKind::Cbm => {
                if self.d_im != 0 {
                    errs.push(format!("cbm has no unsupervised concepts but d_im = {}", self.d_im));
                }
            }
            ModelKind::Msenn => {
                if self.d_ex != 0 {
                    errs.push(format!("msenn has no supervised concepts but d_ex = {}", self.d_ex));
                }
            }
            ModelKind::Cbmauc => {}
        }
        if self.model != ModelKind::Cbm && self.d_ex + self.d_im == 0 {
            errs.push("d_ex + d_im must be at least 1".to_string());
        }
        if self.k > self.d_im {
            errs.push(format!("k = {} exceeds d_im = {}", self.k, self.d_im));
        }
        if self.num_targets == 0 {
            errs.push("num_targets must be at least 1".to_string());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            errs.push(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if self.batch_size < 2 {
            if self.alpha > 0.0 && self.uses_discriminator() {
                errs.push(format!(
                    "alpha > 0 needs batch_size >= 2 for negative pairs, got {}",
                    self.batch_size
                ));
            } else {
                errs.push(format!("batch_size must be at least 2, got {}", self.batch_size));
            }
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            errs.push("backbone_widths must be nonempty and positive".to_string());
        }
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            errs.push(format!("input_shape {:?} has a zero dimension", self.input_shape));
        }
        if self.backbone == BackboneName::Conv && !self.backbone_widths.is_empty() {
            let pools = self.backbone_widths.len() - 1;
            if (h >> pools) == 0 || (w >> pools) == 0 {
                errs.push(format!(
                    "input {h}x{w} is too small for {} pooled conv blocks",
                    self.backbone_widths.len()
                ));
            }
        }
        if let Some(t) = self.theta_hidden {
            if t.contains(&0) {
                errs.push("theta_hidden widths must be positive".to_string());
            }
        }
        if self.dis_hidden == 0 {
            errs.push("dis_hidden must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Free-function form of [`ModelConfig::validate`].
pub fn validate_config(cfg: &ModelConfig) -> Result<(), Vec<String>> {
    cfg.validate()
}

/// Limited-supervision sweep settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub d_ex_values: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
}

fn default_seeds() -> usize {
    3
}

/// Contents of a configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<SyntheticSpec>,
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, CoreError> {
        toml::from_str(s).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}
