//! Model, loss and training hyperparameters plus per-dataset presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{AmdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Look-back length `L`.
    pub seq_len: usize,
    /// Horizon `T`.
    pub pred_len: usize,
    /// Channel count `C`.
    pub channels: usize,
    pub revin: RevinConfig,
    pub mdm: MdmConfig,
    pub ddi: DdiConfig,
    pub ams: AmsConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RevinConfig {
    pub affine: bool,
    /// Floor on the per-instance standard deviation.
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdmConfig {
    /// `false` replaces the block with the identity.
    pub enabled: bool,
    /// Number of temporal-pattern levels including the raw input, so
    /// `num_scales - 1` pooling steps are applied.
    pub num_scales: usize,
    pub downsample_rate: usize,
    /// Single bias-free linear map per level instead of the two-layer GELU
    /// feedforward.
    pub linear: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdiConfig {
    /// `false` skips the block entirely (`v := u`).
    pub enabled: bool,
    pub patch_len: usize,
    pub num_blocks: usize,
    /// Channel-mixing scale.
    pub beta: f64,
    pub layer_norm: bool,
    /// Overrides `max(32, 2^round(log2 C))`.
    pub d_model: Option<usize>,
    /// Feedforward depth: 1 (linear) or 2 (linear-GELU-linear).
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixtureMode {
    Dense,
    Sparse,
    Average,
}

impl fmt::Display for MixtureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixtureMode::Dense => "dense",
            MixtureMode::Sparse => "sparse",
            MixtureMode::Average => "average",
        })
    }
}

impl FromStr for MixtureMode {
    type Err = AmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(MixtureMode::Dense),
            "sparse" => Ok(MixtureMode::Sparse),
            "average" => Ok(MixtureMode::Average),
            other => Err(AmdError::config(format!("unknown mixture mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmsConfig {
    /// Number of predictors `m`.
    pub num_predictors: usize,
    pub top_k: usize,
    pub alpha: f64,
    /// Hidden width of each predictor.
    pub hidden: usize,
    /// Hidden width of the selector's decomposition feedforward.
    pub selector_hidden: usize,
    pub mode: MixtureMode,
    /// Gate noise during training. Evaluation never adds noise.
    pub noise: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalanceMode {
    /// CV² of the batch-summed expert importance.
    Importance,
    /// Mean over rows of each gate vector's CV².
    PerRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub eps: f64,
    pub balance: BalanceMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay; plays the role of the parameter-norm penalty.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Stride between training windows.
    pub stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 512,
            pred_len: 96,
            channels: 7,
            revin: RevinConfig::default(),
            mdm: MdmConfig::default(),
            ddi: DdiConfig::default(),
            ams: AmsConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Default for RevinConfig {
    fn default() -> Self {
        Self {
            affine: true,
            eps: 1e-5,
        }
    }
}

impl Default for MdmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            num_scales: 4,
            downsample_rate: 2,
            linear: false,
        }
    }
}

impl Default for DdiConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            patch_len: 16,
            num_blocks: 1,
            beta: 0.1,
            layer_norm: true,
            d_model: None,
            depth: 2,
        }
    }
}

impl Default for AmsConfig {
    fn default() -> Self {
        Self {
            num_predictors: 8,
            top_k: 2,
            alpha: 1.0,
            hidden: 2048,
            selector_hidden: 128,
            mode: MixtureMode::Dense,
            noise: true,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            eps: 1e-10,
            balance: BalanceMode::Importance,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            learning_rate: 1e-4,
            weight_decay: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 2024,
            grad_clip: None,
            stride: 1,
        }
    }
}

/// Hidden width of the dual-dependency feedforwards: `max(32, 2^round(log2 C))`.
pub fn compute_d_model(channels: usize) -> usize {
    let exp = (channels.max(1) as f64).log2().round() as u32;
    32usize.max(1usize << exp)
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.ddi.d_model.unwrap_or_else(|| compute_d_model(self.channels))
    }

    /// Sequence length at each MDM level, finest first.
    pub fn scale_lengths(&self) -> Vec<usize> {
        let d = self.mdm.downsample_rate;
        let mut lens = vec![self.seq_len];
        for _ in 1..self.mdm.num_scales {
            let prev = *lens.last().unwrap();
            lens.push(prev / d);
        }
        lens
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(AmdError::Config(m));
        if self.seq_len == 0 || self.pred_len == 0 || self.channels == 0 {
            return err("seq_len, pred_len and channels must be positive".into());
        }
        if self.mdm.num_scales == 0 || self.mdm.downsample_rate < 2 {
            return err(format!(
                "mdm needs num_scales >= 1 and downsample_rate >= 2, got {} and {}",
                self.mdm.num_scales, self.mdm.downsample_rate
            ));
        }
        let min_len = (self.mdm.downsample_rate as u64)
            .checked_pow(self.mdm.num_scales as u32)
            .unwrap_or(u64::MAX);
        if (self.seq_len as u64) < min_len {
            return err(format!(
                "seq_len {} is shorter than the minimum {min_len} = downsample_rate^num_scales",
                self.seq_len
            ));
        }
        if self.ddi.patch_len == 0 || !self.seq_len.is_multiple_of(self.ddi.patch_len) {
            return err(format!(
                "seq_len {} must be a multiple of patch_len {}",
                self.seq_len, self.ddi.patch_len
            ));
        }
        if self.ddi.enabled && self.ddi.num_blocks == 0 {
            return err("ddi.num_blocks must be >= 1 when ddi is enabled".into());
        }
        if !(1..=2).contains(&self.ddi.depth) {
            return err(format!("ddi.depth must be 1 or 2, got {}", self.ddi.depth));
        }
        if !self.ddi.beta.is_finite() {
            return err("ddi.beta must be finite".into());
        }
        let a = &self.ams;
        if a.num_predictors == 0 || a.top_k == 0 || a.top_k > a.num_predictors {
            return err(format!(
                "ams needs 1 <= top_k <= num_predictors, got k={} m={}",
                a.top_k, a.num_predictors
            ));
        }
        if a.hidden == 0 || a.selector_hidden == 0 {
            return err("ams hidden widths must be positive".into());
        }
        if self.loss.lambda1 < 0.0 || self.loss.eps <= 0.0 || self.train.weight_decay < 0.0 {
            return err("lambda1 and weight_decay must be >= 0 and loss eps > 0".into());
        }
        if self.revin.eps <= 0.0 {
            return err("revin eps must be > 0".into());
        }
        if self.train.batch_size == 0 || self.train.stride == 0 {
            return err("batch_size and stride must be positive".into());
        }
        if self.train.learning_rate.is_nan() || self.train.learning_rate <= 0.0 {
            return err("learning_rate must be positive".into());
        }
        Ok(())
    }
}

/// A single ablation switch applied on top of a configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ablation {
    Average,
    Sparse,
    NoDdi,
    NoMdm,
    Beta(f64),
    Lambda1Zero,
}

impl FromStr for Ablation {
    type Err = AmdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Ablation::Average),
            "sparse" => Ok(Ablation::Sparse),
            "no-ddi" => Ok(Ablation::NoDdi),
            "no-mdm" => Ok(Ablation::NoMdm),
            "lambda1=0" => Ok(Ablation::Lambda1Zero),
            _ => match s.strip_prefix("beta=") {
                Some(v) => v
                    .parse()
                    .map(Ablation::Beta)
                    .map_err(|_| AmdError::config(format!("bad beta value in `{s}`"))),
                None => Err(AmdError::config(format!(
                    "unknown ablation `{s}` (expected average, sparse, no-ddi, no-mdm, beta=<v>, lambda1=0)"
                ))),
            },
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::Average => f.write_str("average"),
            Ablation::Sparse => f.write_str("sparse"),
            Ablation::NoDdi => f.write_str("no-ddi"),
            Ablation::NoMdm => f.write_str("no-mdm"),
            Ablation::Beta(b) => write!(f, "beta={b}"),
            Ablation::Lambda1Zero => f.write_str("lambda1=0"),
        }
    }
}

impl Ablation {
    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Ablation::Average => cfg.ams.mode = MixtureMode::Average,
            Ablation::Sparse => cfg.ams.mode = MixtureMode::Sparse,
            Ablation::NoDdi => cfg.ddi.enabled = false,
            Ablation::NoMdm => cfg.mdm.enabled = false,
            Ablation::Beta(b) => cfg.ddi.beta = b,
            Ablation::Lambda1Zero => cfg.loss.lambda1 = 0.0,
        }
    }
}

/// Per-dataset hyperparameters and split sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub model: ModelConfig,
    pub split: SplitSpec,
}

struct Row {
    name: &'static str,
    channels: usize,
    split: (usize, usize, usize),
    patch: usize,
    alpha: f64,
    batch: usize,
    epochs: usize,
    blocks: usize,
    lr: f64,
    layer_norm: bool,
    short_term: bool,
}

#[rustfmt::skip]
const TABLE: &[Row] = &[
    Row { name: "etth1", channels: 7, split: (8545, 2881, 2881), patch: 16, alpha: 0.0, batch: 128, epochs: 10, blocks: 1, lr: 5e-5, layer_norm: true, short_term: false },
    Row { name: "etth2", channels: 7, split: (8545, 2881, 2881), patch: 4, alpha: 1.0, batch: 128, epochs: 10, blocks: 1, lr: 5e-5, layer_norm: false, short_term: false },
    Row { name: "ettm1", channels: 7, split: (34465, 11521, 11521), patch: 16, alpha: 0.0, batch: 128, epochs: 10, blocks: 1, lr: 3e-5, layer_norm: true, short_term: false },
    Row { name: "ettm2", channels: 7, split: (34465, 11521, 11521), patch: 8, alpha: 0.0, batch: 128, epochs: 10, blocks: 1, lr: 1e-5, layer_norm: true, short_term: false },
    Row { name: "exchange", channels: 8, split: (5120, 665, 1422), patch: 4, alpha: 0.0, batch: 512, epochs: 10, blocks: 1, lr: 3e-4, layer_norm: true, short_term: false },
    Row { name: "weather", channels: 21, split: (36792, 5271, 10540), patch: 16, alpha: 0.0, batch: 128, epochs: 10, blocks: 1, lr: 5e-5, layer_norm: true, short_term: false },
    Row { name: "ecl", channels: 321, split: (18317, 2633, 5261), patch: 16, alpha: 0.0, batch: 128, epochs: 20, blocks: 1, lr: 3e-4, layer_norm: false, short_term: false },
    Row { name: "traffic", channels: 862, split: (12185, 1757, 3509), patch: 16, alpha: 0.0, batch: 32, epochs: 20, blocks: 1, lr: 8e-5, layer_norm: false, short_term: false },
    Row { name: "solar", channels: 137, split: (36601, 5161, 10417), patch: 8, alpha: 1.0, batch: 128, epochs: 10, blocks: 1, lr: 2e-5, layer_norm: true, short_term: false },
    Row { name: "pems03", channels: 358, split: (15617, 5135, 5135), patch: 4, alpha: 1.0, batch: 32, epochs: 10, blocks: 1, lr: 5e-5, layer_norm: false, short_term: true },
    Row { name: "pems04", channels: 307, split: (10172, 3375, 3375), patch: 4, alpha: 1.0, batch: 32, epochs: 5, blocks: 1, lr: 5e-5, layer_norm: false, short_term: true },
    Row { name: "pems07", channels: 883, split: (16911, 5622, 5622), patch: 16, alpha: 1.0, batch: 32, epochs: 10, blocks: 1, lr: 5e-5, layer_norm: false, short_term: true },
    Row { name: "pems08", channels: 170, split: (10690, 3548, 3548), patch: 16, alpha: 1.0, batch: 32, epochs: 10, blocks: 1, lr: 5e-5, layer_norm: false, short_term: true },
];

/// Names accepted by [`preset`].
pub fn preset_names() -> Vec<&'static str> {
    let mut names: Vec<_> = TABLE.iter().map(|r| r.name).collect();
    names.push("toy");
    names
}

/// Small configuration used by tests, gradient checks and smoke runs.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        seq_len: 16,
        pred_len: 4,
        channels: 2,
        mdm: MdmConfig {
            num_scales: 2,
            ..MdmConfig::default()
        },
        ddi: DdiConfig {
            patch_len: 4,
            ..DdiConfig::default()
        },
        ams: AmsConfig {
            num_predictors: 2,
            top_k: 1,
            hidden: 32,
            selector_hidden: 8,
            ..AmsConfig::default()
        },
        train: TrainConfig {
            batch_size: 32,
            epochs: 200,
            learning_rate: 3e-3,
            seed: 7,
            ..TrainConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Looks up a dataset preset by (case-insensitive) name.
pub fn preset(name: &str) -> Result<Preset> {
    let key = name.to_ascii_lowercase();
    if key == "toy" {
        return Ok(Preset {
            name: "toy",
            model: toy_config(),
            split: SplitSpec::default(),
        });
    }
    let row = TABLE.iter().find(|r| r.name == key).ok_or_else(|| {
        AmdError::config(format!(
            "unknown preset `{name}` (known: {})",
            preset_names().join(", ")
        ))
    })?;
    let (seq_len, pred_len) = if row.short_term { (96, 12) } else { (512, 96) };
    let model = ModelConfig {
        seq_len,
        pred_len,
        channels: row.channels,
        ddi: DdiConfig {
            patch_len: row.patch,
            num_blocks: row.blocks,
            layer_norm: row.layer_norm,
            ..DdiConfig::default()
        },
        ams: AmsConfig {
            alpha: row.alpha,
            ..AmsConfig::default()
        },
        train: TrainConfig {
            batch_size: row.batch,
            epochs: row.epochs,
            learning_rate: row.lr,
            ..TrainConfig::default()
        },
        ..ModelConfig::default()
    };
    let (train, val, test) = row.split;
    Ok(Preset {
        name: row.name,
        model,
        split: SplitSpec::FixedCounts { train, val, test },
    })
}
