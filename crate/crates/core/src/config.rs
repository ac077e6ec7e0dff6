//! Configuration for the model, training stages, data and evaluation.
//!
//! Every struct deserialises from a TOML section with unknown keys rejected;
//! missing keys take the defaults below.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::{ConditionKind, OffsetDelta, DEFAULT_ROPE_BASE};
use crate::error::{Error, Result};

/// One controller level: a square token grid and its channel width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub size: usize,
    pub channels: usize,
}

impl LevelSpec {
    pub fn tokens(&self) -> usize {
        self.size * self.size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Image side in pixels.
    pub image: usize,
    /// Pixel-unshuffle factor in front of the denoiser.
    pub patch: usize,
    /// Denoiser widths at the patch grid, half and quarter resolution.
    pub widths: [usize; 3],
    /// Controller levels at half resolution, then at quarter resolution.
    pub blocks: [usize; 2],
    pub emb_dim: usize,
    pub time_freq_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Width of the first strided stage of the condition encoders.
    pub encoder_width: usize,
    pub rope_base: f64,
    /// Content-key offset; `None` uses the grid extent of each level.
    pub delta: Option<[usize; 2]>,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Add the layout embedding at the denoiser's half-resolution entrance.
    pub inject_layout_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: 32,
            patch: 2,
            widths: [32, 48, 48],
            blocks: [2, 2],
            emb_dim: 64,
            time_freq_dim: 32,
            heads: 1,
            ffn_mult: 2,
            encoder_width: 16,
            rope_base: DEFAULT_ROPE_BASE,
            delta: None,
            diffusion_steps: 200,
            beta_start: 1e-4,
            beta_end: 2e-2,
            inject_layout_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image % (self.patch * 4) != 0 {
            return bad(format!("image {} must be divisible by 4 * patch {}", self.image, self.patch));
        }
        if self.blocks.iter().sum::<usize>() == 0 {
            return bad("at least one controller block is required".into());
        }
        for &c in &self.widths[1..] {
            if c % self.heads != 0 || (c / self.heads) % 4 != 0 {
                return bad(format!("width {c} with {} heads needs a head size divisible by 4", self.heads));
            }
        }
        if self.time_freq_dim % 2 != 0 || self.emb_dim == 0 {
            return bad("time_freq_dim must be even and emb_dim positive".into());
        }
        if self.diffusion_steps == 0 || !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad("noise schedule needs steps >= 1 and 0 < beta_start <= beta_end < 1".into());
        }
        Ok(())
    }

    /// Side of the denoiser's top grid.
    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn levels(&self) -> Vec<LevelSpec> {
        let half = LevelSpec { size: self.grid() / 2, channels: self.widths[1] };
        let quarter = LevelSpec { size: self.grid() / 4, channels: self.widths[2] };
        std::iter::repeat_n(half, self.blocks[0]).chain(std::iter::repeat_n(quarter, self.blocks[1])).collect()
    }

    pub fn delta_for(&self, level: &LevelSpec) -> OffsetDelta {
        match self.delta {
            Some([r, c]) => OffsetDelta { row: r, col: c },
            None => OffsetDelta::for_grid(level.size, level.size),
        }
    }

    /// Stable digest of the configuration, stored in checkpoint headers.
    pub fn hash(&self) -> [u8; 32] {
        let text = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(text.as_bytes()).into()
    }
}

/// Switches for the inter-element ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterOptions {
    pub spatial: bool,
    pub layer: bool,
    pub order_embedding: bool,
}

impl Default for InterOptions {
    fn default() -> Self {
        Self { spatial: true, layer: true, order_embedding: true }
    }
}

impl InterOptions {
    pub fn label(&self) -> &'static str {
        match (self.spatial, self.layer, self.order_embedding) {
            (true, true, true) => "full",
            (true, true, false) => "no_order_embedding",
            (true, false, _) => "no_layer_transformer",
            (false, true, true) => "no_spatial_transformer",
            _ => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Intra,
    Inter,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Base, Stage::Intra, Stage::Inter];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Intra => "intra",
            Stage::Inter => "inter",
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Stage> {
        Stage::ALL.get(id as usize).copied().ok_or_else(|| Error::Format(format!("unknown stage id {id}")))
    }

    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Base => None,
            Stage::Intra => Some(Stage::Base),
            Stage::Inter => Some(Stage::Intra),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "base" | "base_controlnet" => Ok(Stage::Base),
            "intra" => Ok(Stage::Intra),
            "inter" => Ok(Stage::Inter),
            _ => Err(Error::Config(format!("unknown stage {s:?} (base, intra, inter)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub base_steps: usize,
    pub intra_steps: usize,
    pub inter_steps: usize,
    /// Weight of the feature transform loss.
    pub lambda: f64,
    /// Probability of dropping the class embedding.
    pub class_dropout: f64,
    pub log_every: usize,
    /// Clip the global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
    /// Layout kinds drawn uniformly for each element during training.
    pub layouts: Vec<ConditionKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            batch: 16,
            base_steps: 3000,
            intra_steps: 5000,
            inter_steps: 5000,
            lambda: 1.0,
            class_dropout: 0.2,
            log_every: 50,
            grad_clip: 1.0,
            layouts: ConditionKind::LAYOUTS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !(0.0..=1.0).contains(&self.class_dropout) || self.batch == 0 || self.lr <= 0.0 {
            return Err(Error::Config("need lambda >= 0, class_dropout in [0, 1], batch >= 1 and lr > 0".into()));
        }
        Ok(())
    }

    pub fn steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::Base => self.base_steps,
            Stage::Intra => self.intra_steps,
            Stage::Inter => self.inter_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub test_fraction: f64,
    pub eval_min_pixels: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 2000, test_fraction: 0.1, eval_min_pixels: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out scenes to evaluate (each in both orders).
    pub scenes: usize,
    /// Sampling batch size.
    pub batch: usize,
    pub layout: ConditionKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { scenes: 100, batch: 50, layout: ConditionKind::Mask }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub inter: InterOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
