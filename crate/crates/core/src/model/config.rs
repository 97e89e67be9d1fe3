use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AdamConfig;

/// How the encoder's token sequence is reduced before the fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Average over tokens: `[B, T, E] → [B, E]`.
    Mean,
    /// Concatenate all tokens: `[B, T, E] → [B, T·E]`.
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionEmbedding {
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

/// Autoencoder architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub n_modalities: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub latent_dim: usize,
    /// `(channels, side, side)` of the reshaped latent.
    pub decoder_seed_shape: [usize; 3],
    pub decoder_layers: usize,
    /// Output channels of the first decoder stage; later stages halve it.
    pub decoder_width: usize,
    pub pooling: Pooling,
    pub position_embedding: PositionEmbedding,
    pub ffn_activation: Activation,
}

/// Smallest channel count a decoder stage is allowed to shrink to.
pub const MIN_DECODER_CHANNELS: usize = 8;

impl ModelConfig {
    /// Full-size configuration: 240² inputs, 24² patches, 512-wide encoder.
    pub fn full() -> Self {
        Self {
            image_size: 240,
            patch_size: 24,
            n_modalities: 4,
            embed_dim: 512,
            n_layers: 6,
            n_heads: 8,
            ffn_dim: 1024,
            latent_dim: 512,
            decoder_seed_shape: [8, 8, 8],
            decoder_layers: 6,
            decoder_width: 256,
            pooling: Pooling::Flatten,
            position_embedding: PositionEmbedding::Learned,
            ffn_activation: Activation::Gelu,
        }
    }

    /// Desk-scale configuration for 96² phantoms.
    pub fn toy() -> Self {
        Self {
            image_size: 96,
            patch_size: 12,
            n_modalities: 4,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            latent_dim: 64,
            decoder_seed_shape: [4, 4, 4],
            decoder_layers: 6,
            decoder_width: 64,
            pooling: Pooling::Flatten,
            position_embedding: PositionEmbedding::Learned,
            ffn_activation: Activation::Gelu,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.n_modalities
    }

    pub fn pooled_dim(&self) -> usize {
        match self.pooling {
            Pooling::Mean => self.embed_dim,
            Pooling::Flatten => self.tokens() * self.embed_dim,
        }
    }

    /// Output channels of each decoder stage.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.decoder_layers);
        let mut c = self.decoder_width;
        for _ in 0..self.decoder_layers {
            out.push(c);
            c = (c / 2).max(MIN_DECODER_CHANNELS.min(self.decoder_width));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("n_modalities", self.n_modalities),
            ("embed_dim", self.embed_dim),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("latent_dim", self.latent_dim),
            ("decoder_width", self.decoder_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        let [c, s, s2] = self.decoder_seed_shape;
        if s != s2 || c == 0 || s == 0 {
            return bad(format!(
                "decoder seed shape {:?} must be (c, s, s)",
                self.decoder_seed_shape
            ));
        }
        if c * s * s != self.latent_dim {
            return bad(format!(
                "latent_dim {} does not equal c·s·s = {}",
                self.latent_dim,
                c * s * s
            ));
        }
        let mut side = s;
        for _ in 0..self.decoder_layers {
            if side < self.image_size {
                side *= 2;
            }
        }
        if side < self.image_size {
            return bad(format!(
                "{} decoder stages from side {s} cannot reach image_size {}",
                self.decoder_layers, self.image_size
            ));
        }
        Ok(())
    }
}

/// Optimisation and objective settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the `1 − SSIM` term.
    pub alpha: f64,
    pub noise_std: f64,
    pub ssim_data_range: f64,
    /// Constant added to both images before SSIM so z-scored values land in
    /// `[0, data_range]`; without it `x̂ = −x` is a near-perfect SSIM optimum.
    pub ssim_offset: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            decoupled_weight_decay: true,
            batch_size: 32,
            epochs: 100,
            alpha: 100.0,
            noise_std: 0.2,
            ssim_data_range: 4.0,
            ssim_offset: 2.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            decoupled_weight_decay: self.decoupled_weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = [
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in finite_nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.ssim_data_range.is_nan() || self.ssim_data_range <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "ssim_data_range must be positive, got {}",
                self.ssim_data_range
            )));
        }
        if !self.ssim_offset.is_finite() {
            return Err(Error::InvalidConfig("ssim_offset must be finite".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}
