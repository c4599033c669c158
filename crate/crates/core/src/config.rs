//! Model presets and feature-path flags.

use serde::{Deserialize, Serialize};

use crate::error::{BinsepError, Result};
use crate::signal::StftConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size settings: 11025 Hz, 1022/256 STFT, 256×256 inputs, 7 U-Net levels.
    Paper,
    /// Laptop-scale settings used for training experiments.
    Desk,
    /// Smallest configuration, for gradient checks and fast tests.
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = BinsepError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            "tiny" => Ok(Preset::Tiny),
            other => Err(BinsepError::invalid("preset", format!("unknown preset `{other}`"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
            Preset::Tiny => "tiny",
        })
    }
}

/// Reference magnitude a source is compared against when building its binary target mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskTarget {
    /// `[|X_n| ≥ |X_m|]` against the mixture itself.
    Mixture,
    /// Ideal binary mask `[|X_n| ≥ |X_m − X_n|]`: the source against everything else.
    #[default]
    Dominant,
}

impl std::str::FromStr for MaskTarget {
    type Err = BinsepError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(MaskTarget::Mixture),
            "dominant" => Ok(MaskTarget::Dominant),
            other => Err(BinsepError::invalid("mask target", format!("unknown mask target `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaskTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskTarget::Mixture => "mixture",
            MaskTarget::Dominant => "dominant",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop_len: usize,
    /// Log-frequency bins of the network input (F).
    pub f_log: usize,
    /// STFT frames of the network input (T).
    pub frames: usize,
    /// Output channels of each U-Net encoder level; its length is the level count N.
    pub unet_channels: Vec<usize>,
    /// Common model dimension of every attention block (equals the bottleneck width).
    pub d_model: usize,
    pub heads: usize,
    pub cma_layers: usize,
    /// Octaves D of the coordinate encoding (4·D channels).
    pub octaves: usize,
    pub pos_hidden: usize,
    /// Side of the square object image patch.
    pub patch: usize,
    /// Output channels of the four stride-2 visual encoder blocks.
    pub visual_channels: Vec<usize>,
    pub frame_w: u32,
    pub frame_h: u32,
    /// How ground-truth masks are derived from the stems.
    #[serde(default)]
    pub mask_target: MaskTarget,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self {
                preset: p,
                sample_rate: 11025,
                frame_len: 1022,
                hop_len: 256,
                f_log: 256,
                frames: 256,
                unet_channels: vec![64, 128, 256, 512, 512, 512, 512],
                d_model: 512,
                heads: 8,
                cma_layers: 2,
                octaves: 16,
                pos_hidden: 256,
                patch: 112,
                visual_channels: vec![64, 128, 256, 512],
                frame_w: 1280,
                frame_h: 720,
                mask_target: MaskTarget::default(),
            },
            Preset::Desk => Self {
                preset: p,
                sample_rate: 8000,
                frame_len: 254,
                hop_len: 64,
                f_log: 64,
                frames: 64,
                unet_channels: vec![16, 32, 64, 128, 128],
                d_model: 128,
                heads: 8,
                cma_layers: 2,
                octaves: 16,
                pos_hidden: 128,
                patch: 64,
                visual_channels: vec![16, 32, 64, 128],
                frame_w: 1280,
                frame_h: 720,
                mask_target: MaskTarget::default(),
            },
            Preset::Tiny => Self {
                preset: p,
                sample_rate: 8000,
                frame_len: 62,
                hop_len: 16,
                f_log: 16,
                frames: 16,
                unet_channels: vec![4, 8, 8],
                d_model: 8,
                heads: 2,
                cma_layers: 2,
                octaves: 16,
                pos_hidden: 16,
                patch: 32,
                visual_channels: vec![4, 8, 8, 8],
                frame_w: 1280,
                frame_h: 720,
                mask_target: MaskTarget::default(),
            },
        }
    }

    pub fn levels(&self) -> usize {
        self.unet_channels.len()
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig::hann(self.frame_len, self.hop_len).expect("preset STFT parameters are valid")
    }

    pub fn f_lin(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Samples per clip, chosen so the STFT yields exactly `frames` frames.
    pub fn clip_len(&self) -> usize {
        (self.frames - 1) * self.hop_len
    }

    pub fn clip_duration_s(&self) -> f64 {
        self.clip_len() as f64 / self.sample_rate as f64
    }

    /// Side of the visual feature grid (four stride-2 blocks).
    pub fn grid(&self) -> usize {
        self.patch / 16
    }

    /// Spatial size `(T/S, F/S)` of the U-Net bottleneck, S = 2^N.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let s = 1 << self.levels();
        (self.frames / s, self.f_log / s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.levels();
        let fail = |m: String| Err(BinsepError::invalid("model_config", m));
        if n < 3 {
            return fail(format!("need at least 3 U-Net levels, got {n}"));
        }
        let s = 1usize << n;
        if self.frames % s != 0 || self.f_log % s != 0 {
            return fail(format!("T={} and F={} must be divisible by 2^{n}", self.frames, self.f_log));
        }
        if self.f_log > self.f_lin() {
            return fail(format!("F={} exceeds linear bins {}", self.f_log, self.f_lin()));
        }
        if self.d_model != self.unet_channels[n - 1] {
            return fail(format!("d_model {} must equal bottleneck width {}", self.d_model, self.unet_channels[n - 1]));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.visual_channels.len() != 4 || self.visual_channels[3] != self.d_model {
            return fail("visual encoder needs 4 blocks ending at d_model".into());
        }
        if self.patch % 16 != 0 || self.patch == 0 {
            return fail(format!("patch {} must be a positive multiple of 16", self.patch));
        }
        if self.octaves == 0 || self.cma_layers == 0 {
            return fail("octaves and cma_layers must be positive".into());
        }
        StftConfig::hann(self.frame_len, self.hop_len)?;
        Ok(())
    }
}

/// Which inputs and guidance paths the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelFlags {
    /// Single-channel model trained on mono mixtures (no IPD, no position).
    pub mono: bool,
    pub use_ipd: bool,
    pub use_position: bool,
}

impl ModelFlags {
    pub const MONO: Self = Self { mono: true, use_ipd: false, use_position: false };
    pub const FULL: Self = Self { mono: false, use_ipd: true, use_position: true };
    pub const ABLATED: Self = Self { mono: false, use_ipd: false, use_position: false };

    pub fn binaural(use_ipd: bool, use_position: bool) -> Self {
        Self { mono: false, use_ipd, use_position }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mono && (self.use_ipd || self.use_position) {
            return Err(BinsepError::invalid("model_flags", "mono mode cannot use IPD or position inputs"));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        if self.use_ipd {
            2
        } else {
            1
        }
    }

    /// Network passes per object: one per ear, or one for mono.
    pub fn passes_per_object(&self) -> usize {
        if self.mono {
            1
        } else {
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::Paper, Preset::Desk, Preset::Tiny] {
            ModelConfig::preset(p).validate().unwrap();
        }
    }

    #[test]
    fn desk_clip_yields_64_frames() {
        let c = ModelConfig::preset(Preset::Desk);
        assert_eq!(c.clip_len(), 4032);
        assert_eq!(c.stft().n_frames(c.clip_len()), 64);
        assert_eq!(c.bottleneck_hw(), (2, 2));
        assert_eq!(c.grid(), 4);
    }

    #[test]
    fn mono_with_ipd_rejected() {
        assert!(ModelFlags { mono: true, use_ipd: true, use_position: false }.validate().is_err());
    }
}
