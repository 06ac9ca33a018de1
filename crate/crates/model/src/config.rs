//! Architecture hyper-parameters and the named presets.

use serde::{Deserialize, Serialize};
use vah_core::context::ContextStream;
use vah_core::seed::sha256_hex;

use crate::error::{Error, Result};

/// One conditioning stream the model attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextInput {
    pub stream: ContextStream,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub freq_strides: Vec<usize>,
    pub wave_strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    /// Empty for the no-context variant.
    pub contexts: Vec<ContextInput>,
    pub context_encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Window sizes of the training objective; hop is a quarter window.
    pub loss_windows: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
    /// Tiny network for finite-difference checks.
    Mini,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            "mini" => Ok(Preset::Mini),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

fn both_streams(dim: usize) -> Vec<ContextInput> {
    ContextStream::ALL.iter().map(|&stream| ContextInput { stream, dim }).collect()
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                sample_rate: 8000,
                window: 512,
                hop: 128,
                freq_strides: vec![4, 4, 4, 4],
                wave_strides: vec![4, 4, 4, 2],
                channels: vec![16, 32, 64, 64],
                latent_dim: 64,
                contexts: both_streams(16),
                context_encoder_layers: 3,
                decoder_layers: 3,
                heads: 4,
                ffn_dim: 256,
                loss_windows: vec![512, 256, 128],
            },
            Preset::Paper => Self {
                sample_rate: 44100,
                window: 4096,
                hop: 1024,
                freq_strides: vec![4, 4, 4, 4, 8],
                wave_strides: vec![4, 4, 4, 4, 4],
                channels: vec![48, 96, 192, 384, 768],
                latent_dim: 768,
                contexts: both_streams(16),
                context_encoder_layers: 3,
                decoder_layers: 3,
                heads: 8,
                ffn_dim: 3072,
                loss_windows: vec![2048, 1024, 512],
            },
            Preset::Mini => Self {
                sample_rate: 8000,
                window: 64,
                hop: 16,
                freq_strides: vec![4, 8],
                wave_strides: vec![4, 4],
                channels: vec![4, 8],
                latent_dim: 8,
                contexts: vec![ContextInput { stream: ContextStream::Vision, dim: 6 }],
                context_encoder_layers: 2,
                decoder_layers: 2,
                heads: 2,
                ffn_dim: 16,
                loss_windows: vec![64, 32],
            },
        }
    }

    pub fn without_context(mut self) -> Self {
        self.contexts.clear();
        self
    }

    pub fn uses_context(&self) -> bool {
        !self.contexts.is_empty()
    }

    /// Frequency bins fed to the encoder after dropping the topmost one.
    pub fn cropped_bins(&self) -> usize {
        self.window / 2
    }

    /// Samples per latent step.
    pub fn latent_stride(&self) -> usize {
        2 * self.hop
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.sample_rate == 0 || self.window < 4 || self.hop == 0 {
            return fail("sample rate, window and hop must be positive".into());
        }
        if self.hop > self.window / 2 || !self.window.is_multiple_of(self.hop) {
            return fail(format!("hop {} must divide window {} and be at most half of it", self.hop, self.window));
        }
        let n = self.channels.len();
        if n == 0 || self.freq_strides.len() != n || self.wave_strides.len() != n {
            return fail("channel ladder and both stride lists must have the same nonzero length".into());
        }
        if self.channels.iter().chain(&self.freq_strides).chain(&self.wave_strides).any(|&v| v == 0) {
            return fail("channels and strides must be positive".into());
        }
        let fp: usize = self.freq_strides.iter().product();
        if fp != self.cropped_bins() {
            return fail(format!("frequency strides multiply to {fp}, expected {} bins", self.cropped_bins()));
        }
        let wp: usize = self.wave_strides.iter().product();
        if wp != self.hop {
            return fail(format!("waveform strides multiply to {wp}, expected hop {}", self.hop));
        }
        if self.latent_dim == 0 || self.heads == 0 || !self.latent_dim.is_multiple_of(self.heads) {
            return fail(format!("latent dim {} is not divisible by {} heads", self.latent_dim, self.heads));
        }
        if self.ffn_dim == 0 || self.decoder_layers == 0 {
            return fail("ffn width and decoder depth must be positive".into());
        }
        if self.contexts.iter().any(|c| c.dim == 0) {
            return fail("context dims must be positive".into());
        }
        for (i, c) in self.contexts.iter().enumerate() {
            if self.contexts[..i].iter().any(|p| p.stream == c.stream) {
                return fail(format!("context stream {:?} listed twice", c.stream));
            }
        }
        if self.loss_windows.is_empty() || self.loss_windows.iter().any(|&w| w < 4 || w % 4 != 0) {
            return fail("loss windows must be nonempty multiples of 4".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for p in [Preset::Desk, Preset::Paper, Preset::Mini] {
            ModelConfig::preset(p).validate().unwrap();
            ModelConfig::preset(p).without_context().validate().unwrap();
        }
    }

    #[test]
    fn stride_products_are_checked() {
        let mut c = ModelConfig::preset(Preset::Desk);
        c.freq_strides = vec![4, 4, 4, 2];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::preset(Preset::Desk);
        c.wave_strides = vec![4, 4, 4, 4];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::preset(Preset::Desk);
        c.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ModelConfig::preset(Preset::Desk).to_json()).unwrap();
        v["surprise"] = 1.into();
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
