//! Network configuration: stage widths, block counts, heads, windows.

use serde::{Deserialize, Serialize};

use crate::error::{PriqaError, Result};

/// Positional-encoding flavor. `None` exists for symmetry tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    Sinusoidal2d,
    None,
}

/// Completion-network configuration.
///
/// The encoder has four stages (full resolution, then three 2x
/// downsamplings); the decoder mirrors with three upsampling stages.
/// A window size of 0 means global attention at that stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_hw: (usize, usize),
    pub enc_channels: [usize; 4],
    pub enc_blocks: [usize; 4],
    pub enc_heads: [usize; 4],
    pub dec_channels: [usize; 3],
    pub dec_blocks: [usize; 3],
    pub dec_heads: [usize; 3],
    pub ffn_expand: usize,
    pub enc_windows: [usize; 4],
    pub dec_windows: [usize; 3],
    pub pe_kind: PeKind,
    /// Query and reference encoders share one parameter set when true.
    pub share_query_reference: bool,
}

impl NetConfig {
    /// Full-scale configuration: 224x224 inputs, channels
    /// [48, 96, 192, 384], blocks [2, 3, 3, 4] / [3, 3, 2], heads
    /// [1, 2, 4, 8] / [4, 2, 1]; roughly 60M parameters.
    pub fn paper() -> NetConfig {
        NetConfig {
            input_hw: (224, 224),
            enc_channels: [48, 96, 192, 384],
            enc_blocks: [2, 3, 3, 4],
            enc_heads: [1, 2, 4, 8],
            dec_channels: [192, 96, 96],
            dec_blocks: [3, 3, 2],
            dec_heads: [4, 2, 1],
            ffn_expand: 4,
            enc_windows: [8, 8, 0, 0],
            dec_windows: [0, 8, 8],
            pe_kind: PeKind::Sinusoidal2d,
            share_query_reference: true,
        }
    }

    /// Desk-scale configuration for fast forward-contract tests.
    pub fn toy() -> NetConfig {
        NetConfig {
            input_hw: (64, 64),
            enc_channels: [16, 32, 64, 128],
            enc_blocks: [1, 1, 1, 1],
            enc_heads: [1, 2, 4, 8],
            dec_channels: [64, 32, 32],
            dec_blocks: [1, 1, 1],
            dec_heads: [4, 2, 1],
            ffn_expand: 2,
            enc_windows: [8, 8, 0, 0],
            dec_windows: [0, 8, 8],
            pe_kind: PeKind::Sinusoidal2d,
            share_query_reference: true,
        }
    }

    /// Small training configuration used by the overfit checks.
    pub fn train_toy() -> NetConfig {
        NetConfig {
            input_hw: (32, 32),
            enc_channels: [8, 16, 32, 64],
            enc_blocks: [1, 1, 1, 1],
            enc_heads: [1, 2, 4, 8],
            dec_channels: [32, 16, 16],
            dec_blocks: [1, 1, 1],
            dec_heads: [4, 2, 1],
            ffn_expand: 2,
            enc_windows: [8, 8, 0, 0],
            dec_windows: [0, 8, 8],
            pe_kind: PeKind::Sinusoidal2d,
            share_query_reference: true,
        }
    }

    /// Minimal 16x16 configuration for finite-difference gradient checks.
    pub fn tiny() -> NetConfig {
        NetConfig {
            input_hw: (16, 16),
            enc_channels: [4, 8, 8, 8],
            enc_blocks: [1, 1, 1, 1],
            enc_heads: [1, 2, 2, 2],
            dec_channels: [8, 8, 8],
            dec_blocks: [1, 1, 1],
            dec_heads: [2, 2, 1],
            ffn_expand: 2,
            enc_windows: [4, 4, 0, 0],
            dec_windows: [0, 4, 4],
            pe_kind: PeKind::Sinusoidal2d,
            share_query_reference: true,
        }
    }

    /// Stage resolution of encoder stage `s` (0 = full input resolution).
    pub fn enc_resolution(&self, stage: usize) -> (usize, usize) {
        (self.input_hw.0 >> stage, self.input_hw.1 >> stage)
    }

    /// Stage resolution of decoder stage `d` (execution order; `d = 2`
    /// is full resolution).
    pub fn dec_resolution(&self, stage: usize) -> (usize, usize) {
        self.enc_resolution(2 - stage)
    }

    /// Encoder channel count feeding decoder stage `d` as the skip.
    pub fn skip_channels(&self, stage: usize) -> usize {
        self.enc_channels[2 - stage]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if h < 16 || w < 16 || h % 8 != 0 || w % 8 != 0 {
            return Err(PriqaError::Config(format!(
                "input resolution {h}x{w} must be at least 16 and divisible by 8"
            )));
        }
        for s in 0..4 {
            if self.enc_channels[s] == 0 || self.enc_blocks[s] == 0 {
                return Err(PriqaError::Config(format!(
                    "encoder stage {s} must have positive channels and blocks"
                )));
            }
            if self.enc_heads[s] == 0 || self.enc_channels[s] % self.enc_heads[s] != 0 {
                return Err(PriqaError::Config(format!(
                    "encoder stage {s}: channels {} not divisible by heads {}",
                    self.enc_channels[s], self.enc_heads[s]
                )));
            }
            let (sh, sw) = self.enc_resolution(s);
            let win = self.enc_windows[s];
            if win > 0 && (sh % win != 0 || sw % win != 0) {
                return Err(PriqaError::Config(format!(
                    "encoder stage {s}: window {win} does not divide {sh}x{sw}"
                )));
            }
        }
        for d in 0..3 {
            if self.dec_channels[d] == 0 || self.dec_blocks[d] == 0 {
                return Err(PriqaError::Config(format!(
                    "decoder stage {d} must have positive channels and blocks"
                )));
            }
            if self.dec_heads[d] == 0 || self.dec_channels[d] % self.dec_heads[d] != 0 {
                return Err(PriqaError::Config(format!(
                    "decoder stage {d}: channels {} not divisible by heads {}",
                    self.dec_channels[d], self.dec_heads[d]
                )));
            }
            let (sh, sw) = self.dec_resolution(d);
            let win = self.dec_windows[d];
            if win > 0 && (sh % win != 0 || sw % win != 0) {
                return Err(PriqaError::Config(format!(
                    "decoder stage {d}: window {win} does not divide {sh}x{sw}"
                )));
            }
        }
        if self.ffn_expand == 0 {
            return Err(PriqaError::Config("ffn_expand must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        NetConfig::paper().validate().unwrap();
        NetConfig::toy().validate().unwrap();
        NetConfig::train_toy().validate().unwrap();
        NetConfig::tiny().validate().unwrap();
    }

    #[test]
    fn bad_window_is_config_error() {
        let mut cfg = NetConfig::toy();
        cfg.enc_windows[0] = 7;
        assert!(matches!(cfg.validate(), Err(PriqaError::Config(_))));
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut cfg = NetConfig::toy();
        cfg.enc_heads[0] = 3;
        assert!(matches!(cfg.validate(), Err(PriqaError::Config(_))));
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = NetConfig::toy();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: NetConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
