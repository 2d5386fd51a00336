use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::NormMode;

/// Architecture hyperparameters and ablation switches.
///
/// Field names double as the JSON config-file schema; missing fields take the
/// defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Intermediate feature channels `C`.
    pub channels: usize,
    pub num_lgfb: usize,
    /// Kernel sizes of the two serial CSConv convolutions.
    pub csconv_kernels: (usize, usize),
    pub shuffle_groups: usize,
    /// Query/key depth `k`.
    pub qk_depth: usize,
    /// Value depth `v`.
    pub value_depth: usize,
    /// Query heads `h`; `heads * value_depth` must equal `channels`.
    pub heads: usize,
    /// Key/value heads `u`.
    pub kv_heads: usize,
    /// Spatial extent `r` of the `1 x r x r` position-lambda kernel.
    pub lambda_conv_r: usize,
    /// Upscaling factor, one of 2, 3, 4.
    pub scale: usize,
    pub cbam_reduction: usize,
    pub cbam_spatial_kernel: usize,
    pub use_channel_shuffle: bool,
    pub use_cbam: bool,
    pub use_layer_norm: bool,
    pub use_bicubic_residual: bool,
    pub layer_norm_mode: NormMode,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            num_lgfb: 3,
            csconv_kernels: (3, 7),
            shuffle_groups: 4,
            qk_depth: 16,
            value_depth: 8,
            heads: 4,
            kv_heads: 4,
            lambda_conv_r: 25,
            scale: 2,
            cbam_reduction: 8,
            cbam_spatial_kernel: 7,
            use_channel_shuffle: true,
            use_cbam: true,
            use_layer_norm: true,
            use_bicubic_residual: true,
            layer_norm_mode: NormMode::PerSample,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Default configuration at the given scale.
    pub fn for_scale(scale: usize) -> Self {
        Self { scale, ..Self::default() }
    }

    /// Scale factors applied by successive pixel-shuffle stages.
    pub fn upsample_stages(&self) -> Vec<usize> {
        match self.scale {
            4 => vec![2, 2],
            s => vec![s],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if ![2, 3, 4].contains(&self.scale) {
            return fail(format!("unsupported scale {}; expected 2, 3 or 4", self.scale));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return fail(format!("channels must be positive and even, got {}", self.channels));
        }
        if self.num_lgfb == 0 {
            return fail("num_lgfb must be at least 1".into());
        }
        if self.shuffle_groups == 0 || !self.channels.is_multiple_of(self.shuffle_groups) {
            return fail(format!(
                "channels {} not divisible by shuffle_groups {}",
                self.channels, self.shuffle_groups
            ));
        }
        if self.heads * self.value_depth != self.channels {
            return fail(format!(
                "heads ({}) x value_depth ({}) must equal channels ({})",
                self.heads, self.value_depth, self.channels
            ));
        }
        if self.qk_depth == 0 || self.kv_heads == 0 {
            return fail("qk_depth and kv_heads must be positive".into());
        }
        for (what, k) in [
            ("lambda_conv_r", self.lambda_conv_r),
            ("csconv kernel", self.csconv_kernels.0),
            ("csconv kernel", self.csconv_kernels.1),
            ("cbam_spatial_kernel", self.cbam_spatial_kernel),
        ] {
            if k % 2 == 0 {
                return fail(format!("{what} must be odd, got {k}"));
            }
        }
        if self.use_cbam
            && (self.cbam_reduction == 0 || !self.channels.is_multiple_of(self.cbam_reduction))
        {
            return fail(format!(
                "cbam_reduction {} must divide channels {}",
                self.cbam_reduction, self.channels
            ));
        }
        if self.layer_norm_eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Canonical JSON text: struct field order, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// 64-bit FNV-1a of [`ModelConfig::canonical_json`].
    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical_json().as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_scale() {
        for s in [2, 3, 4] {
            ModelConfig::for_scale(s).validate().unwrap();
        }
        assert!(ModelConfig::for_scale(5).validate().is_err());
    }

    #[test]
    fn invariant_violations_are_config_errors() {
        let bad = [
            ModelConfig { heads: 3, ..Default::default() },
            ModelConfig { channels: 30, heads: 3, value_depth: 10, ..Default::default() },
            ModelConfig { lambda_conv_r: 24, ..Default::default() },
            ModelConfig { shuffle_groups: 5, ..Default::default() },
            ModelConfig { cbam_reduction: 5, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn partial_json_overrides_defaults() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"num_lgfb": 2, "scale": 4}"#).unwrap();
        assert_eq!(cfg.num_lgfb, 2);
        assert_eq!(cfg.scale, 4);
        assert_eq!(cfg.channels, 32);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"chanels": 2}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModelConfig::default();
        let b = ModelConfig { use_cbam: false, ..Default::default() };
        assert_eq!(a.hash(), ModelConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(upsample(4), vec![2, 2]);
        assert_eq!(upsample(3), vec![3]);
    }

    fn upsample(s: usize) -> Vec<usize> {
        ModelConfig::for_scale(s).upsample_stages()
    }
}
