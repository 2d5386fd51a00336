use serde::Serialize;

use crate::error::Result;

use super::params::param_specs;
use super::ModelConfig;

/// Low-resolution `(height, width)` at which complexity is reported.
pub const REFERENCE_LR_SIZE: (usize, usize) = (80, 64);

/// Size and cost of a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ModelInfo {
    pub params: usize,
    /// Multiply-accumulates of the 2-D convolutions, one FLOP per MAC.
    ///
    /// This is the figure common profilers report for this architecture: the
    /// position-lambda convolution and the tensor contractions are not
    /// counted.
    pub flops: u64,
    /// Two FLOPs per multiply-accumulate over every convolution, the
    /// position-lambda convolution and every contraction.
    pub full_flops: u64,
}

#[derive(Default)]
struct Tally {
    conv: u64,
    other: u64,
}

impl Tally {
    fn conv(&mut self, cout: usize, cin: usize, k: usize, pixels: usize) {
        self.conv += (cout * cin * k * k * pixels) as u64;
    }
}

/// Parameter count and FLOPs for one `lr_size` input image.
pub fn model_info(cfg: &ModelConfig, lr_size: (usize, usize)) -> Result<ModelInfo> {
    cfg.validate()?;
    let params = param_specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum();
    let c = cfg.channels;
    let (k, v, heads, u, r) =
        (cfg.qk_depth, cfg.value_depth, cfg.heads, cfg.kv_heads, cfg.lambda_conv_r);
    let mut n = lr_size.0 * lr_size.1;
    let mut t = Tally::default();

    t.conv(c, 1, 3, n);
    for _ in 0..cfg.num_lgfb {
        let (k1, k2) = cfg.csconv_kernels;
        t.conv(c / 2, c, k1, n);
        t.conv(c / 2, c / 2, k2, n);
        t.conv(k * heads, c, 1, n);
        t.conv(k * u, c, 1, n);
        t.conv(v * u, c, 1, n);
        // position lambdas, content lambda, then both query products
        t.other += (k * u * r * r * v * n + u * k * v * n + 2 * heads * k * v * n) as u64;
        if cfg.use_cbam {
            let hidden = c / cfg.cbam_reduction;
            // shared MLP on the average- and max-pooled vectors
            t.conv(hidden, c, 1, 2);
            t.conv(c, hidden, 1, 2);
            t.conv(1, 2, cfg.cbam_spatial_kernel, n);
        }
    }
    for s in cfg.upsample_stages() {
        t.conv(s * s * c, c, 1, n);
        n *= s * s;
    }
    t.conv(1, c, 3, n);
    Ok(ModelInfo { params, flops: t.conv, full_flops: 2 * (t.conv + t.other) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Parameters;

    #[test]
    fn params_match_instantiated_model() {
        for s in [2, 3, 4] {
            let cfg = ModelConfig::for_scale(s);
            let info = model_info(&cfg, REFERENCE_LR_SIZE).unwrap();
            assert_eq!(info.params, Parameters::<f32>::zeros(&cfg).unwrap().count());
        }
    }

    #[test]
    fn flops_scale_with_pixels() {
        let cfg = ModelConfig::default();
        let a = model_info(&cfg, (10, 10)).unwrap();
        let b = model_info(&cfg, (20, 10)).unwrap();
        // Everything except the pooled CBAM MLP is per pixel.
        let mlp = 3 * 2 * 2 * (32 * 4) as u64;
        assert_eq!(b.flops - mlp, 2 * (a.flops - mlp));
        assert!(a.full_flops > 2 * a.flops);
    }
}
