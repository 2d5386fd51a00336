use crate::error::{shape_err, Result};
use crate::metrics::upsample_tensor;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

use super::{lgfb_forward, BoundParams, ModelConfig, Parameters};

/// Full network on a `[N, 1, H, W]` low-resolution batch, giving
/// `[N, 1, sH, sW]`.
///
/// The output is not clamped; callers converting to images clamp to `[0, 1]`.
pub fn latis_forward<T: Scalar>(
    g: &mut Graph<T>,
    lr: Var,
    p: &BoundParams,
    cfg: &ModelConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(lr).to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return shape_err("latis", format!("expected [N, 1, H, W], got {shape:?}"));
    }
    let conv = |g: &mut Graph<T>, x: Var, name: &str| -> Result<Var> {
        let w = p.get(&format!("{name}.weight"))?;
        let b = p.get(&format!("{name}.bias"))?;
        let pad = (g.shape(w)[2] - 1) / 2;
        g.conv2d(x, w, Some(b), 1, pad)
    };
    let mut x = conv(g, lr, "shallow")?;
    for b in 0..cfg.num_lgfb {
        x = lgfb_forward(g, x, p, cfg, &format!("lgfb{b}"))?;
    }
    for (j, s) in cfg.upsample_stages().into_iter().enumerate() {
        x = conv(g, x, &format!("up{j}"))?;
        x = g.pixel_shuffle(x, s)?;
    }
    let out = conv(g, x, "tail")?;
    if !cfg.use_bicubic_residual {
        return Ok(out);
    }
    let base = upsample_tensor(g.value(lr), cfg.scale)?;
    let base = g.constant(base);
    g.add(out, base)
}

/// Configuration and weights of a network instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Latis<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Scalar> Latis<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Network whose output is exactly the bicubic upsample of its input.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let params = Parameters::zeros(&config)?;
        Ok(Self { config, params })
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.constant(lr.clone());
        let y = latis_forward(&mut g, x, &bound, &self.config)?;
        Ok(g.value(y).clone())
    }
}
