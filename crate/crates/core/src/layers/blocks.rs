use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ReduceKind, Var};

use super::{BoundParams, ModelConfig};

fn conv<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    name: &str,
    bias: bool,
) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = if bias { Some(p.get(&format!("{name}.bias"))?) } else { None };
    let pad = (g.shape(w)[2] - 1) / 2;
    g.conv2d(x, w, b, 1, pad)
}

fn dims<T: Scalar>(g: &Graph<T>, x: Var, op: &'static str, channels: usize) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [n, c, h, w] if c == channels => Ok([n, c, h, w]),
        ref s => shape_err(op, format!("expected [N, {channels}, H, W], got {s:?}")),
    }
}

/// Two serial convolutions with SiLU, concatenated and channel-shuffled.
pub fn csconv_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
) -> Result<Var> {
    dims(g, x, "csconv", cfg.channels)?;
    let a = conv(g, x, p, &format!("{prefix}.conv1"), true)?;
    let f1 = g.silu(a)?;
    let b = conv(g, f1, p, &format!("{prefix}.conv2"), true)?;
    let f2 = g.silu(b)?;
    let cat = g.concat(&[f1, f2], 1)?;
    if cfg.use_channel_shuffle {
        g.channel_shuffle(cat, cfg.shuffle_groups)
    } else {
        Ok(cat)
    }
}

/// Lambda layer: a global content lambda from softmax-normalized keys and
/// values plus per-position lambdas from a local convolution over values,
/// both applied to the queries.
pub fn gfe_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
) -> Result<Var> {
    let [n, c, h, w] = dims(g, x, "gfe", cfg.channels)?;
    let (k, v, heads, u, hw) = (cfg.qk_depth, cfg.value_depth, cfg.heads, cfg.kv_heads, h * w);
    let x = if cfg.use_layer_norm {
        let gamma = p.get(&format!("{prefix}.norm.gamma"))?;
        let beta = p.get(&format!("{prefix}.norm.beta"))?;
        g.layer_norm(x, gamma, beta, T::lit(cfg.layer_norm_eps), cfg.layer_norm_mode)?
    } else {
        x
    };
    let q = conv(g, x, p, &format!("{prefix}.to_q"), false)?;
    let q = g.reshape(q, &[n, heads, k, hw])?;
    let keys = conv(g, x, p, &format!("{prefix}.to_k"), false)?;
    let keys = g.reshape(keys, &[n, u, k, hw])?;
    let keys = g.softmax(keys, 3)?;
    let vals = conv(g, x, p, &format!("{prefix}.to_v"), false)?;
    let vals_flat = g.reshape(vals, &[n, u, v, hw])?;

    let content = g.contract(keys, vals_flat, "bukn,buvn->bkv")?;
    let y_content = g.contract(q, content, "bhkn,bkv->bhvn")?;

    let vals_5d = g.reshape(vals, &[n, u, v, h, w])?;
    let kernel = p.get(&format!("{prefix}.pos_conv.weight"))?;
    let position = g.conv3d_lambda(vals_5d, kernel)?;
    let position = g.reshape(position, &[n, k, v, hw])?;
    let y_position = g.contract(q, position, "bhkn,bkvn->bhvn")?;

    let y = g.add(y_content, y_position)?;
    g.reshape(y, &[n, c, h, w])
}

/// Channel attention from pooled descriptors, then spatial attention from
/// channel-pooled maps.
pub fn cbam_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
) -> Result<Var> {
    let shape = dims(g, x, "cbam", cfg.channels)?;
    if !cfg.use_cbam {
        return Ok(x);
    }
    let mlp = |g: &mut Graph<T>, z: Var| -> Result<Var> {
        let hidden = conv(g, z, p, &format!("{prefix}.mlp1"), true)?;
        let hidden = g.relu(hidden)?;
        conv(g, hidden, p, &format!("{prefix}.mlp2"), true)
    };
    let avg = g.reduce(x, ReduceKind::MeanSpatial)?;
    let max = g.reduce(x, ReduceKind::MaxSpatial)?;
    let a = mlp(g, avg)?;
    let b = mlp(g, max)?;
    let logits = g.add(a, b)?;
    let channel = g.sigmoid(logits)?;
    let channel = g.broadcast_to(channel, &shape)?;
    let x = g.mul(x, channel)?;

    let avg = g.reduce(x, ReduceKind::MeanChannel)?;
    let max = g.reduce(x, ReduceKind::MaxChannel)?;
    let pooled = g.concat(&[avg, max], 1)?;
    let logits = conv(g, pooled, p, &format!("{prefix}.spatial"), true)?;
    let spatial = g.sigmoid(logits)?;
    let spatial = g.broadcast_to(spatial, &shape)?;
    g.mul(x, spatial)
}

/// One local/global feature block: CSConv, then GFE, then CBAM.
pub fn lgfb_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
) -> Result<Var> {
    let x = csconv_forward(g, x, p, cfg, &format!("{prefix}.csconv"))?;
    let x = gfe_forward(g, x, p, cfg, &format!("{prefix}.gfe"))?;
    cbam_forward(g, x, p, cfg, &format!("{prefix}.cbam"))
}
