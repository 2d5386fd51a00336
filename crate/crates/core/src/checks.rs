//! Finite-difference gradient suite over every operator and the full
//! network loss, with direct-loop oracles for the linear operators.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{latis_forward, BoundParams, ModelConfig, Parameters};
use crate::losses::{combined_loss, l1_content_loss, patchwise_emd_loss, HistogramConfig, LossSchedule};
use crate::tensor::gradcheck::{
    finite_difference_check, finite_difference_check_away_from_ties, GradReport,
};
use crate::tensor::{ContractSpec, Graph, NormMode, ReduceKind, Tensor, Var};

/// Threshold for operators without kinks.
pub const SMOOTH_TOLERANCE: f64 = 1e-6;
/// Threshold for compositions containing max reductions, ReLU or `|x|`.
pub const NONSMOOTH_TOLERANCE: f64 = 1e-3;
/// Threshold for the histogram loss.
pub const EMD_TOLERANCE: f64 = 1e-4;
/// Threshold for 32-bit agreement with the direct-loop oracles.
pub const ORACLE_TOLERANCE: f64 = 1e-6;
/// Largest fraction of probes the full-network check may drop as ties.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

/// Names accepted by [`run_check`], in suite order.
pub const CHECKS: &[&str] = &[
    "conv2d",
    "conv3d_lambda",
    "contract",
    "softmax",
    "silu",
    "sigmoid",
    "elementwise",
    "layer_norm",
    "channel_shuffle",
    "pixel_shuffle",
    "concat",
    "broadcast",
    "reduce_mean",
    "reduce_max",
    "l1",
    "emd",
    "full",
];

/// Outcome of one suite entry.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradReport,
    pub tolerance: f64,
    /// Largest `|fast - loop| / max(1, |loop|)` in 32-bit, for operators
    /// with a loop oracle.
    pub oracle_error: Option<f64>,
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        let skipped_ok = self.report.skipped as f64
            <= MAX_SKIPPED_FRACTION * (self.report.checked + self.report.skipped) as f64;
        self.report.max_rel_error < self.tolerance
            && skipped_ok
            && self.oracle_error.is_none_or(|e| e <= ORACLE_TOLERANCE)
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// `sum(w * y)` for a fixed random `w`.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(y), seed));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn oracle_error(fast: &Tensor<f32>, reference: &Tensor<f64>) -> f64 {
    fast.data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a as f64 - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Direct nested-loop cross-correlation.
pub fn direct_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data_mut()[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Direct loops for the position-lambda convolution: values `[N, u, v, H, W]`,
/// kernel `[k, u, 1, r, r]`.
pub fn direct_conv3d_lambda(values: &Tensor<f64>, kernel: &Tensor<f64>) -> Tensor<f64> {
    let s = values.shape();
    let (n, u, dv, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let (dk, r) = (kernel.shape()[0], kernel.shape()[4]);
    let p = (r / 2) as isize;
    let mut out = Tensor::zeros(vec![n, dk, dv, h, w]);
    for b in 0..n {
        for kk in 0..dk {
            for vv in 0..dv {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for uu in 0..u {
                            for dy in 0..r {
                                for dx in 0..r {
                                    let iy = y as isize + dy as isize - p;
                                    let ix = x as isize + dx as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += values.data()
                                        [(((b * u + uu) * dv + vv) * h + iy as usize) * w + ix as usize]
                                        * kernel.data()[((kk * u + uu) * r + dy) * r + dx];
                                }
                            }
                        }
                        out.data_mut()[(((b * dk + kk) * dv + vv) * h + y) * w + x] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Content-lambda contraction `bukn,buvn->bkv` by explicit summation.
pub fn direct_content_lambda(keys: &Tensor<f64>, values: &Tensor<f64>) -> Tensor<f64> {
    let (b, u, k, n) = (keys.shape()[0], keys.shape()[1], keys.shape()[2], keys.shape()[3]);
    let v = values.shape()[2];
    let mut out = Tensor::zeros(vec![b, k, v]);
    for bi in 0..b {
        for kk in 0..k {
            for vv in 0..v {
                let mut acc = 0.0;
                for uu in 0..u {
                    for nn in 0..n {
                        acc += keys.data()[((bi * u + uu) * k + kk) * n + nn]
                            * values.data()[((bi * u + uu) * v + vv) * n + nn];
                    }
                }
                out.data_mut()[(bi * k + kk) * v + vv] = acc;
            }
        }
    }
    out
}

type Scalarized = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn unary(x: Tensor<f64>, op: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'static, seed: u64) -> (Vec<Tensor<f64>>, Scalarized) {
    (vec![x], Box::new(move |g, v| {
        let y = op(g, v[0])?;
        weighted_sum(g, y, seed)
    }))
}

/// Parameter gradients of `L_C + λ L_P` through the whole default network
/// on a `1 x 1 x 8 x 8` input, probing at most `per_tensor` elements of each
/// parameter tensor.
pub fn full_network_check(per_tensor: Option<usize>) -> Result<GradReport> {
    let cfg = ModelConfig::default();
    let params = Parameters::<f64>::init(&cfg, 5)?;
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let lr = Tensor::from_fn(vec![1, 1, 8, 8], |_| rng.gen_range(0.2..0.8));
    let hr = Tensor::from_fn(vec![1, 1, 16, 16], |_| rng.gen_range(0.2..0.8));
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, p)| p.value.clone()).collect();
    let (schedule, hist) = (LossSchedule::default(), HistogramConfig::default());
    finite_difference_check_away_from_ties(&inputs, 1e-4, per_tensor, NONSMOOTH_TOLERANCE, |g, v| {
        let bound = BoundParams::from_vars(names.iter().cloned().zip(v.iter().copied()));
        let x = g.constant(lr.clone());
        let y = g.constant(hr.clone());
        let sr = latis_forward(g, x, &bound, &cfg)?;
        Ok(combined_loss(g, sr, y, 0, &schedule, &hist)?.total)
    })
}

/// Probes per parameter tensor in the suite's full-network entry.
pub const FULL_NETWORK_PROBES: usize = 40;

/// Run one named entry of the suite.
pub fn run_check(name: &str) -> Result<CheckResult> {
    let start = Instant::now();
    let name: &'static str = CHECKS
        .iter()
        .copied()
        .find(|&c| c == name)
        .ok_or_else(|| Error::Usage(format!("unknown check `{name}`; expected one of {}", CHECKS.join(", "))))?;
    let mut tolerance = SMOOTH_TOLERANCE;
    let mut oracle = None;
    let mut h = 1e-4;
    let (inputs, f): (Vec<Tensor<f64>>, Scalarized) = match name {
        "conv2d" => {
            let (x, w, b) = (random(&[1, 2, 5, 5], 1), random(&[3, 2, 3, 3], 2), random(&[3], 3));
            let fast = {
                let mut g = Graph::<f32>::new();
                let (xv, wv, bv) = (g.constant(x.cast()), g.constant(w.cast()), g.constant(b.cast()));
                let y = g.conv2d(xv, wv, Some(bv), 1, 1)?;
                g.value(y).clone()
            };
            oracle = Some(oracle_error(&fast, &direct_conv2d(&x, &w, Some(&b), 1, 1)));
            (vec![random(&[2, 3, 6, 6], 4), random(&[4, 3, 3, 3], 5), random(&[4], 6)], Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                weighted_sum(g, y, 7)
            }))
        }
        "conv3d_lambda" => {
            let (x, k) = (random(&[1, 1, 2, 4, 4], 8), random(&[2, 1, 1, 3, 3], 9));
            let fast = {
                let mut g = Graph::<f32>::new();
                let (xv, kv) = (g.constant(x.cast()), g.constant(k.cast()));
                let y = g.conv3d_lambda(xv, kv)?;
                g.value(y).clone()
            };
            oracle = Some(oracle_error(&fast, &direct_conv3d_lambda(&x, &k)));
            (vec![random(&[1, 2, 3, 8, 8], 10), random(&[3, 2, 1, 5, 5], 11)], Box::new(|g, v| {
                let y = g.conv3d_lambda(v[0], v[1])?;
                weighted_sum(g, y, 12)
            }))
        }
        "contract" => {
            let (k, v) = (random(&[2, 3, 4, 6], 13), random(&[2, 3, 5, 6], 14));
            let spec: ContractSpec = "bukn,buvn->bkv".parse()?;
            let fast = spec.apply(&k.cast::<f32>(), &v.cast::<f32>())?;
            oracle = Some(oracle_error(&fast, &direct_content_lambda(&k, &v)));
            (vec![k, v, random(&[2, 2, 4, 6], 15)], Box::new(|g, v| {
                let lc = g.contract(v[0], v[1], "bukn,buvn->bkv")?;
                let y = g.contract(v[2], lc, "bhkn,bkv->bhvn")?;
                weighted_sum(g, y, 16)
            }))
        }
        "softmax" => unary(random(&[2, 3, 4, 5], 17), |g, x| g.softmax(x, 3), 18),
        "silu" => unary(random(&[2, 3, 4, 4], 19), |g, x| g.silu(x), 20),
        "sigmoid" => unary(random(&[2, 3, 4, 4], 21), |g, x| g.sigmoid(x), 22),
        "elementwise" => (vec![random(&[2, 3, 4], 23), random(&[2, 3, 4], 24)], Box::new(|g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.mul(b, v[1])?;
            let d = g.scale(c, 1.7)?;
            let e = g.square(d)?;
            weighted_sum(g, e, 25)
        })),
        "layer_norm" => {
            let x = random(&[2, 3, 4, 4], 26);
            (vec![x, random(&[3], 27), random(&[3], 28)], Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5, NormMode::PerSample)?;
                weighted_sum(g, y, 29)
            }))
        }
        "channel_shuffle" => unary(random(&[2, 8, 3, 3], 30), |g, x| g.channel_shuffle(x, 4), 31),
        "pixel_shuffle" => unary(random(&[2, 8, 3, 3], 32), |g, x| g.pixel_shuffle(x, 2), 33),
        "concat" => (vec![random(&[2, 2, 3, 3], 34), random(&[2, 3, 3, 3], 35)], Box::new(|g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            weighted_sum(g, y, 36)
        })),
        "broadcast" => unary(random(&[2, 3, 1, 1], 37), |g, x| g.broadcast_to(x, &[2, 3, 4, 4]), 38),
        "reduce_mean" => unary(random(&[2, 3, 4, 4], 39), |g, x| {
            let a = g.reduce(x, ReduceKind::MeanSpatial)?;
            let b = g.reduce(x, ReduceKind::MeanChannel)?;
            let a = g.broadcast_to(a, &[2, 3, 4, 4])?;
            let b = g.broadcast_to(b, &[2, 3, 4, 4])?;
            g.mul(a, b)
        }, 40),
        "reduce_max" => {
            tolerance = NONSMOOTH_TOLERANCE;
            unary(random(&[2, 3, 4, 4], 41), |g, x| {
                let a = g.reduce(x, ReduceKind::MaxSpatial)?;
                let b = g.reduce(x, ReduceKind::MaxChannel)?;
                let a = g.broadcast_to(a, &[2, 3, 4, 4])?;
                let b = g.broadcast_to(b, &[2, 3, 4, 4])?;
                g.mul(a, b)
            }, 42)
        }
        "l1" => {
            tolerance = NONSMOOTH_TOLERANCE;
            (vec![random(&[1, 1, 6, 6], 43), random(&[1, 1, 6, 6], 44)], Box::new(|g, v| {
                l1_content_loss(g, v[0], v[1])
            }))
        }
        "emd" => {
            tolerance = EMD_TOLERANCE;
            // slopes of order 1/W = 512 need a smaller step than 1e-4
            h = 1e-6;
            let img = |seed| random(&[1, 1, 8, 16], seed).map(|v| 0.5 + 0.5 * v);
            (vec![img(45), img(46)], Box::new(|g, v| {
                patchwise_emd_loss(g, v[0], v[1], &HistogramConfig::default())
            }))
        }
        "full" => {
            let report = full_network_check(Some(FULL_NETWORK_PROBES))?;
            return Ok(CheckResult {
                name,
                report,
                tolerance: NONSMOOTH_TOLERANCE,
                oracle_error: None,
                elapsed: start.elapsed(),
            });
        }
        _ => unreachable!("name validated against CHECKS"),
    };
    let report = if tolerance == SMOOTH_TOLERANCE || tolerance == EMD_TOLERANCE {
        finite_difference_check(&inputs, h, None, f)?
    } else {
        finite_difference_check_away_from_ties(&inputs, h, None, tolerance, f)?
    };
    Ok(CheckResult { name, report, tolerance, oracle_error: oracle, elapsed: start.elapsed() })
}

/// Every entry of [`CHECKS`].
pub fn run_all() -> Result<Vec<CheckResult>> {
    CHECKS.iter().map(|c| run_check(c)).collect()
}
