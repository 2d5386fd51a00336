use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::{Graph, Tensor, Var};

/// Which elements share layer-norm statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// One mean/variance per sample over all of `(C, H, W)`.
    #[default]
    PerSample,
    /// One mean/variance per pixel over the channels.
    PerPosition,
}

impl<T: Scalar> Graph<T> {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return shape_err("softmax", format!("axis {axis} for rank {}", shape.len()));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = v.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |r: usize| o * len * inner + r * inner + i;
                let m = (0..len).map(|r| d[at(r)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for r in 0..len {
                    let e = (d[at(r)] - m).exp();
                    out[at(r)] = e;
                    z += e;
                }
                for r in 0..len {
                    out[at(r)] /= z;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(
            "softmax",
            out,
            &[x],
            Box::new(move |g, _, y| {
                let (gd, yd) = (g.data(), y.data());
                let mut gi = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |r: usize| o * len * inner + r * inner + i;
                        let dot: T = (0..len).map(|r| gd[at(r)] * yd[at(r)]).sum();
                        for r in 0..len {
                            gi[at(r)] = yd[at(r)] * (gd[at(r)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), gi).expect("shape"))]
            }),
        )
    }

    /// Layer normalization of `[N, C, H, W]` with per-channel affine `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: NormMode,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return shape_err("layer_norm", format!("expected [N,C,H,W], got {shape:?}"));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return shape_err(
                    "layer_norm",
                    format!("affine shape {:?}, expected [{c}]", self.value(p).shape()),
                );
            }
        }
        let groups = Groups { n, c, hw, mode };
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); groups.count()];
        let inv = T::one() / T::from_usize(groups.size()).unwrap();
        for (gi, r) in rstd.iter_mut().enumerate() {
            let mean = groups.members(gi).map(|i| xd[i]).sum::<T>() * inv;
            let var = groups.members(gi).map(|i| (xd[i] - mean).powi(2)).sum::<T>() * inv;
            *r = T::one() / (var + eps).sqrt();
            for i in groups.members(gi) {
                xhat[i] = (xd[i] - mean) * *r;
            }
        }
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gd[(i / hw) % c] + bd[(i / hw) % c])
            .collect();
        let out = Tensor::new(shape, out)?;
        self.push(
            "layer_norm",
            out,
            &[x, gamma, beta],
            Box::new(move |g, p, _| {
                let gd = g.data();
                let gamma = p[1].data();
                let mut dx = vec![T::zero(); gd.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, (&go, &xh)) in gd.iter().zip(&xhat).enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] += go * xh;
                    dbeta[ch] += go;
                }
                for (gi, &r) in rstd.iter().enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for i in groups.members(gi) {
                        let d = gd[i] * gamma[(i / hw) % c];
                        mean_d += d;
                        mean_dx += d * xhat[i];
                    }
                    mean_d *= inv;
                    mean_dx *= inv;
                    for i in groups.members(gi) {
                        let d = gd[i] * gamma[(i / hw) % c];
                        dx[i] = r * (d - mean_d - xhat[i] * mean_dx);
                    }
                }
                vec![
                    Some(Tensor::new(g.shape().to_vec(), dx).expect("shape")),
                    Some(Tensor::new(vec![c], dgamma).expect("shape")),
                    Some(Tensor::new(vec![c], dbeta).expect("shape")),
                ]
            }),
        )
    }
}

#[derive(Clone, Copy)]
struct Groups {
    n: usize,
    c: usize,
    hw: usize,
    mode: NormMode,
}

impl Groups {
    fn count(&self) -> usize {
        match self.mode {
            NormMode::PerSample => self.n,
            NormMode::PerPosition => self.n * self.hw,
        }
    }

    fn size(&self) -> usize {
        match self.mode {
            NormMode::PerSample => self.c * self.hw,
            NormMode::PerPosition => self.c,
        }
    }

    fn members(&self, group: usize) -> Box<dyn Iterator<Item = usize>> {
        let Groups { c, hw, .. } = *self;
        match self.mode {
            NormMode::PerSample => Box::new(group * c * hw..(group + 1) * c * hw),
            NormMode::PerPosition => {
                let (b, pos) = (group / hw, group % hw);
                Box::new((0..c).map(move |ch| (b * c + ch) * hw + pos))
            }
        }
    }
}
