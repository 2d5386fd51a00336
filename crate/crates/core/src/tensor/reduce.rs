use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::{Graph, Tensor, Var};

/// Reductions used by pooling and the losses.
///
/// The spatial and channel variants expect `[N, C, H, W]` input and keep the
/// reduced axes with size 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    /// Sum of all elements, shape `[1]`.
    Sum,
    /// Mean of all elements, shape `[1]`.
    Mean,
    /// Max over `H, W` -> `[N, C, 1, 1]`.
    MaxSpatial,
    /// Mean over `H, W` -> `[N, C, 1, 1]`.
    MeanSpatial,
    /// Max over `C` -> `[N, 1, H, W]`.
    MaxChannel,
    /// Mean over `C` -> `[N, 1, H, W]`.
    MeanChannel,
}

#[derive(Clone, Copy)]
enum Combine {
    Sum,
    Mean,
    Max,
}

impl<T: Scalar> Graph<T> {
    pub fn reduce(&mut self, x: Var, kind: ReduceKind) -> Result<Var> {
        let rank = self.value(x).rank();
        let spatial = || {
            if rank != 4 {
                shape_err("reduce", format!("{kind:?} needs rank 4, got {rank}"))
            } else {
                Ok(())
            }
        };
        match kind {
            ReduceKind::Sum => self.reduce_axes(x, 0, rank, Combine::Sum, vec![1]),
            ReduceKind::Mean => self.reduce_axes(x, 0, rank, Combine::Mean, vec![1]),
            ReduceKind::MaxSpatial | ReduceKind::MeanSpatial => {
                spatial()?;
                let s = self.value(x).shape();
                let out = vec![s[0], s[1], 1, 1];
                let c = if kind == ReduceKind::MaxSpatial { Combine::Max } else { Combine::Mean };
                self.reduce_axes(x, 2, 4, c, out)
            }
            ReduceKind::MaxChannel | ReduceKind::MeanChannel => {
                spatial()?;
                let s = self.value(x).shape();
                let out = vec![s[0], 1, s[2], s[3]];
                let c = if kind == ReduceKind::MaxChannel { Combine::Max } else { Combine::Mean };
                self.reduce_axes(x, 1, 2, c, out)
            }
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean)
    }

    /// Sum over axes `start..end`, keeping them with size 1.
    pub fn sum_axes(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if start >= end || end > shape.len() {
            return shape_err("sum_axes", format!("axes {start}..{end} for rank {}", shape.len()));
        }
        let mut out = shape.clone();
        out[start..end].iter_mut().for_each(|d| *d = 1);
        self.reduce_axes(x, start, end, Combine::Sum, out)
    }

    /// Reduce the contiguous axis range `start..end`, viewing the input as
    /// `[outer, reduced, inner]`. Max ties resolve to the first index.
    fn reduce_axes(
        &mut self,
        x: Var,
        start: usize,
        end: usize,
        combine: Combine,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        let outer: usize = shape[..start].iter().product();
        let red: usize = shape[start..end].iter().product();
        let inner: usize = shape[end..].iter().product();
        let d = v.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = match combine {
            Combine::Max => vec![0usize; outer * inner],
            _ => Vec::new(),
        };
        let inv = T::one() / T::from_usize(red).unwrap();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * red * inner + i;
                let slot = o * inner + i;
                match combine {
                    Combine::Sum | Combine::Mean => {
                        let mut acc = T::zero();
                        for r in 0..red {
                            acc += d[base + r * inner];
                        }
                        out[slot] = if matches!(combine, Combine::Mean) { acc * inv } else { acc };
                    }
                    Combine::Max => {
                        let mut best = 0;
                        for r in 1..red {
                            if d[base + r * inner] > d[base + best * inner] {
                                best = r;
                            }
                        }
                        out[slot] = d[base + best * inner];
                        argmax[slot] = base + best * inner;
                    }
                }
            }
        }
        let op = match combine {
            Combine::Sum => "sum",
            Combine::Mean => "mean",
            Combine::Max => "max",
        };
        let out = Tensor::new(out_shape, out)?;
        self.push(
            op,
            out,
            &[x],
            Box::new(move |g, p, _| {
                let mut gi = Tensor::zeros(p[0].shape().to_vec());
                let gd = g.data();
                let dst = gi.data_mut();
                match combine {
                    Combine::Max => {
                        for (slot, &src) in argmax.iter().enumerate() {
                            dst[src] += gd[slot];
                        }
                    }
                    Combine::Sum | Combine::Mean => {
                        let scale = if matches!(combine, Combine::Mean) { inv } else { T::one() };
                        for o in 0..outer {
                            for r in 0..red {
                                for i in 0..inner {
                                    dst[o * red * inner + r * inner + i] = gd[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                }
                vec![Some(gi)]
            }),
        )
    }
}
