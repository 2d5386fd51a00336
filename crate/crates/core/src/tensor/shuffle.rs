//! Pure data-movement operators. Each is a gather through an index table, so
//! the backward pass is the matching scatter-add.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

use super::{permute_index, Graph, Tensor, Var};

/// Source channel for output channel `out` of a `groups`-way shuffle.
pub(crate) fn channel_shuffle_source(out: usize, channels: usize, groups: usize) -> usize {
    let per = channels / groups;
    (out % per) * groups + out / per
}

impl<T: Scalar> Graph<T> {
    /// `out[i] = x[table[i]]`.
    fn gather(
        &mut self,
        op: &'static str,
        x: Var,
        table: Vec<usize>,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let src = self.value(x).data();
        let out = Tensor::new(shape, table.iter().map(|&i| src[i]).collect())?;
        let table = Arc::new(table);
        self.push(
            op,
            out,
            &[x],
            Box::new(move |g, p, _| {
                let mut gi = Tensor::zeros(p[0].shape().to_vec());
                let dst = gi.data_mut();
                for (&i, &v) in table.iter().zip(g.data()) {
                    dst[i] += v;
                }
                vec![Some(gi)]
            }),
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let table = permute_index(&shape, axes)?;
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        self.gather("permute", x, table, out_shape)
    }

    /// ShuffleNet channel shuffle: input channel `c` lands on
    /// `(c mod g) * (C / g) + c / g`.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return shape_err("channel_shuffle", format!("expected [N,C,H,W], got {shape:?}"));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "channel_shuffle: {c} channels not divisible by {groups} groups"
            )));
        }
        let mut table = Vec::with_capacity(n * c * hw);
        for b in 0..n {
            for oc in 0..c {
                let ic = channel_shuffle_source(oc, c, groups);
                table.extend((0..hw).map(|i| (b * c + ic) * hw + i));
            }
        }
        self.gather("channel_shuffle", x, table, shape)
    }

    /// `[N, s²C, H, W] -> [N, C, sH, sW]` with
    /// `out[n, c, s·h+dy, s·w+dx] = in[n, c·s² + dy·s + dx, h, w]`.
    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return shape_err("pixel_shuffle", format!("expected [N,C,H,W], got {shape:?}"));
        }
        let (n, cin, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if s == 0 || cin % (s * s) != 0 {
            return shape_err("pixel_shuffle", format!("{cin} channels not divisible by {s}²"));
        }
        let c = cin / (s * s);
        let (oh, ow) = (h * s, w * s);
        let mut table = Vec::with_capacity(n * cin * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let ic = ch * s * s + (y % s) * s + (x % s);
                        table.push(((b * cin + ic) * h + y / s) * w + x / s);
                    }
                }
            }
        }
        self.gather("pixel_shuffle", x, table, vec![n, c, oh, ow])
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for rank {}", base.len()));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&sizes) {
                let d = self.value(x).data();
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push(
            "concat",
            out,
            xs,
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(p.len());
                for (t, &len) in p.iter().zip(&sizes) {
                    let mut part = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        part.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    offset += len;
                    grads.push(Some(Tensor::new(t.shape().to_vec(), part).expect("slice")));
                }
                grads
            }),
        )
    }
}
