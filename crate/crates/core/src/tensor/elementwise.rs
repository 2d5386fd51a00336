use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::{Graph, Tensor, Var};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        // derivative given (input, output)
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(
            op,
            out,
            &[x],
            Box::new(move |g, p, y| {
                let data = g
                    .data()
                    .iter()
                    .zip(p[0].data())
                    .zip(y.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data).expect("same shape"))]
            }),
        )
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let op = kind.name();
        if va.shape() == vb.shape() {
            let out = va.zip_map(vb, |x, y| kind.apply(x, y));
            return self.push(
                op,
                out,
                &[a, b],
                Box::new(move |g, p, _| match kind {
                    Binary::Add => vec![Some(g.clone()), Some(g.clone())],
                    Binary::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
                    Binary::Mul => vec![
                        Some(g.zip_map(p[1], |g, b| g * b)),
                        Some(g.zip_map(p[0], |g, a| g * a)),
                    ],
                }),
            );
        }
        // scalar operand on either side
        let (big, small, small_first) = match (va.numel(), vb.numel()) {
            (_, 1) => (va, vb, false),
            (1, _) => (vb, va, true),
            _ => {
                return shape_err(op, format!("operands {:?} and {:?}", va.shape(), vb.shape()))
            }
        };
        let s = small.item();
        let out = if small_first {
            big.map(|x| kind.apply(s, x))
        } else {
            big.map(|x| kind.apply(x, s))
        };
        self.push(
            op,
            out,
            &[a, b],
            Box::new(move |g, p, _| {
                let (ta, tb) = (p[0], p[1]);
                let (ga, gb) = match kind {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|v| -v)),
                    Binary::Mul => {
                        let bcast = |other: &Tensor<T>| {
                            if other.numel() == 1 {
                                g.map(|v| v * other.item())
                            } else {
                                g.zip_map(other, |g, o| g * o)
                            }
                        };
                        (bcast(tb), bcast(ta))
                    }
                };
                let reduce = |grad: Tensor<T>, target: &Tensor<T>| {
                    if target.numel() == 1 && grad.numel() != 1 {
                        Tensor::full(target.shape().to_vec(), grad.sum())
                    } else {
                        grad
                    }
                };
                vec![Some(reduce(ga, ta)), Some(reduce(gb, tb))]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("scale", x, |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, |_, _| T::one())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "silu",
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "relu",
            x,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Subgradient `sign(x)`, zero at the origin.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, T::abs, |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, |x, _| x + x)
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(
            "clamp",
            x,
            move |v| v.max(lo).min(hi),
            move |x, _| if x > lo && x < hi { T::one() } else { T::zero() },
        )
    }

    /// Copy with a new shape of the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        self.push(
            "reshape",
            out,
            &[x],
            Box::new(|g, p, _| vec![Some(g.clone().with_shape(p[0].shape().to_vec()))]),
        )
    }

    /// Expand size-1 axes to `shape` (same rank).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).shape().to_vec();
        if src.len() != shape.len()
            || src.iter().zip(shape).any(|(&s, &d)| s != d && s != 1)
        {
            return shape_err("broadcast_to", format!("{src:?} -> {shape:?}"));
        }
        let index = broadcast_index(&src, shape);
        let v = self.value(x);
        let out = Tensor::new(shape.to_vec(), index.iter().map(|&i| v.data()[i]).collect())?;
        self.push(
            "broadcast_to",
            out,
            &[x],
            Box::new(move |g, p, _| {
                let mut acc = Tensor::zeros(p[0].shape().to_vec());
                for (&i, &v) in index.iter().zip(g.data()) {
                    acc.data_mut()[i] += v;
                }
                vec![Some(acc)]
            }),
        )
    }
}

fn broadcast_index(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let src_strides = super::strides(src);
    let dst_strides = super::strides(dst);
    (0..super::numel(dst))
        .map(|flat| {
            let mut rem = flat;
            let mut off = 0;
            for d in 0..dst.len() {
                let c = rem / dst_strides[d];
                rem %= dst_strides[d];
                if src[d] != 1 {
                    off += c * src_strides[d];
                }
            }
            off
        })
        .collect()
}
