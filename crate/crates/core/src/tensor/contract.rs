use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

use super::{Graph, Tensor, Var};

/// Pairwise einsum descriptor such as `"bukn,buvn->bkv"`.
///
/// Every index must appear in at least two of the three terms and at most
/// once per term: indices shared by both inputs and the output are batch
/// axes, indices shared only by the inputs are summed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractSpec {
    lhs: Vec<char>,
    rhs: Vec<char>,
    out: Vec<char>,
}

impl FromStr for ContractSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed contraction `{s}`"));
        let (inputs, out) = s.split_once("->").ok_or_else(bad)?;
        let (lhs, rhs) = inputs.split_once(',').ok_or_else(bad)?;
        let term = |t: &str| -> Result<Vec<char>> {
            let v: Vec<char> = t.trim().chars().collect();
            if v.iter().any(|c| !c.is_ascii_lowercase()) {
                return Err(bad());
            }
            let mut sorted = v.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != v.len() {
                return Err(Error::Config(format!("repeated index in `{t}` of `{s}`")));
            }
            Ok(v)
        };
        let spec = ContractSpec { lhs: term(lhs)?, rhs: term(rhs)?, out: term(out)? };
        for c in spec.lhs.iter().chain(&spec.rhs).chain(&spec.out) {
            let hits = [&spec.lhs, &spec.rhs, &spec.out].iter().filter(|t| t.contains(c)).count();
            if hits < 2 {
                return Err(Error::Config(format!("index `{c}` appears only once in `{s}`")));
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for ContractSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: &[char]| v.iter().collect::<String>();
        write!(f, "{},{}->{}", s(&self.lhs), s(&self.rhs), s(&self.out))
    }
}

impl ContractSpec {
    /// Descriptor for the gradient with respect to the left operand.
    fn grad_lhs(&self) -> Self {
        Self { lhs: self.out.clone(), rhs: self.rhs.clone(), out: self.lhs.clone() }
    }

    /// Descriptor for the gradient with respect to the right operand.
    fn grad_rhs(&self) -> Self {
        Self { lhs: self.lhs.clone(), rhs: self.out.clone(), out: self.rhs.clone() }
    }

    /// Evaluate on plain tensors.
    pub fn apply<T: Scalar>(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.rank() != self.lhs.len() || b.rank() != self.rhs.len() {
            return shape_err(
                "contract",
                format!("`{self}` applied to ranks {} and {}", a.rank(), b.rank()),
            );
        }
        let mut size: HashMap<char, usize> = HashMap::new();
        for (term, t) in [(&self.lhs, a), (&self.rhs, b)] {
            for (&c, &d) in term.iter().zip(t.shape()) {
                if *size.entry(c).or_insert(d) != d {
                    return shape_err(
                        "contract",
                        format!("index `{c}` has sizes {} and {d} in `{self}`", size[&c]),
                    );
                }
            }
        }
        if let Some(z) = self.trailing_batch() {
            return self.apply_trailing(a, b, &size, z);
        }
        let in_a = |c: &char| self.lhs.contains(c);
        let in_b = |c: &char| self.rhs.contains(c);
        let in_o = |c: &char| self.out.contains(c);
        let batch: Vec<char> = self.out.iter().copied().filter(|c| in_a(c) && in_b(c)).collect();
        let a_free: Vec<char> = self.out.iter().copied().filter(|c| in_a(c) && !in_b(c)).collect();
        let b_free: Vec<char> = self.out.iter().copied().filter(|c| in_b(c) && !in_a(c)).collect();
        let summed: Vec<char> = self.lhs.iter().copied().filter(|c| in_b(c) && !in_o(c)).collect();

        let prod = |idx: &[char]| idx.iter().map(|c| size[c]).product::<usize>();
        let (nb, m, k, n) = (prod(&batch), prod(&a_free), prod(&summed), prod(&b_free));

        let order = |term: &[char], want: &[&[char]]| -> Vec<usize> {
            want.iter()
                .flat_map(|grp| grp.iter().map(|c| term.iter().position(|x| x == c).unwrap()))
                .collect()
        };
        let a_perm = a.permute(&order(&self.lhs, &[&batch, &a_free, &summed]))?;
        let b_perm = b.permute(&order(&self.rhs, &[&batch, &summed, &b_free]))?;
        let (ad, bd) = (a_perm.data(), b_perm.data());
        let mut c = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            if m * k * n <= SMALL_PRODUCT {
                small_matmul(m, k, n, &ad[i * m * k..][..m * k], &bd[i * k * n..][..k * n], &mut c[i * m * n..][..m * n]);
                continue;
            }
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &ad[i * m * k..],
                (k as isize, 1),
                &bd[i * k * n..],
                (n as isize, 1),
                T::zero(),
                &mut c[i * m * n..],
                (n as isize, 1),
            );
        }
        let natural: Vec<char> = batch.iter().chain(&a_free).chain(&b_free).copied().collect();
        let shape: Vec<usize> = natural.iter().map(|c| size[c]).collect();
        let result = Tensor::new(shape, c)?;
        let to_out: Vec<usize> =
            self.out.iter().map(|c| natural.iter().position(|x| x == c).unwrap()).collect();
        result.permute(&to_out)
    }
}

/// Below this many multiply-adds a plain loop beats packing for GEMM.
const SMALL_PRODUCT: usize = 4096;

/// Accumulates in f64 so f32 outputs carry little more than one rounding.
fn small_matmul<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let wide = |v: &T| v.to_f64().unwrap_or(f64::NAN);
    let bw: Vec<f64> = b[..k * n].iter().map(wide).collect();
    let mut row = vec![0.0f64; n];
    for i in 0..m {
        row.iter_mut().for_each(|r| *r = 0.0);
        for (p, aik) in a[i * k..(i + 1) * k].iter().map(wide).enumerate() {
            row.iter_mut().zip(&bw[p * n..(p + 1) * n]).for_each(|(r, &b)| *r += aik * b);
        }
        c[i * n..(i + 1) * n].iter_mut().zip(&row).for_each(|(c, &r)| *c = T::lit(r));
    }
}

impl ContractSpec {
    /// Index that is the last axis of both operands and the output.
    fn trailing_batch(&self) -> Option<char> {
        let z = *self.out.last()?;
        (self.lhs.last() == Some(&z) && self.rhs.last() == Some(&z)).then_some(z)
    }

    /// Loop over every other index, multiplying contiguous rows along the
    /// shared trailing axis `z`.
    fn apply_trailing<T: Scalar>(
        &self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        size: &HashMap<char, usize>,
        z: char,
    ) -> Result<Tensor<T>> {
        let mut idx: Vec<char> = self.out.iter().copied().filter(|&c| c != z).collect();
        idx.extend(self.lhs.iter().copied().filter(|c| !self.out.contains(c)));
        let strides_of = |term: &[char]| -> Vec<usize> {
            let dims: Vec<usize> = term.iter().map(|c| size[c]).collect();
            let st = super::strides(&dims);
            idx.iter().map(|c| term.iter().position(|x| x == c).map_or(0, |p| st[p])).collect()
        };
        let (sa, sb, so) = (strides_of(&self.lhs), strides_of(&self.rhs), strides_of(&self.out));
        let dims: Vec<usize> = idx.iter().map(|c| size[c]).collect();
        let zn = size[&z];
        let shape: Vec<usize> = self.out.iter().map(|c| size[c]).collect();
        let mut out = vec![T::zero(); shape.iter().product()];
        let (ad, bd) = (a.data(), b.data());
        let total: usize = dims.iter().product();
        let mut counter = vec![0usize; dims.len()];
        let (mut oa, mut ob, mut oo) = (0usize, 0usize, 0usize);
        for _ in 0..total {
            let dst = &mut out[oo..oo + zn];
            for ((d, &x), &y) in dst.iter_mut().zip(&ad[oa..oa + zn]).zip(&bd[ob..ob + zn]) {
                *d += x * y;
            }
            for i in (0..dims.len()).rev() {
                counter[i] += 1;
                oa += sa[i];
                ob += sb[i];
                oo += so[i];
                if counter[i] < dims[i] {
                    break;
                }
                oa -= sa[i] * dims[i];
                ob -= sb[i] * dims[i];
                oo -= so[i] * dims[i];
                counter[i] = 0;
            }
        }
        Tensor::new(shape, out)
    }
}

impl<T: Scalar> Graph<T> {
    /// Batched tensor contraction described by an einsum-style string.
    pub fn contract(&mut self, a: Var, b: Var, spec: &str) -> Result<Var> {
        let spec: ContractSpec = spec.parse()?;
        let out = spec.apply(self.value(a), self.value(b))?;
        self.push(
            "contract",
            out,
            &[a, b],
            Box::new(move |g, p, _| {
                vec![
                    Some(spec.grad_lhs().apply(g, p[1]).expect("shapes checked in forward")),
                    Some(spec.grad_rhs().apply(p[0], g).expect("shapes checked in forward")),
                ]
            }),
        )
    }
}
