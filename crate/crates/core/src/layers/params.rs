use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Name, shape and initializer of one learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv(specs: &mut Vec<ParamSpec>, name: &str, cout: usize, cin: usize, k: usize, bias: bool) {
    specs.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![cout, cin, k, k],
        init: Init::KaimingUniform { fan_in: cin * k * k },
    });
    if bias {
        specs.push(ParamSpec { name: format!("{name}.bias"), shape: vec![cout], init: Init::Zeros });
    }
}

/// Every learnable tensor of the network, in construction order.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let mut s = Vec::new();
    conv(&mut s, "shallow", c, 1, 3, true);
    for b in 0..cfg.num_lgfb {
        let p = format!("lgfb{b}");
        let (k1, k2) = cfg.csconv_kernels;
        conv(&mut s, &format!("{p}.csconv.conv1"), c / 2, c, k1, true);
        conv(&mut s, &format!("{p}.csconv.conv2"), c / 2, c / 2, k2, true);
        if cfg.use_layer_norm {
            s.push(ParamSpec { name: format!("{p}.gfe.norm.gamma"), shape: vec![c], init: Init::Ones });
            s.push(ParamSpec { name: format!("{p}.gfe.norm.beta"), shape: vec![c], init: Init::Zeros });
        }
        conv(&mut s, &format!("{p}.gfe.to_q"), cfg.qk_depth * cfg.heads, c, 1, false);
        conv(&mut s, &format!("{p}.gfe.to_k"), cfg.qk_depth * cfg.kv_heads, c, 1, false);
        conv(&mut s, &format!("{p}.gfe.to_v"), cfg.value_depth * cfg.kv_heads, c, 1, false);
        let r = cfg.lambda_conv_r;
        s.push(ParamSpec {
            name: format!("{p}.gfe.pos_conv.weight"),
            shape: vec![cfg.qk_depth, cfg.kv_heads, 1, r, r],
            init: Init::KaimingUniform { fan_in: cfg.kv_heads * r * r },
        });
        if cfg.use_cbam {
            let hidden = c / cfg.cbam_reduction;
            conv(&mut s, &format!("{p}.cbam.mlp1"), hidden, c, 1, true);
            conv(&mut s, &format!("{p}.cbam.mlp2"), c, hidden, 1, true);
            conv(&mut s, &format!("{p}.cbam.spatial"), 1, 2, cfg.cbam_spatial_kernel, true);
        }
    }
    for (j, st) in cfg.upsample_stages().into_iter().enumerate() {
        conv(&mut s, &format!("up{j}"), st * st * c, c, 1, true);
    }
    conv(&mut s, "tail", 1, c, 3, true);
    s
}

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered, uniquely named learnable tensors.
///
/// Iteration order is construction order, which is fixed by the config, so
/// it is stable across save and load.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    map: IndexMap<String, Param<T>>,
}

/// Graph handles for a bound parameter set.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Handles already recorded on a graph, e.g. probe inputs of a
    /// finite-difference check.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl<T: Scalar> Parameters<T> {
    /// Seeded initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = param_specs(cfg)
            .into_iter()
            .map(|spec| {
                let value = match spec.init {
                    Init::Zeros => Tensor::zeros(spec.shape),
                    Init::Ones => Tensor::ones(spec.shape),
                    Init::KaimingUniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        Tensor::from_fn(spec.shape, |_| T::lit(rng.gen_range(-bound..bound)))
                    }
                };
                (spec.name, Param { value, grad: None })
            })
            .collect();
        Ok(Self { map })
    }

    /// All-zero parameters: the network then reduces to its bicubic residual.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let map = param_specs(cfg)
            .into_iter()
            .map(|s| (s.name, Param { value: Tensor::zeros(s.shape), grad: None }))
            .collect();
        Ok(Self { map })
    }

    /// Assemble from named tensors, checking names and shapes against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let specs = param_specs(cfg);
        if specs.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut map = IndexMap::new();
        for (spec, (name, value)) in specs.iter().zip(tensors) {
            if spec.name != name || spec.shape != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match expected `{}` {:?}",
                    value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            map.insert(name, Param { value, grad: None });
        }
        Ok(Self { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Record every parameter as a gradient-requiring leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        let vars = self
            .map
            .iter()
            .map(|(name, p)| {
                let v = g.param(p.value.clone());
                g.label(v, name.clone());
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Record every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams {
        let vars = self
            .map
            .iter()
            .map(|(name, p)| (name.clone(), g.constant(p.value.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Add the graph's leaf gradients into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &BoundParams) {
        for (name, p) in self.map.iter_mut() {
            let Some(grad) = bound.vars.get(name).and_then(|&v| g.grad(v)) else { continue };
            match &mut p.grad {
                Some(acc) => acc.add_assign(grad),
                slot => *slot = Some(grad.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.map.values_mut().for_each(|p| p.grad = None);
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            map: self
                .map
                .iter()
                .map(|(k, p)| {
                    (k.clone(), Param { value: p.value.cast(), grad: p.grad.as_ref().map(Tensor::cast) })
                })
                .collect(),
        }
    }
}
