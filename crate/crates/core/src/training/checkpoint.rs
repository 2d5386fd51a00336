use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::layers::{fnv1a, ModelConfig, Parameters};
use crate::tensor::Tensor;

use super::{AdamConfig, AdamState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LATC";
pub const CHECKPOINT_VERSION: u32 = 1;

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Everything needed to run a model or continue training it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters<f32>,
    pub adam: Option<AdamState<f32>>,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Checkpoint {
    /// Untrained weights only, no optimizer state.
    pub fn from_params(config: ModelConfig, params: Parameters<f32>, seed: u64) -> Self {
        Self { config, params, adam: None, epoch: 0, seed, step: 0 }
    }

    /// Error unless the stored config hashes the same as `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if self.config.hash() != expected.hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {} does not match the requested config {}",
                self.config.canonical_json(),
                expected.canonical_json()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = self.config.canonical_json();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(json.as_bytes());
        out.extend(fnv1a(json.as_bytes()).to_le_bytes());
        for v in [self.epoch, self.seed, self.step] {
            out.extend(v.to_le_bytes());
        }

        let mut tensors: Vec<(String, &Tensor<f32>)> =
            self.params.iter().map(|(n, p)| (n.to_string(), &p.value)).collect();
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend(a.t.to_le_bytes());
                for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                    out.extend(v.to_le_bytes());
                }
                tensors.extend(a.m.iter().map(|(n, t)| (format!("{M_PREFIX}{n}"), t)));
                tensors.extend(a.v.iter().map(|(n, t)| (format!("{V_PREFIX}{n}"), t)));
            }
        }

        out.extend((tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:02x?}; not a LATIS checkpoint",
                &bytes[..4]
            )));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}; this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let len = r.u32("config length")? as usize;
        let json = r.take(len, "config")?;
        let stored = r.u64("config hash")?;
        let actual = fnv1a(json);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        let json = std::str::from_utf8(json)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let config: ModelConfig = serde_json::from_str(json)
            .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        config.validate()?;
        let epoch = r.u64("epoch")?;
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;

        let adam_header = match r.take(1, "optimizer flag")?[0] {
            0 => None,
            1 => {
                let t = r.u64("optimizer step")?;
                let mut f = [0.0; 4];
                for v in &mut f {
                    *v = f64::from_le_bytes(r.array("optimizer settings")?);
                }
                Some((t, AdamConfig { lr: f[0], beta1: f[1], beta2: f[2], eps: f[3] }))
            }
            b => return Err(Error::Checkpoint(format!("bad optimizer flag {b}"))),
        };

        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for i in 0..count {
            let (name, t) = r.tensor(i)?;
            if let Some(n) = name.strip_prefix(M_PREFIX) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(V_PREFIX) {
                v.insert(n.to_string(), t);
            } else {
                params.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }

        let params = Parameters::from_tensors(&config, params)?;
        let adam = match adam_header {
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(Error::Checkpoint("optimizer moments without optimizer header".into())),
            Some((t, cfg)) => {
                for (name, p) in params.iter() {
                    for (which, map) in [("m", &m), ("v", &v)] {
                        if map.get(name).map(Tensor::shape) != Some(p.value.shape()) {
                            return Err(Error::Checkpoint(format!(
                                "optimizer moment {which} for `{name}` missing or misshapen"
                            )));
                        }
                    }
                }
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(Error::Checkpoint("optimizer moments for unknown parameters".into()));
                }
                Some(AdamState { config: cfg, t, m, v })
            }
        };
        Ok(Self { config, params, adam, epoch, seed, step })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "file truncated while reading {what} ({} of {n} bytes at offset {})",
                self.bytes.len().saturating_sub(self.pos),
                self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn tensor(&mut self, index: usize) -> Result<(String, Tensor<f32>)> {
        let label = format!("tensor #{index}");
        let len = self.u32(&format!("{label} name length"))? as usize;
        let name = std::str::from_utf8(self.take(len, &format!("{label} name"))?)
            .map_err(|_| Error::Checkpoint(format!("{label} name is not UTF-8")))?
            .to_string();
        let what = format!("tensor `{name}`");
        let rank = self.u32(&format!("{what} rank"))? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{what} has implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u32(&format!("{what} shape")).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = self.take(numel.saturating_mul(4), &format!("{what} data"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor::new(dims, data)?))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
