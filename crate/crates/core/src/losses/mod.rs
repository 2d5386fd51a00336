//! Content loss, patch-wise soft-histogram loss and their epoch schedule.

mod histogram;

pub use histogram::{soft_histogram, HistogramConfig, SoftHistogram};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Mean absolute difference.
pub fn l1_content_loss<T: Scalar>(g: &mut Graph<T>, sr: Var, hr: Var) -> Result<Var> {
    if g.shape(sr) != g.shape(hr) {
        return shape_err("l1", format!("{:?} vs {:?}", g.shape(sr), g.shape(hr)));
    }
    let d = g.sub(sr, hr)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Patch-wise histogram (EMD-style) loss between two `[N, C, H, W]` batches.
pub fn patchwise_emd_loss<T: Scalar>(
    g: &mut Graph<T>,
    sr: Var,
    hr: Var,
    cfg: &HistogramConfig,
) -> Result<Var> {
    g.patchwise_emd(sr, hr, cfg)
}

/// Weight of the histogram term: `lambda_p` for the first `cutoff_epochs`
/// epochs, zero afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSchedule {
    pub lambda_p: f64,
    pub cutoff_epochs: usize,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self { lambda_p: 0.125, cutoff_epochs: 5 }
    }
}

impl LossSchedule {
    /// Content loss only.
    pub fn content_only() -> Self {
        Self { lambda_p: 0.0, cutoff_epochs: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0) || !self.lambda_p.is_finite() {
            return Err(Error::Config(format!("lambda_p must be >= 0, got {}", self.lambda_p)));
        }
        Ok(())
    }

    /// `λ(epoch)` for a zero-based epoch index.
    pub fn weight(&self, epoch: usize) -> f64 {
        if epoch < self.cutoff_epochs {
            self.lambda_p
        } else {
            0.0
        }
    }
}

/// Graph handles of a combined loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub content: Var,
    /// Unweighted histogram loss; `None` when its weight was zero and the
    /// term was not computed.
    pub histogram: Option<Var>,
    pub weight: f64,
}

/// `L_C + λ(epoch) L_P`.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    sr: Var,
    hr: Var,
    epoch: usize,
    schedule: &LossSchedule,
    cfg: &HistogramConfig,
) -> Result<LossTerms> {
    schedule.validate()?;
    let content = l1_content_loss(g, sr, hr)?;
    let weight = schedule.weight(epoch);
    if weight == 0.0 {
        return Ok(LossTerms { total: content, content, histogram: None, weight });
    }
    let histogram = patchwise_emd_loss(g, sr, hr, cfg)?;
    let scaled = g.scale(histogram, T::lit(weight))?;
    let total = g.add(content, scaled)?;
    Ok(LossTerms { total, content, histogram: Some(histogram), weight })
}
