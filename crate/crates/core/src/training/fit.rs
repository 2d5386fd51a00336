use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{latis_forward, ModelConfig, Parameters};
use crate::losses::{combined_loss, HistogramConfig, LossSchedule};
use crate::tensor::{Graph, Tensor};

use super::{adam_step, AdamConfig, AdamState, Checkpoint};

/// Batch size used at each scale when none is given.
pub fn default_batch(scale: usize) -> usize {
    match scale {
        2 => 64,
        3 => 48,
        _ => 32,
    }
}

/// Optimization settings that are not part of the architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    /// Seeds weight initialization.
    pub seed: u64,
    pub adam: AdamConfig,
    pub schedule: LossSchedule,
    pub histogram: HistogramConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            steps_per_epoch: 100,
            batch: default_batch(2),
            seed: 0,
            adam: AdamConfig::default(),
            schedule: LossSchedule::default(),
            histogram: HistogramConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.batch == 0 {
            return Err(Error::Config("steps_per_epoch and batch must be positive".into()));
        }
        self.adam.validate()?;
        self.schedule.validate()?;
        self.histogram.validate()
    }
}

/// One optimizer step, rendered as `epoch,step,loss_c,loss_p,lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    /// Global zero-based step index.
    pub step: u64,
    pub loss_c: f32,
    /// Unweighted histogram loss, `None` once its weight is zero.
    pub loss_p: Option<f32>,
    pub weight: f64,
    pub total: f32,
    pub lr: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},", self.epoch, self.step, self.loss_c)?;
        match self.loss_p {
            Some(p) => write!(f, "{p}")?,
            None => f.write_str("skipped")?,
        }
        write!(f, ",{}", self.lr)
    }
}

/// Header line of the step log.
pub const LOG_HEADER: &str = "epoch,step,loss_c,loss_p,lr";

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_loss_c: f64,
    pub mean_loss_p: Option<f64>,
}

impl fmt::Display for EpochSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {}: loss {:.6} (content {:.6}", self.epoch, self.mean_loss, self.mean_loss_c)?;
        if let Some(p) = self.mean_loss_p {
            write!(f, ", histogram {p:.6}")?;
        }
        write!(f, ") over {} steps", self.steps)
    }
}

/// Model weights, optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: ModelConfig,
    cfg: TrainConfig,
    params: Parameters<f32>,
    adam: AdamState<f32>,
    epoch: usize,
    step: u64,
}

impl Trainer {
    /// Fresh weights from `cfg.seed`.
    pub fn new(model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = Parameters::init(&model, cfg.seed)?;
        Self::with_params(model, cfg, params)
    }

    pub fn with_params(model: ModelConfig, cfg: TrainConfig, params: Parameters<f32>) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let adam = AdamState::new(&params, cfg.adam)?;
        Ok(Self { model, cfg, params, adam, epoch: 0, step: 0 })
    }

    /// Continue from a checkpoint; optimizer moments are restored when saved.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ckpt.seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {}, not {}",
                ckpt.seed, cfg.seed
            )));
        }
        let adam = match ckpt.adam {
            Some(mut a) => {
                a.config = cfg.adam;
                a
            }
            None => AdamState::new(&ckpt.params, cfg.adam)?,
        };
        Ok(Self {
            model: ckpt.config,
            cfg,
            params: ckpt.params,
            adam,
            epoch: ckpt.epoch as usize,
            step: ckpt.step,
        })
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Parameters<f32> {
        &self.params
    }

    pub fn adam(&self) -> &AdamState<f32> {
        &self.adam
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.clone(),
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            epoch: self.epoch as u64,
            seed: self.cfg.seed,
            step: self.step,
        }
    }

    /// One update on an explicit batch, weighting the losses for the current
    /// epoch. State is left untouched on error.
    pub fn step_on(&mut self, lr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<StepLog> {
        let mut g = Graph::new();
        // run to the loss so the diagnostic can name the first bad tensor
        g.set_check_finite(false);
        let bound = self.params.bind(&mut g);
        let x = g.constant(lr.clone());
        let y = g.constant(hr.clone());
        let sr = latis_forward(&mut g, x, &bound, &self.model)?;
        let terms = combined_loss(&mut g, sr, y, self.epoch, &self.cfg.schedule, &self.cfg.histogram)?;
        let total = g.value(terms.total).item();
        if !total.is_finite() {
            let tensor = g.first_non_finite().unwrap_or_else(|| "loss".into());
            return Err(Error::Diverged { step: self.step, tensor });
        }
        g.backward(terms.total)?;

        let mut params = self.params.clone();
        params.zero_grad();
        params.accumulate_grads(&g, &bound);
        if let Some((name, _)) =
            params.iter().find(|(_, p)| p.grad.as_ref().is_some_and(|t| !t.is_finite()))
        {
            return Err(Error::Diverged { step: self.step, tensor: format!("gradient of {name}") });
        }
        adam_step(&mut params, &mut self.adam)?;
        params.zero_grad();
        self.params = params;

        let log = StepLog {
            epoch: self.epoch,
            step: self.step,
            loss_c: g.value(terms.content).item(),
            loss_p: terms.histogram.map(|h| g.value(h).item()),
            weight: terms.weight,
            total,
            lr: self.cfg.adam.lr,
        };
        self.step += 1;
        Ok(log)
    }

    /// One update on the dataset batch for the current step.
    pub fn train_step(&mut self, ds: &Dataset) -> Result<StepLog> {
        if ds.scale() != self.model.scale {
            return Err(Error::Config(format!(
                "dataset scale {} does not match model scale {}",
                ds.scale(),
                self.model.scale
            )));
        }
        let (lr, hr) = ds.sample_batch::<f32>(self.cfg.batch, self.step)?;
        self.step_on(&lr, &hr)
    }

    /// `steps_per_epoch` updates, then advance the epoch counter.
    pub fn run_epoch(&mut self, ds: &Dataset, mut on_step: impl FnMut(&StepLog)) -> Result<EpochSummary> {
        let n = self.cfg.steps_per_epoch;
        let (mut total, mut content, mut hist) = (0.0, 0.0, None::<f64>);
        for _ in 0..n {
            let log = self.train_step(ds)?;
            on_step(&log);
            total += log.total as f64;
            content += log.loss_c as f64;
            if let Some(p) = log.loss_p {
                *hist.get_or_insert(0.0) += p as f64;
            }
        }
        let summary = EpochSummary {
            epoch: self.epoch,
            steps: n,
            mean_loss: total / n as f64,
            mean_loss_c: content / n as f64,
            mean_loss_p: hist.map(|h| h / n as f64),
        };
        self.epoch += 1;
        Ok(summary)
    }

    /// Run epochs until `cfg.epochs` have completed.
    pub fn run(
        &mut self,
        ds: &Dataset,
        mut on_step: impl FnMut(&StepLog),
        mut on_epoch: impl FnMut(&EpochSummary),
    ) -> Result<Vec<EpochSummary>> {
        let mut summaries = Vec::new();
        while self.epoch < self.cfg.epochs {
            let s = self.run_epoch(ds, &mut on_step)?;
            on_epoch(&s);
            summaries.push(s);
        }
        Ok(summaries)
    }
}

/// Train from scratch for `cfg.epochs` epochs, returning the final checkpoint
/// and the per-epoch means.
pub fn fit(
    ds: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepLog),
) -> Result<(Checkpoint, Vec<EpochSummary>)> {
    let mut t = Trainer::new(model.clone(), cfg.clone())?;
    let summaries = t.run(ds, on_step, |_| {})?;
    Ok((t.checkpoint(), summaries))
}
