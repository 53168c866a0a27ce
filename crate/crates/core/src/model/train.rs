use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{total_loss, CodecModel, RateSet};
use crate::error::{config_err, Error, Result};
use crate::metrics::MsSsimConfig;
use crate::quant::{QuantMode, Quantizer, QuantizerConfig};
use crate::tensor::{Adam, AdamConfig, LrSchedule, Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Optimizer steps; the learning-rate schedule spans all of them.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub rates: RateSet,
    pub msssim_scales: usize,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return config_err("training needs at least one step and a positive batch size");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("learning rate {} must be positive", self.lr));
        }
        MsSsimConfig::standard(self.msssim_scales)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub l2: f64,
    pub msssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// Mean total loss over records `range`.
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.steps[range];
        s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps_done: usize,
    pub mean_loss: f64,
}

/// Train on `data` (each `1 × 3 × h × w`, all the same size) with Adam,
/// stochastic quantization at every rate in the rate set, and the total
/// loss. `on_epoch` runs after every completed epoch and after the final
/// step.
pub fn train<T: Real>(
    model: &mut CodecModel<T>,
    data: &[Tensor<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &CodecModel<T>) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return config_err("training set is empty");
    }
    let ms_cfg = MsSsimConfig::standard(cfg.msssim_scales)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut quant = Quantizer::new(QuantizerConfig::new(
        cfg.rates.bits()[0],
        QuantMode::Stochastic,
        cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
    )?)?;
    let mut adam = Adam::new(model.store(), cfg.adam)?;
    let schedule = LrSchedule {
        base: cfg.lr,
        total: cfg.steps,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut epoch = 0;
    let mut epoch_losses = Vec::new();
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        if cursor >= data.len() {
            if step > 0 {
                report(&mut on_epoch, model, epoch, step, &mut epoch_losses)?;
                epoch += 1;
            }
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch).min(data.len());
        let parts: Vec<Tensor<T>> = order[cursor..end]
            .iter()
            .map(|&i| data[i].clone())
            .collect();
        cursor = end;
        let batch = Tensor::stack0(&parts)?;

        let mut tape = Tape::new();
        let pv = tape.bind_params(model.store());
        let x = tape.constant(batch);
        let recons: Vec<_> = model
            .variable_rate_forward(&mut tape, &pv, x, &cfg.rates, &mut quant)?
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        if recons.iter().any(|&r| !tape.value(r).all_finite()) {
            return Err(Error::Domain(format!("reconstruction became non-finite at step {step}")));
        }
        let loss = total_loss(&mut tape, x, &recons, &ms_cfg)?;
        let value = |v| tape.value(v).data()[0].as_f64();
        let (total, l2, msssim) = (value(loss.total), value(loss.l2), value(loss.msssim));
        if !total.is_finite() {
            return Err(Error::Domain(format!(
                "loss became non-finite at step {step}"
            )));
        }
        let store = model.store_mut();
        store.zero_grads();
        tape.backward_into(loss.total, store)?;
        let lr = schedule.at(step);
        adam.step(store, lr)?;
        epoch_losses.push(total);
        log.steps.push(StepRecord {
            step,
            epoch,
            lr,
            total,
            l2,
            msssim,
        });
    }
    report(&mut on_epoch, model, epoch, cfg.steps, &mut epoch_losses)?;
    Ok(log)
}

fn report<T: Real>(
    on_epoch: &mut impl FnMut(&EpochReport, &CodecModel<T>) -> Result<()>,
    model: &CodecModel<T>,
    epoch: usize,
    steps_done: usize,
    losses: &mut Vec<f64>,
) -> Result<()> {
    let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    losses.clear();
    on_epoch(
        &EpochReport {
            epoch,
            steps_done,
            mean_loss,
        },
        model,
    )
}
