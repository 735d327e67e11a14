//! Minibatch training of the heatmap networks: warmup + cosine learning-rate
//! schedule, decoupled-weight-decay Adam, and an exponential moving average
//! of the weights.
//!
//! Samples within a batch are differentiated in parallel, but gradients are
//! summed in batch order and every random draw comes from seeded streams, so
//! a run is reproducible bit for bit.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use thiserror::Error;

use crate::coords::{CoordConvention, PickSet};
use crate::losses::{LossConfig, LossError, LossKind};
use crate::net::{Gradients, Net, NetConfig, NetError, Tensor4};
use crate::volgrid::{Heatmap, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch {epoch} outside schedule of {epochs} epochs")]
    EpochOutOfRange { epoch: f64, epochs: usize },
    #[error("parameter shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("sample {index}: input {input:?} / target {target:?} do not fit the network")]
    SampleShape {
        index: usize,
        input: [usize; 4],
        target: [usize; 4],
    },
    #[error("loss diverged at epoch {epoch}, step {step}: {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossKind,
    pub loss_config: LossConfig,
    /// Seeds batch shuffling.
    pub seed: u64,
}

impl TrainConfig {
    /// 64 epochs, lr 1e-3, no weight decay, 4 warmup epochs, batch 32,
    /// EMA 0.999, heatmap-weighted loss.
    pub fn variant_a_preset() -> Self {
        Self {
            epochs: 64,
            base_lr: 1e-3,
            warmup_epochs: 4,
            weight_decay: 0.0,
            batch_size: 32,
            ema_decay: 0.999,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossKind::HeatmapWeighted,
            loss_config: LossConfig::default(),
            seed: 0,
        }
    }

    /// 25 epochs, lr 1e-3, weight decay 1e-2, 5 warmup epochs, batch 32,
    /// EMA 0.999, positive/negative balanced loss.
    pub fn variant_b_preset() -> Self {
        Self {
            epochs: 25,
            warmup_epochs: 5,
            weight_decay: 1e-2,
            loss: LossKind::PosNegBalanced,
            ..Self::variant_a_preset()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return fail("warmup_epochs must be smaller than epochs");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return fail("ema_decay must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive");
        }
        self.loss_config.validate()?;
        Ok(())
    }

    /// Learning rate at a (possibly fractional) epoch.
    pub fn lr_at(&self, epoch: f64) -> Result<f64, TrainError> {
        lr_at(self.base_lr, self.warmup_epochs, self.epochs, epoch)
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup` epochs, then
/// `base_lr · ½(1 + cos πt)` with `t = (epoch − warmup) / (epochs − warmup)`.
pub fn lr_at(base_lr: f64, warmup: usize, epochs: usize, epoch: f64) -> Result<f64, TrainError> {
    if !(epoch >= 0.0 && epoch < epochs as f64) {
        return Err(TrainError::EpochOutOfRange { epoch, epochs });
    }
    let w = warmup as f64;
    if epoch < w {
        return Ok(base_lr * epoch / w);
    }
    let t = (epoch - w) / (epochs as f64 - w);
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// `ema ← decay·ema + (1 − decay)·params`, evaluated as
/// `ema + (1 − decay)·(params − ema)` in `f64` so that `ema == params` is an
/// exact fixed point.
pub fn ema_update(ema: &mut [f32], params: &[f32], decay: f64) -> Result<(), TrainError> {
    if ema.len() != params.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "ema has {} values, params {}",
            ema.len(),
            params.len()
        )));
    }
    let take = 1.0 - decay;
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = if decay == 0.0 {
            p
        } else {
            (*e as f64 + take * (p as f64 - *e as f64)) as f32
        };
    }
    Ok(())
}

/// Decoupled-weight-decay Adam state for one network.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(net: &Net<f32>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f32>> = net
            .params()
            .params()
            .iter()
            .map(|p| vec![0.0; p.data.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// (frozen groups) are left untouched.
    pub fn step(&mut self, net: &mut Net<f32>, grads: &Gradients<f32>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (i, p) in net.params_mut().params_mut().iter_mut().enumerate() {
            let Some(g) = grads.by_index(i) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p.data[k] *= decay;
                p.data[k] -= step_size * m[k] / (v[k].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// One network input window and its target heatmap window.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor4<f32>,
    pub target: Tensor4<f32>,
}

/// Zero-mean, unit-variance copy of a volume (constant volumes map to 0).
pub fn standardize(vol: &Volume3D) -> Volume3D {
    let n = vol.values().len() as f64;
    let mean = vol.values().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol
        .values()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    let values = vol
        .values()
        .iter()
        .map(|&v| ((v as f64 - mean) * inv) as f32)
        .collect();
    Volume3D::new(vol.dims(), values, vol.spacing()).expect("finite standardized values")
}

/// Draws `count` training windows of size `window` from one scene. A
/// `positive_fraction` of them are centered (up to a random shift) on a
/// particle; the rest are uniform. The volume should already be
/// standardized.
#[allow(clippy::too_many_arguments)]
pub fn sample_windows(
    volume: &Volume3D,
    target: &Heatmap,
    picks: &PickSet,
    conv: CoordConvention,
    window: [usize; 3],
    count: usize,
    positive_fraction: f64,
    seed: u64,
) -> Result<Vec<Sample>, TrainError> {
    let dims = volume.dims();
    if target.dims() != dims {
        return Err(TrainError::Config("target and volume dims differ".into()));
    }
    if (0..3).any(|a| window[a] > dims[a]) {
        return Err(TrainError::Config(format!(
            "window {window:?} larger than volume {dims:?}"
        )));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut draw = |n: usize| -> usize {
        ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * n as f64) as usize
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let positive =
            !picks.is_empty() && (draw(1 << 20) as f64) < positive_fraction * (1 << 20) as f64;
        let origin: [usize; 3] = if positive {
            let p = &picks.records[draw(picks.len())];
            let center = [p.z, p.y, p.x].map(|v| conv.phys_to_pixel(v).floor() as isize);
            let mut o = [0usize; 3];
            for a in 0..3 {
                let shift = draw(window[a]) as isize;
                let max_origin = (dims[a] - window[a]) as isize;
                o[a] = (center[a] - shift).clamp(0, max_origin) as usize;
            }
            o
        } else {
            [0, 1, 2].map(|a| draw(dims[a] - window[a] + 1))
        };
        let input = volume.crop(origin, window)?;
        let tgt = target.crop(origin, window)?;
        out.push(Sample {
            input: Tensor4::from_volume(&input),
            target: Tensor4::from_heatmap(&tgt),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    /// Mean minibatch loss over the epoch.
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Net<f32>,
    pub ema: Net<f32>,
    /// Dataset loss of the initial weights.
    pub initial_loss: f64,
    /// Dataset loss of the final raw weights.
    pub final_loss: f64,
    pub history: Vec<EpochRecord>,
}

fn sample_loss(
    net: &Net<f32>,
    s: &Sample,
    cfg: &TrainConfig,
) -> Result<(f64, Gradients<f32>), TrainError> {
    let pass = net.forward_pass(&s.input)?;
    let (loss, grad) =
        cfg.loss
            .evaluate(pass.output().data(), s.target.data(), &cfg.loss_config)?;
    let upstream = Tensor4::new(s.target.shape(), grad)?;
    Ok((loss, pass.backward(net, &upstream)?))
}

/// Mean per-sample loss of `net` over `data`.
pub fn dataset_loss(net: &Net<f32>, data: &[Sample], cfg: &TrainConfig) -> Result<f64, TrainError> {
    let losses = data
        .par_iter()
        .map(|s| {
            let y = net.forward(&s.input)?;
            Ok(cfg
                .loss
                .evaluate(y.data(), s.target.data(), &cfg.loss_config)?
                .0)
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(losses.iter().sum::<f64>() / data.len().max(1) as f64)
}

/// Trains a fresh network for `net_config`.
pub fn train(
    data: &[Sample],
    net_config: &NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with(data, Net::new(net_config.clone())?, cfg, |_| {})
}

/// Trains `net` in place of a fresh one, reporting each finished epoch.
pub fn train_with(
    data: &[Sample],
    mut net: Net<f32>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (ins, outs) = (net.config().input_shape(), net.config().output_shape());
    for (index, s) in data.iter().enumerate() {
        if s.input.shape() != ins || s.target.shape() != outs {
            return Err(TrainError::SampleShape {
                index,
                input: s.input.shape(),
                target: s.target.shape(),
            });
        }
    }

    let initial_loss = dataset_loss(&net, data, cfg)?;
    let mut ema = net.clone();
    let mut opt = AdamW::new(&net, cfg);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        // Fisher-Yates with a per-epoch stream.
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        for i in (1..order.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut first_lr = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cfg.lr_at(epoch as f64 + step as f64 / steps_per_epoch as f64)?;
            if step == 0 {
                first_lr = lr;
            }
            let results = batch
                .par_iter()
                .map(|&i| sample_loss(&net, &data[i], cfg))
                .collect::<Result<Vec<_>, TrainError>>()?;
            let mut iter = results.into_iter();
            let (mut batch_loss, mut grads) = iter.next().expect("non-empty batch");
            for (l, g) in iter {
                batch_loss += l;
                grads.accumulate(&g);
            }
            let inv = 1.0 / batch.len() as f64;
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            grads.scale(inv as f32);
            opt.step(&mut net, &grads, lr);
            for (e, p) in ema
                .params_mut()
                .params_mut()
                .iter_mut()
                .zip(net.params().params())
            {
                ema_update(&mut e.data, &p.data, cfg.ema_decay)?;
            }
            loss_sum += batch_loss;
        }
        let record = EpochRecord {
            epoch,
            lr: first_lr,
            mean_loss: loss_sum / steps_per_epoch as f64,
        };
        on_epoch(&record);
        history.push(record);
    }

    let final_loss = dataset_loss(&net, data, cfg)?;
    if !final_loss.is_finite() {
        return Err(TrainError::Diverged {
            epoch: cfg.epochs,
            step: 0,
            loss: final_loss,
        });
    }
    Ok(TrainOutcome {
        net,
        ema,
        initial_loss,
        final_loss,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::variant_a_preset();
        assert!((cfg.lr_at(2.0).unwrap() - 5e-4).abs() < 1e-18);
        assert_eq!(cfg.lr_at(4.0).unwrap(), 1e-3);
        assert_eq!(cfg.lr_at(0.0).unwrap(), 0.0);
        let mid = 4.0 + (64.0 - 4.0) / 2.0;
        assert!((cfg.lr_at(mid).unwrap() - 5e-4).abs() < 1e-15);
        assert!(cfg.lr_at(63.999).unwrap() < 1e-9);
        assert!(cfg.lr_at(64.0).is_err());
        assert!(cfg.lr_at(-0.5).is_err());
    }

    #[test]
    fn ema_examples() {
        let mut e = vec![0.3f32, -1.0];
        ema_update(&mut e, &[0.3, -1.0], 0.999).unwrap();
        assert_eq!(e, vec![0.3, -1.0]);
        let mut e = vec![0.0f32];
        ema_update(&mut e, &[1.0], 0.999).unwrap();
        assert!((e[0] - 0.001).abs() < 1e-9);
        let mut e = vec![5.0f32, 2.0];
        ema_update(&mut e, &[1.0, 7.5], 0.0).unwrap();
        assert_eq!(e, vec![1.0, 7.5]);
        assert!(ema_update(&mut e, &[1.0], 0.5).is_err());
    }

    #[test]
    fn presets_validate() {
        TrainConfig::variant_a_preset().validate().unwrap();
        let b = TrainConfig::variant_b_preset();
        b.validate().unwrap();
        assert_eq!((b.epochs, b.warmup_epochs, b.weight_decay), (25, 5, 1e-2));
        let bad = TrainConfig {
            warmup_epochs: 64,
            ..TrainConfig::variant_a_preset()
        };
        assert!(bad.validate().is_err());
    }
}
