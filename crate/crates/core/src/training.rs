//! Losses, the cosine-with-restarts schedule, Adam, and the training loop.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ops, Tape};
use crate::degradation::PatchPair;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{network, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[default]
    L1,
    #[serde(rename = "MSE")]
    Mse,
    Charbonnier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub hr_patch: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub restart_period: u64,
    pub total_iters: u64,
    pub loss_type: LossKind,
    /// Weight of the LR reconstruction term.
    pub lambda_recon: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 36,
            hr_patch: 128,
            lr_init: 2e-4,
            lr_min: 1e-7,
            restart_period: 250_000,
            total_iters: 1_000_000,
            loss_type: LossKind::L1,
            lambda_recon: 0.0,
            seed: 0,
            checkpoint_every: 50_000,
        }
    }
}

impl TrainConfig {
    /// CPU-sized schedule: two cosine periods over 2000 steps.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            hr_patch: 32,
            lr_init: 1e-3,
            restart_period: 1_000,
            total_iters: 2_000,
            checkpoint_every: 500,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_init && self.lr_init.is_finite()) {
            return Err(Error::config("lr_min", format!("need 0 <= lr_min < lr_init, got {} / {}", self.lr_min, self.lr_init)));
        }
        if self.restart_period == 0 {
            return Err(Error::config("restart_period", "must be >= 1"));
        }
        if self.total_iters > 0 && self.restart_period > self.total_iters {
            return Err(Error::config("restart_period", format!("{} exceeds total_iters {}", self.restart_period, self.total_iters)));
        }
        if !(self.lambda_recon >= 0.0 && self.lambda_recon.is_finite()) {
            return Err(Error::config("lambda_recon", "must be finite and >= 0"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be >= 1"));
        }
        Ok(())
    }

    /// Checks the pairing of loss weights with the model's auxiliary head.
    pub fn validate_with(&self, model: &ModelConfig) -> Result<()> {
        self.validate()?;
        model.validate()?;
        if self.lambda_recon > 0.0 && !model.with_car_head {
            return Err(Error::config("lambda_recon", "lambda_recon > 0 needs model.with_car_head = true"));
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts:
/// `lr_min + (lr_init - lr_min) * (1 + cos(pi * t / T)) / 2`, `t = iter mod T`.
pub fn cosine_lr(iter: u64, cfg: &TrainConfig) -> Result<f64> {
    if iter >= cfg.total_iters {
        return Err(Error::domain(format!("iteration {iter} outside 0..{}", cfg.total_iters)));
    }
    if cfg.restart_period == 0 {
        return Err(Error::config("restart_period", "must be >= 1"));
    }
    let t = (iter % cfg.restart_period) as f64 / cfg.restart_period as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

fn check_pair<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("loss between {:?} and {:?}", pred.shape(), gt.shape())));
    }
    if pred.is_empty() {
        return Err(Error::shape("loss over an empty tensor"));
    }
    Ok(())
}

/// Mean-reduced pixel loss. Charbonnier is `sqrt(d^2 + eps^2) - eps`, so it is
/// zero for identical inputs like the other two.
pub fn pixel_loss<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, kind: LossKind) -> Result<f64> {
    check_pair(pred, gt)?;
    let eps2 = CHARBONNIER_EPS * CHARBONNIER_EPS;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let d = (p - g).to_f64().unwrap_or(f64::NAN);
            match kind {
                LossKind::L1 => d.abs(),
                LossKind::Mse => d * d,
                LossKind::Charbonnier => (d * d + eps2).sqrt() - CHARBONNIER_EPS,
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Gradient of [`pixel_loss`] with respect to `pred`, scaled by `weight`.
pub fn pixel_loss_grad<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, kind: LossKind, weight: f64) -> Result<Tensor<T>> {
    check_pair(pred, gt)?;
    let k = weight / pred.len() as f64;
    let eps2 = CHARBONNIER_EPS * CHARBONNIER_EPS;
    pred.zip_map(gt, |p, g| {
        let d = (p - g).to_f64().unwrap_or(f64::NAN);
        let gd = match kind {
            LossKind::L1 => {
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossKind::Mse => 2.0 * d,
            LossKind::Charbonnier => d / (d * d + eps2).sqrt(),
        };
        T::lit(gd * k)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: u64,
    #[serde(rename = "l_HR")]
    pub l_hr: f64,
    /// Zero when the LR term is disabled.
    #[serde(rename = "l_LR")]
    pub l_lr: f64,
    pub total: f64,
    pub lr_value: f64,
}

/// `total = l_HR + lambda * l_LR`. With `lambda == 0` the LR pair is ignored.
pub fn combined_loss<T: Real>(
    out_hr: &Tensor<T>,
    gt_hr: &Tensor<T>,
    lr_pair: Option<(&Tensor<T>, &Tensor<T>)>,
    lambda: f64,
    kind: LossKind,
) -> Result<LossReport> {
    let l_hr = pixel_loss(out_hr, gt_hr, kind)?;
    let l_lr = if lambda > 0.0 {
        let (out_lr, gt_lr) = lr_pair.ok_or_else(|| Error::config("lambda_recon", "lambda > 0 needs the LR output and clean LR target"))?;
        pixel_loss(out_lr, gt_lr, kind)?
    } else {
        0.0
    };
    Ok(LossReport {
        iter: 0,
        l_hr,
        l_lr,
        total: l_hr + lambda * l_lr,
        lr_value: 0.0,
    })
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParameterStore<f32>,
    pub v: ParameterStore<f32>,
}

impl AdamState {
    pub fn new(params: &ParameterStore<f32>) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParameterStore<f32>, grads: &ParameterStore<f32>, lr: f64) -> Result<()> {
        self.step += 1;
        let b1 = ADAM_BETA1 as f32;
        let b2 = ADAM_BETA2 as f32;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = ADAM_EPS as f32;
        for (name, layer) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            for (((p, &g), m), v) in layer.values_mut().zip(g.values()).zip(m.values_mut()).zip(v.values_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub iter: u64,
    pub params: ParameterStore<f32>,
    pub opt: AdamState,
}

impl TrainState {
    pub fn fresh(params: ParameterStore<f32>) -> Self {
        let opt = AdamState::new(&params);
        TrainState { iter: 0, params, opt }
    }
}

pub struct Batch {
    pub lr: Tensor<f32>,
    pub lr_clean: Tensor<f32>,
    pub hr: Tensor<f32>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&PatchPair]) -> Result<Batch> {
        let stack = |f: fn(&PatchPair) -> &Image| -> Result<Tensor<f32>> {
            Tensor::stack(&pairs.iter().map(|p| f(p).to_tensor::<f32>()).collect::<Vec<_>>())
        };
        Ok(Batch {
            lr: stack(|p| &p.lr)?,
            lr_clean: stack(|p| &p.lr_clean)?,
            hr: stack(|p| &p.hr)?,
        })
    }
}

/// Loss and parameter gradients of one batch, in any precision.
pub fn loss_and_grads<T: Real>(
    params: &ParameterStore<T>,
    model: &ModelConfig,
    lr: &Tensor<T>,
    hr: &Tensor<T>,
    lr_clean: Option<&Tensor<T>>,
    lambda: f64,
    kind: LossKind,
) -> Result<(LossReport, ParameterStore<T>)> {
    let use_head = lambda > 0.0;
    if use_head && lr_clean.is_none() {
        return Err(Error::config("lambda_recon", "lambda > 0 needs the clean LR target"));
    }
    let mut tape = Tape::new(params);
    let input = tape.constant(lr.clone());
    let out = network(&mut tape, model, &input, use_head)?;
    let hr_pred = tape.value(&out.hr);
    let lr_pred = out.lr_estimate.as_ref().map(|v| tape.value(v));
    let report = combined_loss(hr_pred, hr, lr_pred.zip(lr_clean), lambda, kind)?;
    let mut seeds = vec![(out.hr, pixel_loss_grad(hr_pred, hr, kind, 1.0)?)];
    if let (Some(v), Some(p), Some(g)) = (out.lr_estimate, lr_pred, lr_clean) {
        seeds.push((v, pixel_loss_grad(p, g, kind, lambda)?));
    }
    let grads = tape.backward(seeds)?;
    Ok((report, grads))
}

/// One Adam step on `batch` at the scheduled learning rate for `state.iter`.
pub fn train_step(
    state: &mut TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    batch: &[&PatchPair],
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    let lr_value = cosine_lr(state.iter, cfg)?;
    let b = Batch::from_pairs(batch)?;
    let clean = (cfg.lambda_recon > 0.0).then_some(&b.lr_clean);
    let (mut report, grads) = loss_and_grads(&state.params, model, &b.lr, &b.hr, clean, cfg.lambda_recon, cfg.loss_type)?;
    if !report.total.is_finite() || !grads.all_finite() {
        let qfs: Vec<u8> = batch.iter().map(|p| p.qf).collect();
        return Err(Error::Numeric(format!(
            "non-finite loss {} at iteration {} (batch of {} pairs, qf {:?})",
            report.total,
            state.iter,
            batch.len(),
            qfs
        )));
    }
    state.opt.update(&mut state.params, &grads, lr_value)?;
    report.iter = state.iter;
    report.lr_value = lr_value;
    state.iter += 1;
    Ok(report)
}

/// Indices of the pairs used at iteration `iter`; a pure function of its inputs.
pub fn batch_indices(seed: u64, iter: u64, available: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::degradation::entry_seed(seed ^ 0x5eed_ba7c, iter));
    if available >= batch_size {
        index::sample(&mut rng, available, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.gen_range(0..available)).collect()
    }
}

pub enum TrainEvent<'a> {
    Step(&'a LossReport),
    Checkpoint(&'a TrainState),
}

/// Runs from `state.iter` to `cfg.total_iters`. A checkpoint event fires for a
/// fresh start, every `checkpoint_every` steps, and after the last step.
pub fn train_loop(
    pairs: &[PatchPair],
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut state: TrainState,
    mut sink: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate_with(model)?;
    if pairs.is_empty() {
        return Err(Error::Input("no training pairs".into()));
    }
    if state.iter == 0 {
        sink(TrainEvent::Checkpoint(&state))?;
    }
    while state.iter < cfg.total_iters {
        let picks = batch_indices(cfg.seed, state.iter, pairs.len(), cfg.batch_size);
        let batch: Vec<&PatchPair> = picks.iter().map(|&i| &pairs[i]).collect();
        let report = train_step(&mut state, model, cfg, &batch)?;
        sink(TrainEvent::Step(&report))?;
        if state.iter % cfg.checkpoint_every == 0 || state.iter == cfg.total_iters {
            sink(TrainEvent::Checkpoint(&state))?;
        }
    }
    Ok(state)
}
