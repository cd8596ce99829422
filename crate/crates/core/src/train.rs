//! Multi-task objective, AdamW, warmup-cosine schedule, clipping and the
//! epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{FusedWindowBatch, WindowIndex, WindowedDataset};
use crate::model::{applies_weight_decay, ForecastModel, Mode};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub warmup_fraction: f64,
    /// Weight of the service-level term.
    pub alpha: f64,
    /// Weight of the cluster-level term.
    pub beta: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Write wall-clock seconds into the epoch log. Off by default so that
    /// logs from identical runs are byte-identical.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 64,
            epochs: 50,
            clip_norm: 1.0,
            warmup_fraction: 0.05,
            alpha: 0.7,
            beta: 0.3,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.alpha < 0.0 || self.beta < 0.0 || !(self.alpha + self.beta > 0.0) {
            return bad(format!("loss weights alpha={} beta={} invalid", self.alpha, self.beta));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr and weight_decay must be >= 0, clip_norm > 0".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive".into());
        }
        Ok(())
    }
}

/// `alpha * mean((y_hat - y)^2) + beta * mean((g_hat - g)^2)`.
pub fn multitask_loss(y_hat: &[f64], y: &[f64], g_hat: &[f64], g: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    if y_hat.len() != y.len() || g_hat.len() != g.len() || y.is_empty() || g.is_empty() {
        return Err(Error::shape("multitask_loss", &[y_hat.len(), g_hat.len()], &[y.len(), g.len()]));
    }
    let mse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / a.len() as f64;
    Ok(alpha * mse(y_hat, y) + beta * mse(g_hat, g))
}

/// Differentiable form of [`multitask_loss`] against a batch's targets.
pub fn multitask_loss_var(
    tape: &mut Tape,
    y_hat: Var,
    g_hat: Var,
    batch: &FusedWindowBatch,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let ly = tape.mse(y_hat, &batch.service_targets)?;
    let lg = tape.mse(g_hat, &batch.cluster_targets)?;
    let ly = tape.scale(ly, alpha)?;
    let lg = tape.scale(lg, beta)?;
    tape.add(ly, lg)
}

pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * total_steps as f64).ceil() as usize
}

/// Linear warmup to `lr` over the first `ceil(warmup_fraction * total)`
/// steps, then cosine decay reaching zero at `total_steps`.
pub fn lr_at_step(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Parameter("learning-rate schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Parameter(format!("step {step} beyond schedule end {total_steps}")));
    }
    let base = config.lr;
    let w = warmup_steps(total_steps, config.warmup_fraction);
    if step < w {
        return Ok(base * step as f64 / w as f64);
    }
    if total_steps == w {
        return Ok(base);
    }
    let progress = (step - w) as f64 / (total_steps - w) as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Rescales all gradients in place so their joint L2 norm is at most
/// `threshold`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], threshold: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > threshold {
        let factor = threshold / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= factor);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One AdamW update. Decay (where `decay[i]`) multiplies the parameter by
/// `1 - lr * weight_decay` before the bias-corrected Adam step.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    decay: &[bool],
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != decay.len() || params.len() != state.m.len() {
        return Err(Error::shape("adamw_step", &[params.len()], &[grads.len(), decay.len(), state.m.len()]));
    }
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powf(state.step as f64);
    let c2 = 1.0 - b2.powf(state.step as f64);
    let shrink = 1.0 - lr * config.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.len() {
            return Err(Error::shape("adamw_step", &[p.len()], &[g.len()]));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            if decay[i] {
                *w *= shrink;
            }
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr_last: f64,
    pub seconds: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_loss,lr_last,seconds";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, self.lr_last, self.seconds
        )
    }
}

pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: ForecastModel,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochRecord>,
    pub steps: usize,
}

/// Windows per forward pass when no gradients are needed.
const EVAL_BATCH: usize = 256;

/// Eval-mode predictions `(y_hat, g_hat)` for `windows`, each
/// `[windows x H]` in order.
pub fn predict_windows(model: &ForecastModel, data: &WindowedDataset, windows: &[WindowIndex]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut y = Vec::with_capacity(windows.len() * data.horizon());
    let mut g = Vec::with_capacity(windows.len() * data.horizon());
    for chunk in windows.chunks(EVAL_BATCH) {
        let (yc, gc) = model.predict_batch(&data.batch(chunk))?;
        y.extend(yc);
        g.extend(gc);
    }
    Ok((y, g))
}

/// Eval-mode multi-task loss averaged over `windows`.
pub fn evaluate_loss(model: &ForecastModel, data: &WindowedDataset, windows: &[WindowIndex], config: &TrainConfig) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Window("no windows to evaluate".into()));
    }
    let (y_hat, g_hat) = predict_windows(model, data, windows)?;
    let mut y = Vec::with_capacity(y_hat.len());
    let mut g = Vec::with_capacity(g_hat.len());
    for chunk in windows.chunks(EVAL_BATCH) {
        let b = data.batch(chunk);
        y.extend(b.service_targets);
        g.extend(b.cluster_targets);
    }
    multitask_loss(&y_hat, &y, &g_hat, &g, config.alpha, config.beta)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Runs the full epoch loop on `data.train`, selecting the checkpoint by
/// validation loss.
pub fn train(mut model: ForecastModel, data: &WindowedDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Window("training and validation splits need at least one window".into()));
    }
    if model.config().window != data.window() || model.config().horizon != data.horizon() {
        return Err(Error::shape(
            "train",
            &[model.config().window, model.config().horizon],
            &[data.window(), data.horizon()],
        ));
    }
    let steps_per_epoch = data.train.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let decay: Vec<bool> = model.named_params().iter().map(|(n, _)| applies_weight_decay(n)).collect();
    let mut state = OptimizerState::new(&model.named_params().iter().map(|(_, t)| *t).collect::<Vec<_>>());
    let mut dropout_rng = seed::stream(config.seed, "dropout");

    let mut log = Vec::with_capacity(config.epochs);
    let mut best = (model.clone(), 0, f64::INFINITY);
    let mut step = 0;
    let mut order = data.train.clone();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut shuffle = seed::stream(config.seed, &format!("shuffle/{epoch}"));
        order.copy_from_slice(&data.train);
        order.shuffle(&mut shuffle);

        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch = data.batch(chunk);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let loss = (|| {
                let mut mode = Mode::Train(&mut dropout_rng);
                let (y, g) = model.forward(&mut tape, &vars, &batch, &mut mode)?;
                let loss = multitask_loss_var(&mut tape, y, g, &batch, config.alpha, config.beta)?;
                tape.backward(loss)?;
                Ok(loss)
            })()
            .map_err(|e| diverged(step, e))?;
            let value = tape.value(loss)[0];
            loss_sum += value * chunk.len() as f64;

            let mut grads: Vec<Vec<f64>> = vars
                .flat()
                .into_iter()
                .map(|v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
                .collect();
            let norm = clip_global_norm(&mut grads, config.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: "gradient norm is not finite".into(),
                });
            }
            lr = lr_at_step(step, total, config)?;
            adamw_step(&mut model.params_mut(), &grads, &decay, &mut state, lr, config)?;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_loss = evaluate_loss(&model, data, &data.val, config).map_err(|e| diverged(step, e))?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "validation loss is not finite".into(),
            });
        }
        if val_loss < best.2 {
            best = (model.clone(), epoch, val_loss);
        }
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr_last: lr,
            seconds: if config.record_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        best_val_loss: best.2,
        log,
        steps: step,
    })
}

#[cfg(test)]
mod tests;
