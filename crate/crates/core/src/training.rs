//! Adam training with global-norm clipping and a plateau learning-rate schedule.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::per_frequency_pit_packed;
use crate::dataset::{Example, ExampleSource};
use crate::error::{Error, Result};
use crate::fpit::fpit_loss_and_grad;
use crate::model::checkpoint::{self, OptimizerSection};
use crate::model::{backward, forward, ModelParams, ModelShape, Real};
use crate::scene::scene_seed;
use crate::stft::Stft;

/// What the network is trained to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Negative SI-SDR of full-band estimates under the best global permutation.
    #[default]
    Fpit,
    /// Squared error of normalized spectra under the best permutation chosen
    /// independently at each frequency. Used for the correlation-alignment
    /// ablation.
    PerFrequencyPit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub plateau_epochs: usize,
    pub lr_decay: f64,
    pub clip_threshold: f64,
    pub utterances_per_batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-3,
            lr_min: 1e-4,
            plateau_epochs: 10,
            lr_decay: 0.5,
            clip_threshold: 5.0,
            utterances_per_batch: 30,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 100,
            seed: 0,
            objective: Objective::Fpit,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_init) {
            return bad("need 0 < lr_min <= lr_init");
        }
        if !(self.clip_threshold > 0.0) {
            return bad("clip_threshold must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must lie in (0, 1)");
        }
        if self.utterances_per_batch == 0 || self.plateau_epochs == 0 {
            return bad("utterances_per_batch and plateau_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps be positive");
        }
        Ok(())
    }
}

/// Parameters plus optimizer and schedule state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F> {
    pub params: ModelParams<F>,
    pub first_moment: Vec<F>,
    pub second_moment: Vec<F>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub lr: f64,
    pub best_val: f64,
    pub since_improvement: u64,
}

impl<F: Real> TrainState<F> {
    pub fn new(params: ModelParams<F>, cfg: &TrainConfig) -> Self {
        let n = params.data.len();
        Self {
            params,
            first_moment: vec![F::zero(); n],
            second_moment: vec![F::zero(); n],
            step: 0,
            epoch: 0,
            lr: cfg.lr_init,
            best_val: f64::INFINITY,
            since_improvement: 0,
        }
    }

    pub fn fresh(shape: ModelShape, cfg: &TrainConfig) -> Self {
        Self::new(ModelParams::init(shape, cfg.seed), cfg)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(
            &self.params,
            Some(&OptimizerSection {
                step: self.step,
                epoch: self.epoch,
                lr: self.lr,
                best_val: self.best_val,
                since_improvement: self.since_improvement,
                first_moment: self.first_moment.clone(),
                second_moment: self.second_moment.clone(),
            }),
        )
    }

    /// Restores a checkpoint; files without optimizer state start a fresh
    /// optimizer at `cfg.lr_init`.
    pub fn from_bytes(bytes: &[u8], cfg: &TrainConfig) -> Result<Self> {
        let (params, optim) = checkpoint::decode::<F>(bytes)?;
        Ok(match optim {
            None => Self::new(params, cfg),
            Some(o) => Self {
                params,
                first_moment: o.first_moment,
                second_moment: o.second_moment,
                step: o.step,
                epoch: o.epoch,
                lr: o.lr,
                best_val: o.best_val,
                since_improvement: o.since_improvement,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>, cfg: &TrainConfig) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path.as_ref())?, cfg)
    }
}

/// One bias-corrected Adam update. Fails without touching the state when a
/// gradient is not finite.
pub fn adam_step<F: Real>(state: &mut TrainState<F>, grads: &[F], cfg: &TrainConfig) -> Result<()> {
    if grads.len() != state.params.data.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            state.params.data.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c = |v: f64| F::from_f64(v).expect("finite constant");
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let correction1 = c(1.0 - cfg.beta1.powi(t));
    let correction2 = c(1.0 - cfg.beta2.powi(t));
    let lr = c(state.lr);
    let eps = c(cfg.adam_eps);
    let one = F::one();
    for (((p, m), v), &g) in state
        .params
        .data
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
        .zip(grads)
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Rescales `grads` to global L2 norm `threshold` when it is exceeded.
/// Returns the norm before clipping.
pub fn clip_gradients<F: Real>(grads: &mut [F], threshold: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| {
            let v = g.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > threshold {
        let k = F::from_f64(threshold / norm).expect("finite scale");
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// End-of-epoch schedule update: halve after `plateau_epochs` epochs without
/// strict improvement, never below `lr_min`.
pub fn lr_schedule_update<F>(state: &mut TrainState<F>, val_loss: f64, cfg: &TrainConfig) {
    if val_loss < state.best_val {
        state.best_val = val_loss;
        state.since_improvement = 0;
    } else {
        state.since_improvement += 1;
        if state.since_improvement >= cfg.plateau_epochs as u64 {
            state.lr = (state.lr * cfg.lr_decay).max(cfg.lr_min);
            state.since_improvement = 0;
        }
    }
}

fn cast3<A: Real, B: Real>(x: &Array3<A>) -> Array3<B> {
    x.mapv(|v| B::from_f64(v.to_f64().unwrap()).unwrap())
}

/// Objective value of one utterance and its gradient with respect to the
/// network outputs.
pub fn output_loss_grad(outputs: &Array3<f64>, ex: &Example, objective: Objective, stft: &Stft) -> Result<(f64, Array3<f64>)> {
    match objective {
        Objective::Fpit => {
            let (r, g) = fpit_loss_and_grad(outputs.view(), &ex.scales, &ex.targets, stft)?;
            Ok((r.loss, g))
        }
        Objective::PerFrequencyPit => {
            let map = per_frequency_pit_packed(outputs.view(), ex.packed_targets.view())?;
            let count = outputs.len() as f64;
            let mut grad = Array3::zeros(outputs.raw_dim());
            let mut loss = 0.0;
            for (f, p) in map.perm.iter().enumerate() {
                for (src, &slot) in p.iter().enumerate() {
                    for part in 0..2 {
                        let o = outputs.slice(ndarray::s![f, 2 * slot + part, ..]);
                        let y = ex.packed_targets.slice(ndarray::s![f, 2 * src + part, ..]);
                        let d = &o - &y;
                        loss += d.dot(&d);
                        grad.slice_mut(ndarray::s![f, 2 * slot + part, ..]).assign(&(d * (2.0 / count)));
                    }
                }
            }
            Ok((loss / count, grad))
        }
    }
}

/// Loss of one utterance and the gradient with respect to every parameter.
pub fn example_loss_grad<F: Real>(
    params: &ModelParams<F>,
    ex: &Example,
    objective: Objective,
    stft: &Stft,
) -> Result<(f64, ModelParams<F>)> {
    let input: Array3<F> = cast3(&ex.input);
    let (out, trace) = forward(params, input.view())?;
    let (loss, g) = output_loss_grad(&cast3(&out), ex, objective, stft)?;
    let (grads, _) = backward(params, &trace, cast3::<f64, F>(&g).view())?;
    Ok((loss, grads))
}

/// Loss of one utterance without gradients.
pub fn example_loss<F: Real>(params: &ModelParams<F>, ex: &Example, objective: Objective, stft: &Stft) -> Result<f64> {
    let input: Array3<F> = cast3(&ex.input);
    let (out, _) = forward(params, input.view())?;
    let out = cast3(&out);
    match objective {
        Objective::Fpit => {
            let est = crate::fpit::assemble_from_outputs(out.view(), &ex.scales, stft, ex.n_samples())?;
            Ok(crate::fpit::fpit(&est, &ex.targets)?.loss)
        }
        Objective::PerFrequencyPit => Ok(output_loss_grad(&out, ex, objective, stft)?.0),
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Mean loss over `indices`, then clip and update.
pub fn train_step<F: Real>(
    state: &mut TrainState<F>,
    data: &dyn ExampleSource,
    indices: &[usize],
    cfg: &TrainConfig,
    stft: &Stft,
) -> Result<StepReport> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = vec![F::zero(); state.params.data.len()];
    let mut loss = 0.0;
    for &i in indices {
        let ex = data.example(i)?;
        let (l, g) = example_loss_grad(&state.params, &ex, cfg.objective, stft)?;
        loss += l;
        for (a, v) in acc.iter_mut().zip(&g.data) {
            *a += *v;
        }
    }
    let k = F::from_f64(1.0 / indices.len() as f64).unwrap();
    acc.iter_mut().for_each(|a| *a *= k);
    let grad_norm = clip_gradients(&mut acc, cfg.clip_threshold);
    adam_step(state, &acc, cfg)?;
    Ok(StepReport {
        loss: loss / indices.len() as f64,
        grad_norm,
    })
}

/// Seeded visiting order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(seed, epoch)));
    order
}

/// Mean objective over a dataset.
pub fn evaluate_loss<F: Real>(params: &ModelParams<F>, data: &dyn ExampleSource, objective: Objective, stft: &Stft) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for i in 0..data.len() {
        total += example_loss(params, &data.example(i)?, objective, stft)?;
    }
    Ok(total / data.len() as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Where training writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn checkpoint_path(&self, epoch: u64) -> PathBuf {
        self.dir.join(format!("epoch_{epoch}.ckpt"))
    }
}

/// Runs epochs until `cfg.max_epochs` have completed or `on_epoch` breaks.
///
/// Without a validation set the schedule follows the epoch's mean training loss.
pub fn train<F: Real>(
    state: &mut TrainState<F>,
    train_set: &dyn ExampleSource,
    val_set: Option<&dyn ExampleSource>,
    cfg: &TrainConfig,
    stft: &Stft,
    output: Option<&TrainOutput>,
    mut on_epoch: impl FnMut(&EpochReport, &TrainState<F>) -> ControlFlow<()>,
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(out) = output {
        std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        let path = out.log_path();
        if state.epoch == 0 || !path.exists() {
            std::fs::write(&path, "epoch,train_loss,val_loss,lr\n").map_err(|e| Error::io(&path, e))?;
        }
    }
    let mut reports = Vec::new();
    while (state.epoch as usize) < cfg.max_epochs {
        let order = epoch_order(cfg.seed, state.epoch, train_set.len());
        let mut total = 0.0;
        for batch in order.chunks(cfg.utterances_per_batch) {
            let r = train_step(state, train_set, batch, cfg, stft)?;
            total += r.loss * batch.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = match val_set {
            Some(v) if !v.is_empty() => evaluate_loss(&state.params, v, cfg.objective, stft)?,
            _ => train_loss,
        };
        let lr_used = state.lr;
        lr_schedule_update(state, val_loss, cfg);
        state.epoch += 1;
        let report = EpochReport {
            epoch: state.epoch,
            train_loss,
            val_loss,
            lr: lr_used,
        };
        info!(
            "epoch {} train {:.3} val {:.3} lr {:.2e}",
            report.epoch, train_loss, val_loss, lr_used
        );
        if let Some(out) = output {
            let path = out.log_path();
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{},{},{},{}", report.epoch, train_loss, val_loss, lr_used).map_err(|e| Error::io(&path, e))?;
            state.save(out.checkpoint_path(state.epoch))?;
        }
        reports.push(report);
        if on_epoch(&report, state).is_break() {
            break;
        }
    }
    Ok(reports)
}
