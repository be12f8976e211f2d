//! Trace-norm surrogate regularizer and the SGD training loop.
//!
//! Each mini-batch `B` is split into `M` equal sub-batches. With
//! `gᵢ = ∇L̃(Bᵢ, w)` held constant,
//!
//! ```text
//! R_α(w) = (1/M) Σᵢ [L̃(Bᵢ, w) - L̃(Bᵢ, w - α gᵢ)] ≈ α (1/M) Σᵢ ‖gᵢ‖²,
//! ```
//!
//! where `L̃` is the loss against one-hot targets. The training gradient is
//! `∇L(B, w) + β ∇R_α(w)` with `∇R_α(w) = (1/M) Σᵢ [gᵢ - ∇L̃(Bᵢ, w - α gᵢ)]`;
//! no second-order terms appear.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::net::{
    batch_dual_loss_and_grad, batch_loss, batch_loss_and_grad, evaluate, Dataset, LabeledSample,
    NetworkSpec, ParamVector, Target,
};
pub use crate::net::DualGrad;
use crate::persist::{fmt_f64, write_atomic, write_json};

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// A differentiable empirical loss over indexed samples.
pub trait Objective: Sync {
    fn param_count(&self) -> usize;

    /// Mean loss and gradient over `batch`.
    fn loss_and_grad(&self, params: &[f64], batch: &[usize], target: Target) -> Result<(f64, Vec<f64>)>;

    /// Mean loss over `batch`, forward passes only.
    fn loss(&self, params: &[f64], batch: &[usize], target: Target) -> Result<f64>;

    /// Soft-target and one-hot-target loss and gradient in one call.
    fn dual_loss_and_grad(&self, params: &[f64], batch: &[usize]) -> Result<DualGrad> {
        let (soft_loss, soft_grad) = self.loss_and_grad(params, batch, Target::Soft)?;
        let (hard_loss, hard_grad) = self.loss_and_grad(params, batch, Target::OneHot)?;
        let correction = soft_grad.iter().zip(&hard_grad).map(|(s, h)| s - h).collect();
        Ok(DualGrad {
            soft_loss,
            hard_loss,
            hard_grad,
            soft_correction: Some(correction),
        })
    }
}

/// Cross-entropy of a network on a dataset.
#[derive(Debug, Clone, Copy)]
pub struct NetObjective<'a> {
    pub spec: &'a NetworkSpec,
    pub data: &'a Dataset,
}

impl<'a> NetObjective<'a> {
    pub fn new(spec: &'a NetworkSpec, data: &'a Dataset) -> Self {
        NetObjective { spec, data }
    }
}

impl Objective for NetObjective<'_> {
    fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    fn loss_and_grad(&self, params: &[f64], batch: &[usize], target: Target) -> Result<(f64, Vec<f64>)> {
        batch_loss_and_grad(self.spec, params, self.data, batch, target)
    }

    fn loss(&self, params: &[f64], batch: &[usize], target: Target) -> Result<f64> {
        batch_loss(self.spec, params, self.data, batch, target)
    }

    fn dual_loss_and_grad(&self, params: &[f64], batch: &[usize]) -> Result<DualGrad> {
        batch_dual_loss_and_grad(self.spec, params, self.data, batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Sub-batch count `M`.
    pub m: usize,
    /// First epoch with regularized updates; the first learning-rate milestone when absent.
    pub activate_after_epoch: Option<usize>,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            alpha: 1e-4,
            beta: 0.0,
            m: 8,
            activate_after_epoch: None,
        }
    }
}

impl RegConfig {
    pub fn disabled() -> Self {
        RegConfig::default()
    }

    pub fn with_beta(beta: f64) -> Self {
        RegConfig {
            beta,
            ..RegConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.m == 0 {
            return Err(Error::Config("sub-batch count M must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`; 50% and 75% of `epochs` when absent.
    pub milestones: Option<Vec<usize>>,
    pub lr_decay: f64,
    /// Standard deviation of the Gaussian input jitter redrawn every epoch; 0 disables it.
    pub jitter_std: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 100,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            milestones: None,
            lr_decay: 0.1,
            jitter_std: 0.0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::Config(format!("jitter std must be >= 0, got {}", self.jitter_std)));
        }
        Ok(())
    }

    pub fn milestones(&self) -> Vec<usize> {
        match &self.milestones {
            Some(m) => m.clone(),
            None => vec![self.epochs / 2, self.epochs * 3 / 4],
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones().iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }

    fn activation_epoch(&self, reg: &RegConfig) -> usize {
        reg.activate_after_epoch
            .unwrap_or_else(|| self.milestones().into_iter().min().unwrap_or(0))
    }
}

/// Parameters, momentum buffer and counters of SGD with Nesterov momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub params: Vec<f64>,
    pub velocity: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub epoch: usize,
    pub step: usize,
}

impl OptState {
    pub fn new(params: Vec<f64>, lr: f64, momentum: f64) -> Self {
        let velocity = vec![0.0; params.len()];
        OptState {
            params,
            velocity,
            lr,
            momentum,
            epoch: 0,
            step: 0,
        }
    }
}

/// `v ← μv - lr·g`, `w ← w + μv - lr·g`.
pub fn sgd_step(state: &mut OptState, grad: &[f64]) -> Result<()> {
    if grad.len() != state.params.len() || state.velocity.len() != state.params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, parameters {}",
            grad.len(),
            state.params.len()
        )));
    }
    let (mu, lr) = (state.momentum, state.lr);
    for ((w, v), &g) in state.params.iter_mut().zip(state.velocity.iter_mut()).zip(grad) {
        *v = mu * *v - lr * g;
        *w += mu * *v - lr * g;
    }
    if state.params.iter().chain(&state.velocity).any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite parameters after step {}", state.step)));
    }
    state.step += 1;
    Ok(())
}

/// Shuffled partition of `batch` into `m` equal sub-batches.
pub fn split_batch<R: Rng + ?Sized>(batch: &[usize], m: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if m == 0 || batch.is_empty() || !batch.len().is_multiple_of(m) {
        return Err(Error::IndivisibleBatch {
            len: batch.len(),
            parts: m,
        });
    }
    let mut shuffled = batch.to_vec();
    shuffled.shuffle(rng);
    Ok(shuffled.chunks_exact(batch.len() / m).map(<[usize]>::to_vec).collect())
}

/// `R_α` with the pieces needed for its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct RegTerm {
    pub r: f64,
    /// `gᵢ = ∇L̃(Bᵢ, w)`.
    pub sub_grads: Vec<Vec<f64>>,
    /// `∇L̃(Bᵢ, w - α gᵢ)`.
    pub shifted_grads: Vec<Vec<f64>>,
}

fn shifted(params: &[f64], g: &[f64], alpha: f64) -> Vec<f64> {
    params.iter().zip(g).map(|(w, g)| w - alpha * g).collect()
}

fn shifted_pass<O: Objective + ?Sized>(
    obj: &O,
    params: &[f64],
    sub: &[usize],
    g: &[f64],
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    obj.loss_and_grad(&shifted(params, g, alpha), sub, Target::OneHot)
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("at the look-ahead point (alpha too large?): {msg}")),
            other => other,
        })
}

pub fn reg_loss<O: Objective + ?Sized>(
    obj: &O,
    params: &[f64],
    sub_batches: &[Vec<usize>],
    alpha: f64,
) -> Result<RegTerm> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    if sub_batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let m = sub_batches.len() as f64;
    let mut r = 0.0;
    let mut sub_grads = Vec::with_capacity(sub_batches.len());
    let mut shifted_grads = Vec::with_capacity(sub_batches.len());
    for sub in sub_batches {
        let (base, g) = obj.loss_and_grad(params, sub, Target::OneHot)?;
        let (moved, sg) = shifted_pass(obj, params, sub, &g, alpha)?;
        r += (base - moved) / m;
        sub_grads.push(g);
        shifted_grads.push(sg);
    }
    if !r.is_finite() {
        return Err(Error::Numeric(format!("R = {r}")));
    }
    Ok(RegTerm {
        r,
        sub_grads,
        shifted_grads,
    })
}

/// Training loss on the batch and the descent direction.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `∇L(B, w) + β ∇R_α(w)`. With `β = 0` this is exactly the plain batch gradient
/// and `rng` is not touched.
pub fn regularized_grad<O: Objective + ?Sized, R: Rng + ?Sized>(
    obj: &O,
    params: &[f64],
    batch: &[usize],
    cfg: &RegConfig,
    rng: &mut R,
) -> Result<StepGrad> {
    cfg.validate()?;
    if cfg.beta == 0.0 {
        let (loss, grad) = obj.loss_and_grad(params, batch, Target::Soft)?;
        return Ok(StepGrad { loss, grad });
    }
    let subs = split_batch(batch, cfg.m, rng)?;
    let inv_m = 1.0 / subs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for sub in &subs {
        let dual = obj.dual_loss_and_grad(params, sub)?;
        let (_, sg) = shifted_pass(obj, params, sub, &dual.hard_grad, cfg.alpha)?;
        loss += dual.soft_loss * inv_m;
        for ((out, hard), moved) in grad.iter_mut().zip(&dual.hard_grad).zip(&sg) {
            *out += inv_m * (hard + cfg.beta * (hard - moved));
        }
        if let Some(c) = &dual.soft_correction {
            for (out, c) in grad.iter_mut().zip(c) {
                *out += inv_m * c;
            }
        }
    }
    Ok(StepGrad { loss, grad })
}

/// RNG driving the per-epoch sample order.
pub fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One epoch of mini-batches over `0..n`; the trailing short batch is dropped.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_err: Option<f64>,
    pub lr: f64,
    pub reg_active: bool,
    /// Mean wall-clock milliseconds per optimizer step.
    pub step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub final_test_err: Option<f64>,
    pub mean_step_ms: f64,
}

impl RunRecord {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> RunRecord {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.step_ms = 0.0;
        }
        r
    }

    pub fn summary(&self) -> RunSummary {
        let last = self.last();
        let timed: Vec<f64> = self.epochs.iter().map(|e| e.step_ms).collect();
        RunSummary {
            seed: self.seed,
            epochs: self.epochs.len(),
            steps: self.steps,
            final_train_loss: last.map_or(f64::NAN, |e| e.train_loss),
            final_train_acc: last.map_or(f64::NAN, |e| e.train_acc),
            final_test_err: last.and_then(|e| e.test_err),
            mean_step_ms: timed.iter().sum::<f64>() / timed.len().max(1) as f64,
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        self.csv_bytes(true)
    }

    /// CSV without the wall-clock `step_ms` column; identical across reruns.
    pub fn to_csv_untimed(&self) -> Result<Vec<u8>> {
        self.csv_bytes(false)
    }

    fn csv_bytes(&self, timed: bool) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = ["epoch", "train_loss", "train_acc", "test_err", "lr", "reg_active", "step_ms"];
        w.write_record(if timed { &header[..] } else { &header[..6] })?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                fmt_f64(e.train_loss),
                fmt_f64(e.train_acc),
                e.test_err.map(fmt_f64).unwrap_or_default(),
                fmt_f64(e.lr),
                e.reg_active.to_string(),
            ];
            if timed {
                row.push(fmt_f64(e.step_ms));
            }
            w.write_record(&row)?;
        }
        w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        write_json(path, &self.summary())
    }
}

/// Stateful training run; `train` drives it to completion.
pub struct Trainer<'a> {
    spec: &'a NetworkSpec,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    schedule: TrainSchedule,
    reg: RegConfig,
    state: OptState,
    shuffle: ChaCha8Rng,
    split: ChaCha8Rng,
    jitter: ChaCha8Rng,
    record: RunRecord,
}

impl<'a> Trainer<'a> {
    pub fn new(
        spec: &'a NetworkSpec,
        init: &ParamVector,
        train: &'a Dataset,
        test: Option<&'a Dataset>,
        schedule: &TrainSchedule,
        reg: &RegConfig,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        reg.validate()?;
        spec.validate()?;
        if init.len() != spec.param_count() {
            return Err(Error::Shape("initial parameters do not match the network".into()));
        }
        if train.len() < schedule.batch_size {
            return Err(Error::Config(format!(
                "batch size {} exceeds the {} training samples",
                schedule.batch_size,
                train.len()
            )));
        }
        if reg.beta > 0.0 && !schedule.batch_size.is_multiple_of(reg.m) {
            return Err(Error::IndivisibleBatch {
                len: schedule.batch_size,
                parts: reg.m,
            });
        }
        Ok(Trainer {
            spec,
            train,
            test,
            schedule: schedule.clone(),
            reg: *reg,
            state: OptState::new(init.to_vec(), schedule.lr, schedule.momentum),
            shuffle: shuffle_rng(seed),
            split: stream_rng(seed, 1),
            jitter: stream_rng(seed, 2),
            record: RunRecord {
                seed,
                steps: 0,
                epochs: Vec::new(),
            },
        })
    }

    pub fn state(&self) -> &OptState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.schedule.epochs
    }

    fn jittered(&mut self) -> Result<Option<Dataset>> {
        let std = self.schedule.jitter_std;
        if std == 0.0 {
            return Ok(None);
        }
        let noise = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let samples = self
            .train
            .samples()
            .iter()
            .map(|s| {
                let x = s.x.iter().map(|v| v + noise.sample(&mut self.jitter)).collect();
                LabeledSample::new(x, s.y.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples).map(Some)
    }

    /// Run one epoch, calling `on_step` after every optimizer step.
    pub fn run_epoch_with(&mut self, mut on_step: impl FnMut(&OptState)) -> Result<EpochRecord> {
        let epoch = self.state.epoch;
        self.state.lr = self.schedule.lr_at(epoch);
        let reg_active = self.reg.beta > 0.0 && epoch >= self.schedule.activation_epoch(&self.reg);
        let step_cfg = if reg_active {
            self.reg
        } else {
            RegConfig {
                beta: 0.0,
                ..self.reg
            }
        };
        let jittered = self.jittered()?;
        let data = jittered.as_ref().unwrap_or(self.train);
        let obj = NetObjective::new(self.spec, data);
        let batches = epoch_batches(data.len(), self.schedule.batch_size, &mut self.shuffle);
        let mut elapsed = 0.0;
        for batch in &batches {
            let start = Instant::now();
            let step = regularized_grad(&obj, &self.state.params, batch, &step_cfg, &mut self.split)?;
            if !(step.loss <= DIVERGENCE_LOSS) {
                return Err(Error::Divergence { epoch, loss: step.loss });
            }
            sgd_step(&mut self.state, &step.grad).map_err(|e| match e {
                Error::Numeric(_) => Error::Divergence { epoch, loss: step.loss },
                other => other,
            })?;
            elapsed += start.elapsed().as_secs_f64() * 1e3;
            on_step(&self.state);
        }
        let eval = evaluate(self.spec, &self.state.params, self.train)?;
        if !(eval.loss <= DIVERGENCE_LOSS) {
            return Err(Error::Divergence { epoch, loss: eval.loss });
        }
        let test_err = match self.test {
            Some(t) => Some(1.0 - evaluate(self.spec, &self.state.params, t)?.accuracy),
            None => None,
        };
        let rec = EpochRecord {
            epoch,
            train_loss: eval.loss,
            train_acc: eval.accuracy,
            test_err,
            lr: self.state.lr,
            reg_active,
            step_ms: elapsed / batches.len() as f64,
        };
        self.state.epoch += 1;
        self.record.steps = self.state.step;
        self.record.epochs.push(rec.clone());
        Ok(rec)
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        self.run_epoch_with(|_| {})
    }

    pub fn finish(self) -> Result<(ParamVector, RunRecord)> {
        Ok((ParamVector::new(self.spec, self.state.params)?, self.record))
    }
}

/// Train `spec` from `init` for `schedule.epochs` epochs.
pub fn train(
    spec: &NetworkSpec,
    init: &ParamVector,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    schedule: &TrainSchedule,
    reg: &RegConfig,
    seed: u64,
) -> Result<(ParamVector, RunRecord)> {
    let mut trainer = Trainer::new(spec, init, train_data, test_data, schedule, reg, seed)?;
    while !trainer.is_done() {
        trainer.run_epoch()?;
    }
    trainer.finish()
}

/// Arithmetic and geometric means of the eigenvalues of a Gram matrix, and the
/// two sides of the gap bound `AM - GM ≤ √(n-1)·σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateGaps {
    /// `tr(ξ)/n`.
    pub am: f64,
    /// `|ξ|^{1/n}`.
    pub gm: f64,
    /// Population standard deviation of the eigenvalues.
    pub sigma: f64,
    pub gap: f64,
    pub gap_bound: f64,
}

pub fn trace_surrogate_gaps(gram: &DMatrix<f64>) -> Result<SurrogateGaps> {
    let eig: Vec<f64> = symmetric_eigenvalues(gram)?
        .into_iter()
        .map(|l| l.max(0.0))
        .collect();
    let n = eig.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let nf = n as f64;
    let am = eig.iter().sum::<f64>() / nf;
    let gm = if eig.contains(&0.0) {
        0.0
    } else {
        (eig.iter().map(|l| l.ln()).sum::<f64>() / nf).exp()
    };
    let sigma = (eig.iter().map(|l| (l - am).powi(2)).sum::<f64>() / nf).sqrt();
    Ok(SurrogateGaps {
        am,
        gm,
        sigma,
        gap: am - gm,
        gap_bound: (nf - 1.0).sqrt() * sigma,
    })
}
