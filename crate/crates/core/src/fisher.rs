//! Observed Fisher information at a trained minimum and the local-minima metrics
//! built from it.
//!
//! The central object is the Gram matrix `ξ = J Jᵀ` whose rows are per-sample
//! gradients of the one-hot loss `ℓ(f_w(x), ỹ)` on a random subset of the
//! training set. Its log-determinant, averaged over independent subsets, is the
//! estimator `γ̂`. The exact `W × W` Fisher is available for tiny networks. Three
//! competitor flatness metrics (input robustness, Hessian Frobenius norm,
//! Hessian spectral radius) are estimated from the same per-sample gradients.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram_of_rows, power_iteration, spectral_norm_sq, symmetric_eigenvalues, POWER_TOL};
use crate::net::{
    self, class_loss_grad, input_jacobian, per_sample_grad, Dataset, NetworkSpec, ParamVector,
    Target,
};

/// Largest parameter count for which the dense `W × W` Fisher is formed.
pub const MAX_EXACT_FISHER_PARAMS: usize = 5000;
/// Largest dataset for which the full `N × N` Gram matrix is formed.
pub const MAX_EXACT_GRAM_SAMPLES: usize = 5000;
/// Relative eigenvalue floor: anything at or below `floor · max(λ_max, 1)` is zero.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Default number of Hessian entries drawn per trial by the sampled Frobenius estimator.
pub const DEFAULT_FROBENIUS_ENTRIES: usize = 100_000;
/// Default calibration target for the mean max-probability.
pub const DEFAULT_TARGET_PEAK: f64 = 0.99;

/// Subset size, trial count and base seed for the sampled estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_prime: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_prime: 100,
            trials: 100,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n_prime == 0 || self.n_prime > n {
            return Err(Error::Config(format!(
                "subset size N' = {} must lie in [1, {n}]",
                self.n_prime
            )));
        }
        if self.trials == 0 {
            return Err(Error::Config("need at least one trial".into()));
        }
        Ok(())
    }

    /// RNG of trial `t`, seeded with `seed + t`.
    pub fn trial_rng(&self, trial: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(trial as u64))
    }
}

/// `N'` distinct indices drawn uniformly without replacement from `0..n`.
pub fn sample_subset<R: Rng + ?Sized>(n: usize, n_prime: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_prime > n {
        return Err(Error::Config(format!("cannot draw {n_prime} of {n} samples")));
    }
    Ok(index::sample(rng, n, n_prime).into_vec())
}

/// Gram matrix of per-sample gradients on a subset.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    pub subset_indices: Vec<usize>,
    pub seed: Option<u64>,
}

impl GramMatrix {
    pub fn from_gradients(grads: &[&[f64]], subset_indices: Vec<usize>, seed: Option<u64>) -> Self {
        GramMatrix {
            entries: gram_of_rows(grads),
            subset_indices,
            seed,
        }
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }
}

/// `ξ = J Jᵀ` of one-hot loss gradients of `data[indices]`.
pub fn gram_matrix(
    spec: &NetworkSpec,
    params: &[f64],
    data: &Dataset,
    indices: &[usize],
) -> Result<GramMatrix> {
    let grads = indices
        .iter()
        .map(|&i| {
            let sample = data
                .get(i)
                .ok_or_else(|| Error::Shape(format!("index {i} out of range")))?;
            per_sample_grad(spec, params, sample, Target::OneHot)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    Ok(GramMatrix::from_gradients(&rows, indices.to_vec(), None))
}

fn log_det_with_floor(m: &DMatrix<f64>, floor_rel: f64) -> Result<std::result::Result<f64, (f64, f64)>> {
    let eig = symmetric_eigenvalues(m)?;
    let max = eig.last().copied().unwrap_or(0.0);
    let floor = floor_rel * max.max(1.0);
    let min = eig.first().copied().unwrap_or(0.0);
    if min <= floor {
        return Ok(Err((min, floor)));
    }
    Ok(Ok(eig.iter().map(|l| l.ln()).sum()))
}

/// `ln |ξ|` from a symmetric eigendecomposition.
pub fn log_det(gram: &GramMatrix) -> Result<f64> {
    log_det_matrix(&gram.entries)
}

pub fn log_det_matrix(m: &DMatrix<f64>) -> Result<f64> {
    log_det_with_floor(m, EIGEN_FLOOR)?.map_err(|(eigenvalue, floor)| Error::SingularGram {
        eigenvalue,
        floor,
        trial: None,
    })
}

/// Per-sample one-hot gradients for every index some trial touches, plus the subsets.
struct TrialSet {
    subsets: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl TrialSet {
    fn build<F>(n: usize, cfg: &SamplerConfig, grad: F) -> Result<Self>
    where
        F: Fn(usize) -> Result<Vec<f64>> + Sync,
    {
        cfg.validate(n)?;
        let subsets = (0..cfg.trials)
            .map(|t| sample_subset(n, cfg.n_prime, &mut cfg.trial_rng(t)))
            .collect::<Result<Vec<_>>>()?;
        let mut needed = vec![false; n];
        for s in &subsets {
            for &i in s {
                needed[i] = true;
            }
        }
        let grads = needed
            .par_iter()
            .enumerate()
            .map(|(i, &want)| if want { grad(i).map(Some) } else { Ok(None) })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrialSet { subsets, grads })
    }

    fn gram(&self, trial: usize, seed: u64) -> GramMatrix {
        let subset = &self.subsets[trial];
        let rows: Vec<&[f64]> = subset
            .iter()
            .map(|&i| self.grads[i].as_deref().expect("gradient cached for sampled index"))
            .collect();
        GramMatrix::from_gradients(&rows, subset.clone(), Some(seed.wrapping_add(trial as u64)))
    }
}

/// `γ̂` and the log-determinant of every trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma_hat: f64,
    pub per_trial_logdets: Vec<f64>,
}

/// `γ̂ = (1/T) Σₜ ln |ξᵗ|` over gradients supplied by `grad(i)` for sample `i < n`.
pub fn gamma_hat_with<F>(n: usize, cfg: &SamplerConfig, grad: F) -> Result<GammaEstimate>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    let trials = TrialSet::build(n, cfg, grad)?;
    gamma_from_trials(&trials, cfg)
}

fn gamma_from_trials(trials: &TrialSet, cfg: &SamplerConfig) -> Result<GammaEstimate> {
    let per_trial_logdets = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            log_det_with_floor(&trials.gram(t, cfg.seed).entries, EIGEN_FLOOR)?.map_err(
                |(eigenvalue, floor)| Error::SingularGram {
                    eigenvalue,
                    floor,
                    trial: Some(t),
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let gamma_hat = per_trial_logdets.iter().sum::<f64>() / per_trial_logdets.len() as f64;
    Ok(GammaEstimate {
        gamma_hat,
        per_trial_logdets,
    })
}

fn one_hot_grad<'a>(
    spec: &'a NetworkSpec,
    params: &'a [f64],
    data: &'a Dataset,
) -> impl Fn(usize) -> Result<Vec<f64>> + Sync + 'a {
    move |i| per_sample_grad(spec, params, &data.samples()[i], Target::OneHot)
}

pub fn gamma_hat(
    spec: &NetworkSpec,
    params: &[f64],
    data: &Dataset,
    cfg: &SamplerConfig,
) -> Result<GammaEstimate> {
    gamma_hat_with(data.len(), cfg, one_hot_grad(spec, params, data))
}

/// How the class gradients of each sample enter the exact Fisher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherWeighting {
    /// `(1/N) Σₓ Σᵢ ∇[ℓₓ]ᵢ ∇[ℓₓ]ᵢᵀ`, every class counted once.
    Unweighted,
    /// `(1/N) Σₓ Σᵢ yᵢ ∇[ℓₓ]ᵢ ∇[ℓₓ]ᵢᵀ`, the form equal to the loss Hessian at a
    /// minimum where every prediction matches its label.
    LabelWeighted,
}

/// Dense observed Fisher information.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    pub entries: DMatrix<f64>,
}

pub fn fisher_exact(
    spec: &NetworkSpec,
    params: &[f64],
    data: &Dataset,
    weighting: FisherWeighting,
) -> Result<FisherMatrix> {
    let w = spec.param_count();
    if w > MAX_EXACT_FISHER_PARAMS {
        return Err(Error::Size {
            what: "parameter count",
            value: w,
            limit: MAX_EXACT_FISHER_PARAMS,
        });
    }
    let k = spec.num_classes();
    let mut rows = DMatrix::zeros(data.len() * k, w);
    for (s, sample) in data.samples().iter().enumerate() {
        let cache = net::forward(spec, params, &sample.x)?;
        for class in 0..k {
            let weight = match weighting {
                FisherWeighting::Unweighted => 1.0,
                FisherWeighting::LabelWeighted => sample.y[class],
            };
            if weight == 0.0 {
                continue;
            }
            let g = class_loss_grad(spec, params, &cache, class);
            let scale = weight.sqrt();
            for (j, v) in g.into_iter().enumerate() {
                rows[(s * k + class, j)] = scale * v;
            }
        }
    }
    let entries = rows.transpose() * &rows / data.len() as f64;
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("Fisher matrix has non-finite entries".into()));
    }
    Ok(FisherMatrix { entries })
}

/// `γ = ln |I_S|`; eigenvalues at or below `floor_rel · max(λ_max, 1)` are rejected.
pub fn gamma_full_from_fisher(fisher: &FisherMatrix, floor_rel: f64) -> Result<f64> {
    log_det_with_floor(&fisher.entries, floor_rel)?
        .map_err(|(eigenvalue, floor)| Error::SingularFisher { eigenvalue, floor })
}

/// Rescale `γ̂` to the full-Fisher scale: `γ ≈ (W/N')·γ̂ + W·ln(1/W)`.
pub fn gamma_relation(gamma_hat: f64, param_count: usize, n_prime: usize) -> f64 {
    let w = param_count as f64;
    w / n_prime as f64 * gamma_hat - w * w.ln()
}

/// Mean squared spectral norm of the input Jacobian of the softmax output.
pub fn robustness_metric(spec: &NetworkSpec, params: &[f64], data: &Dataset) -> Result<f64> {
    let norms = data
        .samples()
        .par_iter()
        .map(|s| spectral_norm_sq(&input_jacobian(spec, params, &s.x)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(norms.iter().sum::<f64>() / norms.len() as f64)
}

/// `‖ξ‖_F²`.
pub fn frobenius_from_gram(gram: &DMatrix<f64>) -> f64 {
    gram.iter().map(|v| v * v).sum()
}

/// Largest eigenvalue of a Gram matrix, i.e. the squared spectral norm of its Jacobian.
pub fn spectral_radius_from_gram(gram: &DMatrix<f64>) -> Result<f64> {
    power_iteration(gram, POWER_TOL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum FrobeniusMode {
    #[default]
    /// Full `N × N` Gram identity `‖JᵀJ‖_F² = ‖JJᵀ‖_F²`.
    Exact,
    /// Per trial, draw `entries` Hessian coordinates of the subset Fisher.
    Sampled { entries: usize },
}

/// Squared Frobenius norm of the one-hot observed Fisher `(1/N) Σ g gᵀ`.
pub fn frobenius_metric(
    spec: &NetworkSpec,
    params: &[f64],
    data: &Dataset,
    cfg: &SamplerConfig,
    mode: FrobeniusMode,
) -> Result<f64> {
    match mode {
        FrobeniusMode::Exact => frobenius_exact(data.len(), one_hot_grad(spec, params, data)),
        FrobeniusMode::Sampled { entries } => {
            let trials = TrialSet::build(data.len(), cfg, one_hot_grad(spec, params, data))?;
            frobenius_sampled(&trials, cfg, spec.param_count(), entries)
        }
    }
}

fn frobenius_exact<F>(n: usize, grad: F) -> Result<f64>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    if n > MAX_EXACT_GRAM_SAMPLES {
        return Err(Error::Size {
            what: "samples in exact Frobenius mode",
            value: n,
            limit: MAX_EXACT_GRAM_SAMPLES,
        });
    }
    let grads = (0..n).into_par_iter().map(&grad).collect::<Result<Vec<_>>>()?;
    let rows: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let nf = n as f64;
    Ok(frobenius_from_gram(&gram_of_rows(&rows)) / (nf * nf))
}

fn frobenius_sampled(trials: &TrialSet, cfg: &SamplerConfig, w: usize, entries: usize) -> Result<f64> {
    if entries == 0 {
        return Err(Error::Config("sampled Frobenius mode needs at least one entry".into()));
    }
    let per_trial: Vec<f64> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            // Draw coordinates from a stream disjoint from the subset draw.
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(t as u64));
            rng.set_stream(1);
            let subset = &trials.subsets[t];
            let rows: Vec<&[f64]> = subset
                .iter()
                .map(|&i| trials.grads[i].as_deref().expect("cached"))
                .collect();
            let inv = 1.0 / subset.len() as f64;
            let mut acc = 0.0;
            for _ in 0..entries {
                let j = rng.random_range(0..w);
                let k = rng.random_range(0..w);
                let m: f64 = rows.iter().map(|g| g[j] * g[k]).sum::<f64>() * inv;
                acc += m * m;
            }
            acc / entries as f64 * (w * w) as f64
        })
        .collect();
    Ok(per_trial.iter().sum::<f64>() / per_trial.len() as f64)
}

/// Mean over trials of the largest eigenvalue of `ξᵗ`.
pub fn spectral_radius_metric(
    spec: &NetworkSpec,
    params: &[f64],
    data: &Dataset,
    cfg: &SamplerConfig,
) -> Result<f64> {
    let trials = TrialSet::build(data.len(), cfg, one_hot_grad(spec, params, data))?;
    spectral_from_trials(&trials, cfg)
}

fn spectral_from_trials(trials: &TrialSet, cfg: &SamplerConfig) -> Result<f64> {
    let radii = (0..cfg.trials)
        .into_par_iter()
        .map(|t| spectral_radius_from_gram(&trials.gram(t, cfg.seed).entries))
        .collect::<Result<Vec<_>>>()?;
    Ok(radii.iter().sum::<f64>() / radii.len() as f64)
}

fn all_logits(spec: &NetworkSpec, params: &[f64], data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.samples()
        .iter()
        .map(|s| net::forward(spec, params, &s.x).map(|c| c.logits().to_vec()))
        .collect()
}

fn mean_peak(logits: &[Vec<f64>], temperature: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .map(|z| {
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            1.0 / z.iter().map(|&v| ((v - max) / temperature).exp()).sum::<f64>()
        })
        .sum();
    total / logits.len() as f64
}

/// Mean over samples of `max softmax(logits / temperature)`.
pub fn mean_max_prob(
    spec: &NetworkSpec,
    params: &[f64],
    data: &Dataset,
    temperature: f64,
) -> Result<f64> {
    Ok(mean_peak(&all_logits(spec, params, data)?, temperature))
}

/// Logit temperature at which the mean max-probability over `data` equals
/// `target_peak` to within 1e-6. Found by bisection on `ln T`.
pub fn normalize_softmax_outputs(
    spec: &NetworkSpec,
    params: &[f64],
    data: &Dataset,
    target_peak: f64,
) -> Result<f64> {
    let k = spec.num_classes() as f64;
    if !(target_peak > 1.0 / k && target_peak < 1.0) {
        return Err(Error::Calibration(format!(
            "target peak {target_peak} must lie strictly between 1/K = {} and 1",
            1.0 / k
        )));
    }
    let logits = all_logits(spec, params, data)?;
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    let (sharp, flat) = (mean_peak(&logits, lo.exp()), mean_peak(&logits, hi.exp()));
    if !(sharp >= target_peak && flat <= target_peak) {
        return Err(Error::Calibration(format!(
            "target {target_peak} outside attainable range [{flat}, {sharp}]"
        )));
    }
    // mean_peak decreases in T; keep mean_peak(lo) >= target >= mean_peak(hi).
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mean_peak(&logits, mid.exp()) >= target_peak {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let temperature = (0.5 * (lo + hi)).exp();
    let reached = mean_peak(&logits, temperature);
    if (reached - target_peak).abs() > 1e-6 {
        return Err(Error::Calibration(format!(
            "bisection stalled at mean peak {reached} for target {target_peak}"
        )));
    }
    Ok(temperature)
}

/// All four local-minima metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gamma_hat: f64,
    pub per_trial_logdets: Vec<f64>,
    pub robustness: f64,
    pub frobenius: f64,
    pub spectral_radius: f64,
    pub n_prime: usize,
    pub t: usize,
    pub seed: u64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    pub sampler: SamplerConfig,
    /// Calibrate the softmax to this mean peak before measuring; `None` keeps the raw model.
    pub target_peak: Option<f64>,
    pub frobenius: FrobeniusMode,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            sampler: SamplerConfig::default(),
            target_peak: Some(DEFAULT_TARGET_PEAK),
            frobenius: FrobeniusMode::Exact,
        }
    }
}

/// Calibrate (optionally) and compute every metric; trials share subsets.
pub fn compute_metrics(
    spec: &NetworkSpec,
    params: &ParamVector,
    data: &Dataset,
    opts: &MetricOptions,
) -> Result<MetricReport> {
    let cfg = &opts.sampler;
    let temperature = match opts.target_peak {
        Some(peak) => normalize_softmax_outputs(spec, params, data, peak)?,
        None => 1.0,
    };
    let calibrated = params.with_temperature(spec, temperature)?;
    let trials = TrialSet::build(data.len(), cfg, one_hot_grad(spec, &calibrated, data))?;
    let gamma = gamma_from_trials(&trials, cfg)?;
    let spectral_radius = spectral_from_trials(&trials, cfg)?;
    let frobenius = match opts.frobenius {
        FrobeniusMode::Exact => frobenius_exact(data.len(), one_hot_grad(spec, &calibrated, data))?,
        FrobeniusMode::Sampled { entries } => {
            frobenius_sampled(&trials, cfg, spec.param_count(), entries)?
        }
    };
    let robustness = robustness_metric(spec, &calibrated, data)?;
    Ok(MetricReport {
        gamma_hat: gamma.gamma_hat,
        per_trial_logdets: gamma.per_trial_logdets,
        robustness,
        frobenius,
        spectral_radius,
        n_prime: cfg.n_prime,
        t: cfg.trials,
        seed: cfg.seed,
        temperature,
    })
}
