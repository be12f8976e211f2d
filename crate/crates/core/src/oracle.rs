//! Brute-force verifiers used to accept the analytic code paths.
//!
//! Everything here works from loss values alone (central finite differences)
//! and a self-contained cyclic Jacobi eigensolver, so a bug in backpropagation
//! or in the main eigen routine cannot hide itself.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{fisher_exact, FisherWeighting};
use crate::net::{
    batch_loss, batch_loss_and_grad, per_sample_grad, Activation, Dataset, LabeledSample, NetworkSpec,
    ParamVector, Target,
};
use crate::regularizer::{reg_loss, sgd_step, split_batch, NetObjective, Objective, OptState};

pub const MAX_FD_PARAMS: usize = 200;
pub const DEFAULT_FD_STEP: f64 = 1e-4;
/// Largest train-loss excess over the label entropy accepted as a minimum with `p = y`.
pub const PREMISE_LIMIT: f64 = 1e-6;
pub const DEFAULT_IDENTITY_TOL: f64 = 1e-2;
pub const INTERLACING_SLACK: f64 = 1e-9;
pub const ORDER_DECAY: f64 = 0.6;
pub const ORDER_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMethod {
    CentralFd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianMatrix {
    pub entries: DMatrix<f64>,
    pub method: HessianMethod,
    pub step: f64,
}

/// Central-difference Hessian of `f` at `params`. Off-diagonal entries use the
/// four-point stencil once per unordered pair, so the result is exactly symmetric.
pub fn finite_diff_hessian_fn<F>(f: F, params: &[f64], step: f64) -> Result<HessianMatrix>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let w = params.len();
    if w > MAX_FD_PARAMS {
        return Err(Error::Size {
            what: "parameters for a finite-difference Hessian",
            value: w,
            limit: MAX_FD_PARAMS,
        });
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let f0 = f(params)?;
    let h2 = step * step;
    let rows = (0..w)
        .into_par_iter()
        .map(|i| {
            let mut p = params.to_vec();
            let mut row = vec![0.0; w];
            p[i] = params[i] + step;
            let up = f(&p)?;
            p[i] = params[i] - step;
            let down = f(&p)?;
            row[i] = (up - 2.0 * f0 + down) / h2;
            for j in i + 1..w {
                let mut corner = |si: f64, sj: f64| {
                    p[i] = params[i] + si * step;
                    p[j] = params[j] + sj * step;
                    let v = f(&p);
                    p[j] = params[j];
                    v
                };
                let pp = corner(1.0, 1.0)?;
                let pm = corner(1.0, -1.0)?;
                let mp = corner(-1.0, 1.0)?;
                let mm = corner(-1.0, -1.0)?;
                row[j] = (pp - pm - mp + mm) / (4.0 * h2);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut entries = DMatrix::zeros(w, w);
    for (i, row) in rows.iter().enumerate() {
        for j in i..w {
            entries[(i, j)] = row[j];
            entries[(j, i)] = row[j];
        }
    }
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("finite-difference Hessian has non-finite entries".into()));
    }
    Ok(HessianMatrix {
        entries,
        method: HessianMethod::CentralFd,
        step,
    })
}

/// Hessian of the mean training loss (against the stored labels) over `data`.
pub fn finite_diff_hessian(
    spec: &NetworkSpec,
    params: &[f64],
    data: &Dataset,
    step: f64,
) -> Result<HessianMatrix> {
    let all: Vec<usize> = (0..data.len()).collect();
    finite_diff_hessian_fn(|p| batch_loss(spec, p, data, &all, Target::Soft), params, step)
}

/// Central-difference gradient of `f`.
pub fn finite_diff_gradient<F>(f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            p[i] = params[i] + step;
            let up = f(&p)?;
            p[i] = params[i] - step;
            let down = f(&p)?;
            p[i] = params[i];
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = m.nrows();
    if !m.is_square() {
        return Err(Error::Shape("Jacobi eigensolver needs a square matrix".into()));
    }
    let mut a = m.clone();
    let total: f64 = a.iter().map(|v| v * v).sum();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
            eig.sort_by(f64::total_cmp);
            return Ok(eig);
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    Err(Error::Numeric("Jacobi eigensolver did not converge in 100 sweeps".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherIdentityReport {
    /// `‖H - F‖_F / ‖H‖_F`.
    pub residual: f64,
    pub tol: f64,
    pub passed: bool,
    /// Train loss minus the smoothed-label entropy, the mean `KL(y‖p)`.
    pub excess: f64,
    pub param_count: usize,
}

/// Mean cross-entropy minus label entropy on `data`, i.e. the mean `KL(y‖p)`.
pub fn entropy_excess(spec: &NetworkSpec, params: &[f64], data: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    Ok(batch_loss(spec, params, data, &all, Target::Soft)? - data.label_entropy())
}

/// Compare the finite-difference loss Hessian with the label-weighted Fisher at a
/// minimum where every prediction equals its smoothed label.
pub fn verify_fisher_identity(
    spec: &NetworkSpec,
    params: &[f64],
    data: &Dataset,
    epsilon: f64,
    tol: f64,
) -> Result<FisherIdentityReport> {
    let smoothed = data.relabeled(epsilon)?;
    let excess = entropy_excess(spec, params, &smoothed)?;
    if excess > PREMISE_LIMIT {
        return Err(Error::Premise {
            excess,
            limit: PREMISE_LIMIT,
        });
    }
    let h = finite_diff_hessian(spec, params, &smoothed, DEFAULT_FD_STEP)?.entries;
    let f = fisher_exact(spec, params, &smoothed, FisherWeighting::LabelWeighted)?.entries;
    let residual = (&h - &f).norm() / h.norm();
    Ok(FisherIdentityReport {
        residual,
        tol,
        passed: residual <= tol,
        excess,
        param_count: params.len(),
    })
}

/// Full-batch Nesterov descent on the smoothed labels until the mean `KL(y‖p)`
/// drops to `target_excess`. Returns the parameters and the reached excess.
pub fn fit_to_entropy_floor(
    spec: &NetworkSpec,
    init: &ParamVector,
    data: &Dataset,
    lr: f64,
    target_excess: f64,
    max_iters: usize,
) -> Result<(ParamVector, f64)> {
    let all: Vec<usize> = (0..data.len()).collect();
    let entropy = data.label_entropy();
    let mut state = OptState::new(init.to_vec(), lr, 0.9);
    for _ in 0..max_iters {
        let (loss, grad) = batch_loss_and_grad(spec, &state.params, data, &all, Target::Soft)?;
        if loss - entropy <= target_excess {
            break;
        }
        sgd_step(&mut state, &grad)?;
    }
    let excess = entropy_excess(spec, &state.params, data)?;
    Ok((ParamVector::new(spec, state.params)?, excess))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterlacingReport {
    pub full: Vec<f64>,
    pub sub: Vec<f64>,
    pub removed: Vec<usize>,
}

/// Check `λ_r ≤ ν_r ≤ λ_{r+n-k}` for the principal submatrix without `removed`.
pub fn verify_interlacing(matrix: &DMatrix<f64>, removed: &[usize]) -> Result<InterlacingReport> {
    let n = matrix.nrows();
    if !matrix.is_square() {
        return Err(Error::Shape("interlacing needs a square matrix".into()));
    }
    if (matrix - matrix.transpose()).abs().max() > 1e-12 * matrix.abs().max().max(1.0) {
        return Err(Error::Shape("interlacing needs a symmetric matrix".into()));
    }
    let mut removed: Vec<usize> = removed.to_vec();
    removed.sort_unstable();
    removed.dedup();
    if removed.iter().any(|&i| i >= n) || removed.len() >= n {
        return Err(Error::Config(format!("cannot remove {removed:?} from a {n}x{n} matrix")));
    }
    let keep: Vec<usize> = (0..n).filter(|i| removed.binary_search(i).is_err()).collect();
    let k = keep.len();
    let sub = DMatrix::from_fn(k, k, |r, c| matrix[(keep[r], keep[c])]);
    let full = jacobi_eigenvalues(matrix)?;
    let nu = jacobi_eigenvalues(&sub)?;
    for r in 0..k {
        let (lo, hi) = (full[r], full[r + n - k]);
        if nu[r] < lo - INTERLACING_SLACK || nu[r] > hi + INTERLACING_SLACK {
            return Err(Error::InterlacingViolation {
                index: r + 1,
                detail: format!("nu = {} outside [{lo}, {hi}]", nu[r]),
            });
        }
    }
    Ok(InterlacingReport {
        full,
        sub: nu,
        removed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateOrderReport {
    pub alphas: Vec<f64>,
    /// `|R_α/α - (1/M) Σ ‖gᵢ‖²|` per `α`.
    pub residuals: Vec<f64>,
    pub mean_sq_grad_norm: f64,
}

/// Check that `R_α/α → (1/M) Σ ‖gᵢ‖²` at first order in `α`. The squared norms
/// come from finite differences of the forward-only loss.
pub fn verify_surrogate_order<O: Objective + ?Sized>(
    obj: &O,
    params: &[f64],
    sub_batches: &[Vec<usize>],
    alpha_grid: &[f64],
) -> Result<SurrogateOrderReport> {
    if alpha_grid.is_empty() || alpha_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("alpha grid must be non-empty and strictly descending".into()));
    }
    let mut mean_sq = 0.0;
    for sub in sub_batches {
        let g = finite_diff_gradient(|p| obj.loss(p, sub, Target::OneHot), params, 1e-5)?;
        mean_sq += g.iter().map(|v| v * v).sum::<f64>() / sub_batches.len() as f64;
    }
    let residuals = alpha_grid
        .iter()
        .map(|&a| reg_loss(obj, params, sub_batches, a).map(|t| (t.r / a - mean_sq).abs()))
        .collect::<Result<Vec<_>>>()?;
    for j in 0..residuals.len() - 1 {
        if residuals[j] > ORDER_FLOOR && residuals[j + 1] > ORDER_DECAY * residuals[j] {
            return Err(Error::Order(format!(
                "residual {} at alpha {} vs {} at alpha {}",
                residuals[j + 1],
                alpha_grid[j + 1],
                residuals[j],
                alpha_grid[j]
            )));
        }
    }
    Ok(SurrogateOrderReport {
        alphas: alpha_grid.to_vec(),
        residuals,
        mean_sq_grad_norm: mean_sq,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSuiteReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub all_passed: bool,
}

fn check(name: &str, outcome: Result<String>) -> CheckResult {
    match outcome {
        Ok(detail) => CheckResult {
            name: name.into(),
            passed: true,
            detail,
        },
        Err(e) => CheckResult {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize, epsilon: f64) -> Result<Dataset> {
    Dataset::new(
        (0..n)
            .map(|i| {
                let x = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                LabeledSample::smoothed(x, i % k, k, epsilon)
            })
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Random symmetric PSD Gram matrix `G Gᵀ` of `n` random vectors in `dim` dimensions.
pub fn random_gram(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose()
}

/// Smoothed-label minimum of a small network on a dataset it can interpolate.
pub fn fisher_identity_case(
    layers: Vec<usize>,
    n: usize,
    epsilon: f64,
    seed: u64,
) -> Result<(NetworkSpec, ParamVector, Dataset)> {
    let spec = NetworkSpec::new(layers, Activation::Tanh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = random_dataset(&mut rng, n, spec.input_dim(), spec.num_classes(), epsilon)?;
    let (params, excess) =
        fit_to_entropy_floor(&spec, &ParamVector::init(&spec, seed), &data, 0.5, 1e-9, 200_000)?;
    if excess > PREMISE_LIMIT {
        return Err(Error::Premise {
            excess,
            limit: PREMISE_LIMIT,
        });
    }
    Ok((spec, params, data))
}

/// Gradient, Hessian, Fisher-identity, interlacing and surrogate-order checks on
/// small random problems.
pub fn run_oracle_suite(seed: u64) -> OracleSuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    checks.push(check("gradient_vs_finite_differences", (|| {
        let mut worst = 0.0f64;
        for case in 0..5 {
            let spec = NetworkSpec::new(vec![3, 5, 3], Activation::Tanh)?;
            let params = ParamVector::init(&spec, seed.wrapping_add(case));
            let data = random_dataset(&mut rng, 1, 3, 3, 0.1)?;
            let g = per_sample_grad(&spec, &params, &data.samples()[0], Target::Soft)?;
            let fd = finite_diff_gradient(|p| batch_loss(&spec, p, &data, &[0], Target::Soft), &params, 1e-6)?;
            for (a, b) in g.iter().zip(&fd) {
                worst = worst.max((a - b).abs() / b.abs().max(1e-3));
            }
        }
        if worst > 1e-5 {
            return Err(Error::Numeric(format!("relative gradient error {worst:e}")));
        }
        Ok(format!("max relative error {worst:e}"))
    })()));

    checks.push(check("hessian_of_quadratic", (|| {
        let a = random_gram(&mut rng, 6, 6);
        let h = finite_diff_hessian_fn(
            |w| {
                let v = nalgebra::DVector::from_column_slice(w);
                Ok(0.5 * v.dot(&(&a * &v)))
            },
            &[0.3, -0.1, 0.8, 0.0, 1.2, -0.7],
            DEFAULT_FD_STEP,
        )?;
        let err = (&h.entries - &a).abs().max();
        if err > 1e-6 {
            return Err(Error::Numeric(format!("max abs error {err:e}")));
        }
        Ok(format!("max abs error {err:e}"))
    })()));

    for (name, layers, n) in [
        ("fisher_identity_softmax_regression", vec![3, 2], 4),
        ("fisher_identity_tanh_net", vec![2, 6, 3], 6),
    ] {
        let case_seed = rng.random();
        checks.push(check(name, (|| {
            let (spec, params, data) = fisher_identity_case(layers, n, 0.1, case_seed)?;
            let report = verify_fisher_identity(&spec, &params, &data, 0.1, 2e-2)?;
            if !report.passed {
                return Err(Error::Numeric(format!("residual {:e} > {:e}", report.residual, report.tol)));
            }
            Ok(format!("residual {:e}, excess {:e}, W = {}", report.residual, report.excess, report.param_count))
        })()));
    }

    checks.push(check("interlacing", (|| {
        for _ in 0..20 {
            let n = rng.random_range(2..10);
            let dim = rng.random_range(1..12);
            let gram = random_gram(&mut rng, n, dim);
            let drop = rng.random_range(1..n);
            let removed: Vec<usize> = rand::seq::index::sample(&mut rng, n, drop).into_vec();
            verify_interlacing(&gram, &removed)?;
        }
        Ok("20 random Gram matrices".into())
    })()));

    checks.push(check("surrogate_first_order", (|| {
        let mut worst = 0.0f64;
        for case in 0..3 {
            let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Tanh)?;
            let params = ParamVector::init(&spec, seed.wrapping_add(100 + case));
            let data = random_dataset(&mut rng, 8, 3, 2, 0.0)?;
            let obj = NetObjective::new(&spec, &data);
            let batch: Vec<usize> = (0..8).collect();
            let subs = split_batch(&batch, 4, &mut rng)?;
            let r = verify_surrogate_order(&obj, &params, &subs, &[1e-2, 1e-3, 1e-4])?;
            for w in r.residuals.windows(2) {
                if w[0] > ORDER_FLOOR {
                    worst = worst.max(w[1] / w[0]);
                }
            }
        }
        Ok(format!("worst decay ratio per decade {worst:.3}"))
    })()));

    let all_passed = checks.iter().all(|c| c.passed);
    OracleSuiteReport {
        seed,
        checks,
        all_passed,
    }
}
