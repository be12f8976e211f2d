//! PAC-Bayes generalization bound driven by the Fisher log-determinant.
//!
//! With a uniform prior over the basin `M(w₀)` of volume `V` and a posterior
//! `q(w) ∝ exp(-|L₀ - L(S,w)|)`, the expected test loss is bounded by
//!
//! ```text
//! E_Q[L(S,w)] + 2 √((2L₀ + 2A + ln(2N/δ)) / (N - 1)),
//! A = W · V^{2/W} · π^{1/W} · exp(γ/W) / (4πe).
//! ```
//!
//! Everything is evaluated in the log domain. The linear-scale fields of
//! [`BoundResult`] overflow to `+inf` once `γ/W` passes roughly 700; the `ln_*`
//! fields stay finite over the full input range.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Training set size.
    #[serde(alias = "N")]
    pub n: u64,
    /// Parameter count.
    #[serde(alias = "W")]
    pub w: u64,
    /// Basin volume.
    #[serde(alias = "V", default = "default_volume")]
    pub v: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Training loss at the minimum.
    #[serde(alias = "L0")]
    pub l0: f64,
    /// Fisher log-determinant `γ`, or its rescaled estimate.
    pub gamma: f64,
    /// Plug-in for `E_Q[L(S,w)]`; `L₀` when absent.
    #[serde(default)]
    pub expected_train_loss: Option<f64>,
}

fn default_volume() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.05
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("need N >= 2 samples, got {}", self.n)));
        }
        if self.w < 1 {
            return Err(Error::Config("parameter count must be positive".into()));
        }
        if !(self.v > 0.0 && self.v.is_finite()) {
            return Err(Error::Config(format!("basin volume must be positive, got {}", self.v)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        if !(self.l0 >= 0.0 && self.l0.is_finite()) {
            return Err(Error::Config(format!("L0 must be a finite non-negative loss, got {}", self.l0)));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be finite, got {}", self.gamma)));
        }
        if let Some(e) = self.expected_train_loss {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::Config(format!("expected train loss must be finite and >= 0, got {e}")));
            }
        }
        Ok(())
    }

    pub fn expected_loss(&self) -> f64 {
        self.expected_train_loss.unwrap_or(self.l0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    /// Curvature term `A`.
    pub a: f64,
    pub rhs: f64,
    /// Basin height (Stirling form).
    pub h: f64,
    pub ln_a: f64,
    /// `ln(rhs - E_Q[L(S,w)])`.
    pub ln_gap: f64,
    /// `ln(h - L₀)`.
    pub ln_h_excess: f64,
}

/// `ln(e^a + e^b)` tolerating `-inf` arguments.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln A`.
pub fn ln_curvature_term(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let w = inputs.w as f64;
    let ln_a = -(4.0 * PI * E).ln() + w.ln() + (2.0 * inputs.v.ln() + PI.ln() + inputs.gamma) / w;
    if !ln_a.is_finite() {
        return Err(Error::Numeric(format!("ln A = {ln_a}")));
    }
    Ok(ln_a)
}

/// `A = W · V^{2/W} · π^{1/W} · exp(γ/W) / (4πe)`.
pub fn curvature_term(inputs: &BoundInputs) -> Result<f64> {
    let a = ln_curvature_term(inputs)?.exp();
    if !a.is_finite() {
        return Err(Error::Numeric(format!(
            "A overflows f64 (ln A = {}); use the log-domain value",
            ln_curvature_term(inputs)?
        )));
    }
    Ok(a)
}

/// `ln(h - L₀)` of the Stirling-approximated height, `|I| = exp(fisher_logdet)`.
pub fn ln_basin_height_excess(inputs: &BoundInputs, fisher_logdet: f64) -> Result<f64> {
    inputs.validate()?;
    if !fisher_logdet.is_finite() {
        return Err(Error::Numeric(format!("Fisher log-determinant is {fisher_logdet}")));
    }
    let w = inputs.w as f64;
    let ln = (2.0 * inputs.v.ln() + PI.ln() + fisher_logdet) / w + (w + 1.0) / w * w.ln()
        - (4.0 * PI * E).ln();
    if !ln.is_finite() {
        return Err(Error::Numeric(format!("ln(h - L0) = {ln}")));
    }
    Ok(ln)
}

/// `h ≈ L₀ + V^{2/W} π^{1/W} W^{(W+1)/W} |I|^{1/W} / (4πe)`.
pub fn basin_height(inputs: &BoundInputs, fisher_logdet: f64) -> Result<f64> {
    let h = inputs.l0 + ln_basin_height_excess(inputs, fisher_logdet)?.exp();
    if !h.is_finite() {
        return Err(Error::Numeric("basin height overflows f64".into()));
    }
    Ok(h)
}

/// `ln` of the volume of the unit ball in `W` dimensions.
pub fn ln_unit_ball_volume(w: u64) -> f64 {
    let w = w as f64;
    0.5 * w * PI.ln() - ln_gamma(0.5 * w + 1.0)
}

/// `ln(h - L₀)` from the Gamma-function form, without Stirling's approximation:
/// the level at which the quadratic basin encloses volume exactly `V`.
pub fn ln_basin_height_excess_exact(inputs: &BoundInputs, fisher_logdet: f64) -> Result<f64> {
    inputs.validate()?;
    let w = inputs.w as f64;
    let ln = 2.0 / w * (inputs.v.ln() + ln_gamma(0.5 * w + 1.0)) + fisher_logdet / w
        - (2.0 * PI).ln();
    if !ln.is_finite() {
        return Err(Error::Numeric(format!("ln(h - L0) = {ln}")));
    }
    Ok(ln)
}

/// `h = L₀ + (V Γ(W/2 + 1))^{2/W} |I|^{1/W} / (2π)`.
pub fn basin_height_exact(inputs: &BoundInputs, fisher_logdet: f64) -> Result<f64> {
    let h = inputs.l0 + ln_basin_height_excess_exact(inputs, fisher_logdet)?.exp();
    if !h.is_finite() {
        return Err(Error::Numeric("basin height overflows f64".into()));
    }
    Ok(h)
}

/// Full right-hand side of the bound plus `A` and the Stirling height at `γ`.
pub fn bound_rhs(inputs: &BoundInputs) -> Result<BoundResult> {
    inputs.validate()?;
    let ln_a = ln_curvature_term(inputs)?;
    let n = inputs.n as f64;
    let confidence = (2.0 * n / inputs.delta).ln();
    let ln_num = log_add_exp(
        log_add_exp((2.0 * inputs.l0).ln(), std::f64::consts::LN_2 + ln_a),
        confidence.ln(),
    );
    let ln_gap = std::f64::consts::LN_2 + 0.5 * (ln_num - (n - 1.0).ln());
    let ln_h_excess = ln_basin_height_excess(inputs, inputs.gamma)?;
    if !(ln_num.is_finite() && ln_gap.is_finite()) {
        return Err(Error::Numeric(format!("ln of bound gap is {ln_gap}")));
    }
    Ok(BoundResult {
        a: ln_a.exp(),
        rhs: inputs.expected_loss() + ln_gap.exp(),
        h: inputs.l0 + ln_h_excess.exp(),
        ln_a,
        ln_gap,
        ln_h_excess,
    })
}

/// `bound_rhs` at each `γ`, all other inputs fixed.
pub fn gamma_sweep(inputs: &BoundInputs, gammas: &[f64]) -> Result<Vec<(f64, BoundResult)>> {
    gammas
        .iter()
        .map(|&gamma| bound_rhs(&BoundInputs { gamma, ..*inputs }).map(|r| (gamma, r)))
        .collect()
}

/// Positive definite quadratic basin `L(w) = L₀ + ½ (w - w₀)ᵀ H (w - w₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    pub hessian: nalgebra::DMatrix<f64>,
    pub l0: f64,
    pub volume: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlHeightReport {
    pub kl: f64,
    /// Height at which the basin has volume exactly `V`.
    pub h: f64,
    /// Stirling-approximated height.
    pub h_stirling: f64,
    pub holds: bool,
    pub panels: usize,
}

pub const KL_SLACK: f64 = 1e-6;
const MAX_KL_DIM: usize = 5;
const QUAD_TOL: f64 = 1e-12;
const MAX_PANELS: usize = 1 << 20;

/// Composite Simpson rule on `[0, 1]`, doubling panels until the relative change
/// drops below `QUAD_TOL`.
fn simpson_converged(f: impl Fn(f64) -> f64) -> Result<(f64, usize)> {
    let simpson = |panels: usize| {
        let h = 1.0 / panels as f64;
        let mut s = f(0.0) + f(1.0);
        for i in 1..panels {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        s * h / 3.0
    };
    let mut panels = 16;
    let mut prev = simpson(panels);
    while panels < MAX_PANELS {
        panels *= 2;
        let next = simpson(panels);
        if (next - prev).abs() <= QUAD_TOL * next.abs() {
            return Ok((next, panels));
        }
        prev = next;
    }
    Err(Error::Numeric(format!("radial quadrature did not converge in {MAX_PANELS} panels")))
}

/// `KL(Q‖P)` for the uniform prior and the truncated posterior
/// `q ∝ exp(-(L - L₀))` on the quadratic basin of volume `V`, compared with its height.
///
/// In whitened coordinates `z = H^{1/2}(w - w₀)` the basin is a ball of radius
/// `r₀ = √(2(h - L₀))` and the posterior is radial, so the divergence reduces to
/// one-dimensional integrals over `s = |z| / r₀`:
/// `KL = -ln W - ln I₀ - (r₀²/2) I₂/I₀`, `Iₖ = ∫₀¹ sᵏ⁺ᵂ⁻¹ exp(-r₀² s²/2) ds`.
pub fn kl_height_bound_check(model: &QuadraticModel) -> Result<KlHeightReport> {
    let w = model.hessian.nrows();
    if w == 0 || w > MAX_KL_DIM || !model.hessian.is_square() {
        return Err(Error::Size {
            what: "quadratic model dimension",
            value: w,
            limit: MAX_KL_DIM,
        });
    }
    let eig = crate::linalg::symmetric_eigenvalues(&model.hessian)?;
    if eig[0] <= 0.0 {
        return Err(Error::SingularFisher {
            eigenvalue: eig[0],
            floor: 0.0,
        });
    }
    let logdet: f64 = eig.iter().map(|l| l.ln()).sum();
    let inputs = BoundInputs {
        n: 2,
        w: w as u64,
        v: model.volume,
        delta: 1.0,
        l0: model.l0,
        gamma: logdet,
        expected_train_loss: None,
    };
    let ln_excess = ln_basin_height_excess_exact(&inputs, logdet)?;
    let r0_sq = 2.0 * ln_excess.exp();
    let wf = w as f64;
    let (i0, p0) = simpson_converged(|s| s.powi(w as i32 - 1) * (-0.5 * r0_sq * s * s).exp())?;
    let (i2, p2) = simpson_converged(|s| s.powi(w as i32 + 1) * (-0.5 * r0_sq * s * s).exp())?;
    let kl = -wf.ln() - i0.ln() - 0.5 * r0_sq * i2 / i0;
    if !kl.is_finite() {
        return Err(Error::Numeric(format!("KL evaluates to {kl}")));
    }
    let h = model.l0 + ln_excess.exp();
    Ok(KlHeightReport {
        kl,
        h,
        h_stirling: basin_height(&inputs, logdet)?,
        holds: kl <= h + KL_SLACK,
        panels: p0.max(p2),
    })
}
