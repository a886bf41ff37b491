//! Closed-form approximation-error bounds and sample-complexity expressions.
//!
//! Everything here is a pure function of the model constants `(B, K, C, β)`,
//! the sampling interval `h` and the quantization errors `L_X`, `L_U`.
//! Each function checks the hypotheses under which its bound is valid and
//! rejects inputs outside them.

use serde::{Deserialize, Serialize};

use crate::scalar::{lit, Scalar};
use crate::{Error, Result};

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Validation(msg()))
    }
}

fn nonneg<F: Scalar>(v: F) -> bool {
    v.is_finite() && v >= F::zero()
}

fn pos<F: Scalar>(v: F) -> bool {
    v.is_finite() && v > F::zero()
}

/// Error from sampling the diffusion at interval `h` under piecewise-constant
/// controls: `hB + K B h / (1 - e^{-βh}) · (h + √(2h/π))`.
pub fn time_discretization_bound<F: Scalar>(b: F, k: F, beta: F, h: F) -> Result<F> {
    require(pos(h) && pos(beta), || format!("time-discretization bound needs h > 0 and beta > 0 (h = {h}, beta = {beta})"))?;
    require(nonneg(b) && nonneg(k), || "time-discretization bound needs B >= 0 and K >= 0".into())?;
    let root = (lit::<F>(2.0) * h / F::PI()).sqrt();
    Ok(h * b + k * b * h / (-(-beta * h).exp_m1()) * (h + root))
}

/// Wasserstein-Lipschitz factor of the sampled kernel in the state:
/// `e^{(K + K²/2) h}`.
pub fn lipschitz_state_factor<F: Scalar>(k: F, h: F) -> Result<F> {
    require(nonneg(k) && nonneg(h), || format!("state Lipschitz factor needs K >= 0 and h >= 0 (K = {k}, h = {h})"))?;
    Ok(((k + k * k * lit(0.5)) * h).exp())
}

/// Wasserstein-Lipschitz factor of the sampled kernel in the action:
/// `2K e^{2K²h}`, valid for `h < 1`.
pub fn lipschitz_action_factor<F: Scalar>(k: F, h: F) -> Result<F> {
    require(nonneg(k), || format!("action Lipschitz factor needs K >= 0, got {k}"))?;
    require(h > F::zero() && h < F::one(), || format!("action Lipschitz factor requires 0 < h < 1, got h = {h}"))?;
    let two = lit::<F>(2.0);
    Ok(two * k * (two * k * k * h).exp())
}

/// Condition `β > K + K²/2` under which the aggregated kernel contracts.
pub fn quantization_hypothesis_holds<F: Scalar>(k: F, beta: F) -> bool {
    beta > k + k * k * lit(0.5)
}

/// Loss from optimizing over the quantized finite model instead of the
/// sampled chain:
///
/// ```text
/// (Kh - Kh a + 2K²h e^{h(2K²-β)}) / ((1 - e^{-βh})(1 - a)) · L_U
///   + Kh / ((1 - e^{-βh})(1 - a)) · L_X,        a = e^{h(K + K²/2 - β)}
/// ```
pub fn quantization_bound<F: Scalar>(k: F, beta: F, h: F, l_x: F, l_u: F) -> Result<F> {
    require(nonneg(k) && pos(beta), || "quantization bound needs K >= 0 and beta > 0".into())?;
    require(quantization_hypothesis_holds(k, beta), || {
        format!("quantization bound requires beta > K + K^2/2 (beta = {beta}, K + K^2/2 = {})", k + k * k * lit(0.5))
    })?;
    require(h > F::zero() && h < F::one(), || format!("quantization bound requires 0 < h < 1, got h = {h}"))?;
    require(nonneg(l_x) && nonneg(l_u), || "quantization errors L_X, L_U must be nonnegative".into())?;
    let two = lit::<F>(2.0);
    let kh = k * h;
    let a = (h * (k + k * k * lit(0.5) - beta)).exp();
    let denom = (-(-beta * h).exp_m1()) * (F::one() - a);
    let action_num = kh - kh * a + two * k * k * h * (h * (two * k * k - beta)).exp();
    Ok(action_num / denom * l_u + kh / denom * l_x)
}

/// Loss of the best piecewise-constant control: `N h^{1/4}`, or `N h` for
/// regular models.
pub fn pwc_bound<F: Scalar>(n_const: F, h: F, regular: bool) -> Result<F> {
    require(nonneg(n_const) && pos(h), || format!("piecewise-constant bound needs N >= 0 and h > 0 (N = {n_const}, h = {h})"))?;
    Ok(if regular { n_const * h } else { n_const * h.powf(lit(0.25)) })
}

/// `C (√h + (L_X + L_U)/h + h^{1/4})`.
pub fn asymptotic_bound<F: Scalar>(c_const: F, h: F, l_x: F, l_u: F) -> Result<F> {
    require(pos(h), || format!("asymptotic bound needs h > 0, got {h}"))?;
    require(nonneg(c_const) && nonneg(l_x) && nonneg(l_u), || "asymptotic bound needs nonnegative C, L_X, L_U".into())?;
    Ok(c_const * (h.sqrt() + (l_x + l_u) / h + h.powf(lit(0.25))))
}

/// Evaluated terms of the total error bound `e(h, L_X, L_U)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport<F> {
    pub term_time: F,
    pub term_quant: F,
    pub term_pwc: F,
    /// `2 term_time + term_quant + term_pwc`.
    pub total: F,
    pub alpha_t_state: F,
    pub alpha_t_action: F,
    /// `√h + (L_X + L_U)/h + h^{1/4}` (the asymptotic form with `C = 1`).
    pub asymptotic_c_form: F,
    /// `false` when `β ≤ K + K²/2`; `term_quant` and `total` are then `+∞`.
    pub quant_hypothesis_holds: bool,
}

#[allow(clippy::too_many_arguments)]
fn compose<F: Scalar>(b: F, k: F, beta: F, h: F, l_x: F, l_u: F, n_const: F, regular: bool, vacuous_ok: bool) -> Result<BoundReport<F>> {
    let term_time = time_discretization_bound(b, k, beta, h)?;
    let holds = quantization_hypothesis_holds(k, beta);
    let term_quant = if holds || !vacuous_ok {
        quantization_bound(k, beta, h, l_x, l_u)?
    } else {
        require(h > F::zero() && h < F::one(), || format!("quantization bound requires 0 < h < 1, got h = {h}"))?;
        F::infinity()
    };
    let term_pwc = pwc_bound(n_const, h, regular)?;
    Ok(BoundReport {
        term_time,
        term_quant,
        term_pwc,
        total: lit::<F>(2.0) * term_time + term_quant + term_pwc,
        alpha_t_state: lipschitz_state_factor(k, h)?,
        alpha_t_action: lipschitz_action_factor(k, h)?,
        asymptotic_c_form: asymptotic_bound(F::one(), h, l_x, l_u)?,
        quant_hypothesis_holds: holds,
    })
}

/// The total bound `e(h, L_X, L_U) = 2·time + quantization + piecewise-constant`.
#[allow(clippy::too_many_arguments)]
pub fn total_error_bound<F: Scalar>(b: F, k: F, beta: F, h: F, l_x: F, l_u: F, n_const: F, regular: bool) -> Result<BoundReport<F>> {
    compose(b, k, beta, h, l_x, l_u, n_const, regular, false)
}

/// As [`total_error_bound`], but when `β ≤ K + K²/2` the quantization term
/// gives no finite guarantee and is reported as `+∞` instead of an error.
#[allow(clippy::too_many_arguments)]
pub fn total_error_bound_or_vacuous<F: Scalar>(b: F, k: F, beta: F, h: F, l_x: F, l_u: F, n_const: F, regular: bool) -> Result<BoundReport<F>> {
    compose(b, k, beta, h, l_x, l_u, n_const, regular, true)
}

/// `h ‖c‖∞ / (1 - e^{-βh})`, the sup bound on the finite-model value.
pub fn v_max<F: Scalar>(h: F, cost_sup: F, beta: F) -> Result<F> {
    require(pos(h) && pos(beta) && nonneg(cost_sup), || "V_max needs h > 0, beta > 0 and ||c|| >= 0".into())?;
    Ok(h * cost_sup / (-(-beta * h).exp_m1()))
}

fn check_sizes(size_x: usize, size_u: usize) -> Result<()> {
    require(size_x >= 1 && size_u >= 1, || "grid sizes must be at least 1".into())
}

/// Order expression for the number of steps the linear-rate learner needs to
/// reach `ε`-accurate Q values with probability `1 - δ` (hidden constants set
/// to one):
///
/// ```text
/// (L + ψL + 1)^{(2/(1-β_h)) ln(V/ε)} · V² ln(|X||U| V / (δ ε ψ (1-β_h))) / (ψ ε (1-β_h))²
/// ```
#[allow(clippy::too_many_arguments)]
pub fn sample_complexity_linear<F: Scalar>(
    l_cover: F,
    psi: F,
    eps: F,
    delta: F,
    beta_h: F,
    size_x: usize,
    size_u: usize,
    v_max: F,
) -> Result<F> {
    require(pos(l_cover) && pos(psi) && pos(eps) && pos(v_max), || "cover time, psi, eps and V_max must be positive".into())?;
    require(delta > F::zero() && delta < F::one(), || format!("confidence delta must lie in (0, 1), got {delta}"))?;
    require(beta_h > F::zero() && beta_h < F::one(), || format!("beta_h must lie in (0, 1), got {beta_h}"))?;
    require(eps < v_max, || format!("eps = {eps} must be below V_max = {v_max}"))?;
    check_sizes(size_x, size_u)?;
    let one = F::one();
    let gap = one - beta_h;
    let sizes = F::from_usize(size_x * size_u).expect("size fits");
    let base = l_cover + psi * l_cover + one;
    let exponent = lit::<F>(2.0) / gap * (v_max / eps).ln();
    let log_term = (sizes * v_max / (delta * eps * psi * gap)).ln();
    let scale = psi * eps * gap;
    Ok(base.powf(exponent) * v_max * v_max * log_term / (scale * scale))
}

/// Small-`h` simplification:
/// `(1/ε)^{ln(L + ψL + 1)/h} · ln(|X||U| / (δ ε ψ h)) / (ε² h²)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_complexity_simplified<F: Scalar>(
    l_cover: F,
    psi: F,
    eps: F,
    delta: F,
    h: F,
    size_x: usize,
    size_u: usize,
) -> Result<F> {
    require(pos(l_cover) && pos(psi) && pos(eps) && pos(h), || "cover time, psi, eps and h must be positive".into())?;
    require(delta > F::zero() && delta < F::one(), || format!("confidence delta must lie in (0, 1), got {delta}"))?;
    check_sizes(size_x, size_u)?;
    let sizes = F::from_usize(size_x * size_u).expect("size fits");
    let log_arg = sizes / (delta * eps * psi * h);
    if log_arg <= F::one() {
        log::warn!("simplified complexity: logarithm argument {log_arg} <= 1, h is too large for the simplification");
    }
    let base = l_cover + psi * l_cover + F::one();
    Ok((F::one() / eps).powf(base.ln() / h) * log_arg.ln() / (eps * eps * h * h))
}

/// Complexity with polynomial rates `α = 1/k^ω`, `ω ∈ (1/2, 1)`:
/// `(L^{1+3ω} ln(|X||U|) / (h² ε²))^{1/ω} + ((L/h) ln(1/ε))^{1/(1-ω)}`.
pub fn sample_complexity_polynomial<F: Scalar>(omega: F, l_cover: F, eps: F, h: F, size_x: usize, size_u: usize) -> Result<F> {
    require(omega > lit(0.5) && omega < F::one(), || format!("polynomial rate exponent omega must lie in (1/2, 1), got {omega}"))?;
    require(pos(l_cover) && pos(h), || "cover time and h must be positive".into())?;
    require(eps > F::zero() && eps <= F::one(), || format!("eps must lie in (0, 1], got {eps}"))?;
    check_sizes(size_x, size_u)?;
    let sizes = F::from_usize(size_x * size_u).expect("size fits");
    let one = F::one();
    let first = (l_cover.powf(one + lit::<F>(3.0) * omega) * sizes.ln() / (h * h * eps * eps)).powf(one / omega);
    let second = (l_cover / h * (one / eps).ln()).powf(one / (one - omega));
    Ok(first + second)
}

/// Inputs of the sample-complexity expressions that are not grid or model
/// data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityParams<F> {
    /// Cover time `L`; `None` uses `|X_h| |U_h|`.
    pub cover_time: Option<F>,
    pub psi: F,
    pub eps: F,
    pub delta: F,
    pub omega: F,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport<F> {
    pub t_linear: F,
    pub t_simplified: F,
    pub t_polynomial: F,
    pub v_max: F,
}

pub fn complexity_report<F: Scalar>(
    params: &ComplexityParams<F>,
    h: F,
    beta: F,
    cost_sup: F,
    size_x: usize,
    size_u: usize,
) -> Result<ComplexityReport<F>> {
    let cover = params.cover_time.unwrap_or_else(|| F::from_usize(size_x * size_u).expect("size fits"));
    let vmax = v_max(h, cost_sup, beta)?;
    let beta_h = (-beta * h).exp();
    Ok(ComplexityReport {
        t_linear: sample_complexity_linear(cover, params.psi, params.eps, params.delta, beta_h, size_x, size_u, vmax)?,
        t_simplified: sample_complexity_simplified(cover, params.psi, params.eps, params.delta, h, size_x, size_u)?,
        t_polynomial: sample_complexity_polynomial(params.omega, cover, params.eps, h, size_x, size_u)?,
        v_max: vmax,
    })
}
