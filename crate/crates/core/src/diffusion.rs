//! Controlled one-dimensional diffusions and their simulation.
//!
//! Paths are generated with Euler–Maruyama at resolution `δ = h / m` and are
//! clamped to the model's truncated state domain after every substep.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scalar::{from_usize, lit, Scalar};
use crate::{rng, Error, Result};

/// A coefficient function `(x, u) -> value`.
pub type Coefficient<F> = Arc<dyn Fn(F, F) -> F + Send + Sync>;

/// Closed interval `[lo, hi]` with `lo < hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval<F> {
    pub lo: F,
    pub hi: F,
}

impl<F: Scalar> Interval<F> {
    pub fn new(lo: F, hi: F) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::validation(format!(
                "interval requires finite lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> F {
        self.hi - self.lo
    }

    pub fn contains(&self, x: F) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn clamp(&self, x: F) -> F {
        x.max(self.lo).min(self.hi)
    }

    /// Largest absolute value attained on the interval.
    pub fn max_abs(&self) -> F {
        self.lo.abs().max(self.hi.abs())
    }
}

/// Declared regularity constants of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants<F> {
    /// Uniform bound on `|b|` and `|σ|`.
    pub bound_b: F,
    /// Joint Lipschitz constant of `b`, `σ` and `c`.
    pub lipschitz_k: F,
    /// Uniform bound on `|c|`.
    pub cost_bound_c: F,
    /// Continuous-time discount rate.
    pub discount_beta: F,
}

/// Parameters of the built-in Ornstein–Uhlenbeck family
/// `b(x,u) = -θx + u`, `σ = σ₀`, `c(x,u) = min(x² + r u², C)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuParams<F> {
    pub theta: F,
    pub sigma0: F,
    pub cost_weight_r: F,
}

impl<F: Scalar> OuParams<F> {
    pub fn new(theta: F, sigma0: F, cost_weight_r: F) -> Result<Self> {
        if !(theta >= F::zero() && sigma0 >= F::zero() && cost_weight_r >= F::zero()) {
            return Err(Error::validation(format!(
                "OU parameters must be nonnegative (theta = {theta}, sigma0 = {sigma0}, r = {cost_weight_r})"
            )));
        }
        Ok(Self { theta, sigma0, cost_weight_r })
    }

    /// Mean and variance of the exact transition law of `X(h)` given
    /// `X(0) = x` under the constant action `u`.
    pub fn transition_moments(&self, x: F, u: F, h: F) -> (F, F) {
        let theta = self.theta;
        let s2 = self.sigma0 * self.sigma0;
        if theta == F::zero() {
            return (x + u * h, s2 * h);
        }
        let decay = (-theta * h).exp();
        let one_minus = -(-theta * h).exp_m1();
        let mean = x * decay + u / theta * one_minus;
        let var = s2 * (-(-lit::<F>(2.0) * theta * h).exp_m1()) / (lit::<F>(2.0) * theta);
        (mean, var)
    }
}

/// A controlled diffusion `dX = b(X,u) dt + σ(X,u) dB` with running cost `c`
/// on a truncated state domain.
#[derive(Clone)]
pub struct DiffusionModel<F: Scalar> {
    drift: Coefficient<F>,
    diffusion: Coefficient<F>,
    cost: Coefficient<F>,
    pub bound_b: F,
    pub lipschitz_k: F,
    pub cost_bound_c: F,
    pub discount_beta: F,
    pub domain: Interval<F>,
    pub actions: Interval<F>,
}

impl<F: Scalar> fmt::Debug for DiffusionModel<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("bound_b", &self.bound_b)
            .field("lipschitz_k", &self.lipschitz_k)
            .field("cost_bound_c", &self.cost_bound_c)
            .field("discount_beta", &self.discount_beta)
            .field("domain", &self.domain)
            .field("actions", &self.actions)
            .finish_non_exhaustive()
    }
}

impl<F: Scalar> DiffusionModel<F> {
    pub fn new(
        drift: impl Fn(F, F) -> F + Send + Sync + 'static,
        diffusion: impl Fn(F, F) -> F + Send + Sync + 'static,
        cost: impl Fn(F, F) -> F + Send + Sync + 'static,
        constants: ModelConstants<F>,
        domain: Interval<F>,
        actions: Interval<F>,
    ) -> Result<Self> {
        let ModelConstants { bound_b, lipschitz_k, cost_bound_c, discount_beta } = constants;
        let nonneg = |v: F| v.is_finite() && v >= F::zero();
        if !(nonneg(bound_b) && nonneg(lipschitz_k) && nonneg(cost_bound_c)) {
            return Err(Error::validation(
                "model constants B, K, C must be finite and nonnegative",
            ));
        }
        if !(discount_beta.is_finite() && discount_beta > F::zero()) {
            return Err(Error::validation(format!(
                "discount rate beta must be positive, got {discount_beta}"
            )));
        }
        Interval::new(domain.lo, domain.hi)?;
        Interval::new(actions.lo, actions.hi)?;
        Ok(Self {
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            cost: Arc::new(cost),
            bound_b,
            lipschitz_k,
            cost_bound_c,
            discount_beta,
            domain,
            actions,
        })
    }

    /// The Ornstein–Uhlenbeck family with constants derived from the domain
    /// and action range.
    pub fn ornstein_uhlenbeck(
        params: OuParams<F>,
        domain: Interval<F>,
        actions: Interval<F>,
        discount_beta: F,
    ) -> Result<Self> {
        let OuParams { theta, sigma0, cost_weight_r: r } = params;
        let two = lit::<F>(2.0);
        let xm = domain.max_abs();
        let um = actions.max_abs();
        let cap = xm * xm + r * um * um;
        let constants = ModelConstants {
            bound_b: (theta * xm + um).max(sigma0),
            lipschitz_k: theta.max(F::one()).max(two * xm).max(two * r * um),
            cost_bound_c: cap,
            discount_beta,
        };
        Self::new(
            move |x, u| -theta * x + u,
            move |_, _| sigma0,
            move |x, u| (x * x + r * u * u).min(cap),
            constants,
            domain,
            actions,
        )
    }

    /// Constant coefficients `b ≡ drift`, `σ ≡ sigma`, `c ≡ cost`.
    pub fn constant(
        drift: F,
        sigma: F,
        cost: F,
        domain: Interval<F>,
        actions: Interval<F>,
        discount_beta: F,
    ) -> Result<Self> {
        let constants = ModelConstants {
            bound_b: drift.abs().max(sigma.abs()),
            lipschitz_k: F::zero(),
            cost_bound_c: cost.abs(),
            discount_beta,
        };
        Self::new(move |_, _| drift, move |_, _| sigma, move |_, _| cost, constants, domain, actions)
    }

    /// Same dynamics with a different running cost.
    pub fn with_cost(
        &self,
        cost: impl Fn(F, F) -> F + Send + Sync + 'static,
        cost_bound_c: F,
    ) -> Self {
        Self { cost: Arc::new(cost), cost_bound_c, ..self.clone() }
    }

    #[inline]
    pub fn drift(&self, x: F, u: F) -> F {
        (self.drift)(x, u)
    }

    #[inline]
    pub fn diffusion(&self, x: F, u: F) -> F {
        (self.diffusion)(x, u)
    }

    #[inline]
    pub fn cost(&self, x: F, u: F) -> F {
        (self.cost)(x, u)
    }

    pub fn constants(&self) -> ModelConstants<F> {
        ModelConstants {
            bound_b: self.bound_b,
            lipschitz_k: self.lipschitz_k,
            cost_bound_c: self.cost_bound_c,
            discount_beta: self.discount_beta,
        }
    }

    /// Scans an `n × n` grid of `domain × actions` and compares the observed
    /// sup norms and difference quotients with the declared constants.
    pub fn check_assumptions(&self, n: usize) -> AssumptionCheck<F> {
        let n = n.max(2);
        let xs = linspace(self.domain.lo, self.domain.hi, n);
        let us = linspace(self.actions.lo, self.actions.hi, n);
        let mut out = AssumptionCheck {
            max_abs_drift: F::zero(),
            max_abs_diffusion: F::zero(),
            max_abs_cost: F::zero(),
            max_quotient_dynamics: F::zero(),
            max_quotient_cost: F::zero(),
            holds: true,
        };
        for (ix, &x) in xs.iter().enumerate() {
            for (iu, &u) in us.iter().enumerate() {
                let (b, s, c) = (self.drift(x, u), self.diffusion(x, u), self.cost(x, u));
                out.max_abs_drift = out.max_abs_drift.max(b.abs());
                out.max_abs_diffusion = out.max_abs_diffusion.max(s.abs());
                out.max_abs_cost = out.max_abs_cost.max(c.abs());
                let mut neighbours = Vec::with_capacity(2);
                if ix + 1 < n {
                    neighbours.push((xs[ix + 1], u, xs[ix + 1] - x));
                }
                if iu + 1 < n {
                    neighbours.push((x, us[iu + 1], us[iu + 1] - u));
                }
                for (x2, u2, d) in neighbours {
                    let qd = ((self.drift(x2, u2) - b).abs() + (self.diffusion(x2, u2) - s).abs()) / d;
                    let qc = (self.cost(x2, u2) - c).abs() / d;
                    out.max_quotient_dynamics = out.max_quotient_dynamics.max(qd);
                    out.max_quotient_cost = out.max_quotient_cost.max(qc);
                }
            }
        }
        let slack = lit::<F>(1.01);
        let k = self.lipschitz_k * slack;
        out.holds = out.max_abs_drift <= self.bound_b
            && out.max_abs_diffusion <= self.bound_b
            && out.max_abs_cost <= self.cost_bound_c
            && out.max_quotient_dynamics <= k
            && out.max_quotient_cost <= k;
        out
    }
}

/// Result of [`DiffusionModel::check_assumptions`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AssumptionCheck<F> {
    pub max_abs_drift: F,
    pub max_abs_diffusion: F,
    pub max_abs_cost: F,
    pub max_quotient_dynamics: F,
    pub max_quotient_cost: F,
    pub holds: bool,
}

fn linspace<F: Scalar>(lo: F, hi: F, n: usize) -> Vec<F> {
    let step = (hi - lo) / from_usize::<F>(n - 1);
    (0..n).map(|i| if i + 1 == n { hi } else { lo + step * from_usize(i) }).collect()
}

/// Sampling interval `h`, number of Euler substeps per interval and seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingScheme<F> {
    pub h: F,
    pub substeps: usize,
    pub seed: u64,
}

impl<F: Scalar> SamplingScheme<F> {
    pub fn new(h: F, substeps: usize, seed: u64) -> Result<Self> {
        if !(h.is_finite() && h > F::zero()) {
            return Err(Error::validation(format!("sampling interval h must be positive, got {h}")));
        }
        if substeps == 0 {
            return Err(Error::validation("substeps m must be at least 1"));
        }
        Ok(Self { h, substeps, seed })
    }

    /// Euler substep `δ = h / m`.
    pub fn delta(&self) -> F {
        self.h / from_usize(self.substeps)
    }

    /// Discount factor of the sampled chain, `e^{-βh}`.
    pub fn beta_h(&self, beta: F) -> F {
        (-beta * self.h).exp()
    }
}

/// One clamped Euler–Maruyama step driven by the standard normal draw `z`.
pub fn step_euler<F: Scalar>(model: &DiffusionModel<F>, x: F, u: F, delta: F, z: F) -> Result<F> {
    if !(delta > F::zero()) {
        return Err(Error::validation(format!("Euler step must be positive, got {delta}")));
    }
    let next = x + model.drift(x, u) * delta + model.diffusion(x, u) * delta.sqrt() * z;
    if !next.is_finite() {
        return Err(Error::ModelEvaluation { x: x.to_f64_lossy(), u: u.to_f64_lossy() });
    }
    Ok(model.domain.clamp(next))
}

/// Simulates `X(h)` from `X(0) = x` with the action frozen at `u`.
pub fn sample_transition<F: Scalar, R: Rng + ?Sized>(
    model: &DiffusionModel<F>,
    x: F,
    u: F,
    scheme: &SamplingScheme<F>,
    rng: &mut R,
) -> Result<F> {
    if !model.domain.contains(x) {
        return Err(Error::validation(format!("state {x} lies outside the model domain")));
    }
    let delta = scheme.delta();
    let mut state = x;
    for _ in 0..scheme.substeps {
        state = step_euler(model, state, u, delta, F::standard_normal(rng))?;
    }
    Ok(state)
}

/// Draws from the exact Gaussian transition law of the OU family. The result
/// is not clamped to any domain.
pub fn sample_transition_exact_ou<F: Scalar, R: Rng + ?Sized>(
    params: &OuParams<F>,
    x: F,
    u: F,
    h: F,
    rng: &mut R,
) -> Result<F> {
    let params = OuParams::new(params.theta, params.sigma0, params.cost_weight_r)?;
    if !(h > F::zero()) {
        return Err(Error::validation(format!("sampling interval h must be positive, got {h}")));
    }
    let (mean, var) = params.transition_moments(x, u, h);
    Ok(mean + var.sqrt() * F::standard_normal(rng))
}

/// Source of piecewise-constant actions: called once per sampling instant
/// with the step index and the current sampled state.
pub trait Control<F> {
    fn action(&self, step: usize, x: F) -> F;
}

impl<F, T> Control<F> for T
where
    T: Fn(usize, F) -> F,
{
    fn action(&self, step: usize, x: F) -> F {
        self(step, x)
    }
}

/// A simulated path observed at the sampling instants.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<F> {
    /// `X(k h)` for `k = 0..=K`.
    pub sample_states: Vec<F>,
    /// Action held on `[k h, (k+1) h)`.
    pub applied_actions: Vec<F>,
    /// `c(X(s), u(s))` at the left end of every Euler substep (`K · m` values).
    pub stage_costs: Vec<F>,
    pub horizon: usize,
    pub substeps: usize,
}

pub fn rollout<F: Scalar, C: Control<F> + ?Sized, R: Rng + ?Sized>(
    model: &DiffusionModel<F>,
    control: &C,
    x0: F,
    scheme: &SamplingScheme<F>,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory<F>> {
    if horizon == 0 {
        return Err(Error::validation("rollout horizon must be at least 1"));
    }
    if !model.domain.contains(x0) {
        return Err(Error::validation(format!("initial state {x0} lies outside the model domain")));
    }
    let m = scheme.substeps;
    let delta = scheme.delta();
    let mut traj = Trajectory {
        sample_states: Vec::with_capacity(horizon + 1),
        applied_actions: Vec::with_capacity(horizon),
        stage_costs: Vec::with_capacity(horizon * m),
        horizon,
        substeps: m,
    };
    let mut x = x0;
    traj.sample_states.push(x);
    for k in 0..horizon {
        let u = control.action(k, x);
        traj.applied_actions.push(u);
        for _ in 0..m {
            traj.stage_costs.push(model.cost(x, u));
            x = step_euler(model, x, u, delta, F::standard_normal(rng))?;
        }
        traj.sample_states.push(x);
    }
    Ok(traj)
}

/// Left-endpoint quadrature of `∫ e^{-βs} c(X(s), u(s)) ds` over `[0, K h]`
/// along one simulated path.
pub fn discounted_path_cost<F: Scalar, C: Control<F> + ?Sized, R: Rng + ?Sized>(
    model: &DiffusionModel<F>,
    control: &C,
    x0: F,
    scheme: &SamplingScheme<F>,
    horizon: usize,
    rng: &mut R,
) -> Result<F> {
    let delta = scheme.delta();
    let step_discount = (-model.discount_beta * delta).exp();
    let mut discount = F::one();
    let mut total = F::zero();
    let mut x = x0;
    for k in 0..horizon {
        let u = control.action(k, x);
        for _ in 0..scheme.substeps {
            total = total + discount * model.cost(x, u) * delta;
            discount = discount * step_discount;
            x = step_euler(model, x, u, delta, F::standard_normal(rng))?;
        }
    }
    Ok(total)
}

/// Monte Carlo estimate of a discounted cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate<F> {
    pub estimate: F,
    pub std_error: F,
    /// `C e^{-β K h} / β`, the most the truncated tail can contribute.
    pub tail_bound: F,
    pub n_rollouts: usize,
    pub horizon: usize,
    pub horizon_too_short: bool,
}

/// Per-rollout discounted costs; rollout `r` uses substream `r` of
/// `scheme.seed`, and results come back in rollout order.
pub fn rollout_costs<F: Scalar, C: Control<F> + Sync + ?Sized>(
    model: &DiffusionModel<F>,
    control: &C,
    x0: F,
    scheme: &SamplingScheme<F>,
    n_rollouts: usize,
    horizon: usize,
) -> Result<Vec<F>> {
    if n_rollouts == 0 {
        return Err(Error::validation("n_rollouts must be at least 1"));
    }
    if horizon == 0 {
        return Err(Error::validation("rollout horizon must be at least 1"));
    }
    if !model.domain.contains(x0) {
        return Err(Error::validation(format!("initial state {x0} lies outside the model domain")));
    }
    (0..n_rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::substream(scheme.seed, r as u64);
            discounted_path_cost(model, control, x0, scheme, horizon, &mut rng)
        })
        .collect()
}

/// `C e^{-β K h} / β`.
pub fn tail_bound<F: Scalar>(model: &DiffusionModel<F>, h: F, horizon: usize) -> F {
    let beta = model.discount_beta;
    model.cost_bound_c * (-beta * h * from_usize(horizon)).exp() / beta
}

/// Smallest horizon `K` with `C e^{-β K h} / β ≤ tol`.
pub fn default_horizon<F: Scalar>(model: &DiffusionModel<F>, h: F, tol: F) -> usize {
    let beta = model.discount_beta;
    let c = model.cost_bound_c;
    if c <= F::zero() {
        return 1;
    }
    let k = ((c / (beta * tol)).ln() / (beta * h)).ceil();
    k.to_usize().unwrap_or(1).max(1)
}

pub fn summarize<F: Scalar>(samples: &[F]) -> (F, F) {
    if let Some(&first) = samples.first() {
        if samples.iter().all(|&v| v == first) {
            return (first, F::zero());
        }
    }
    let n = from_usize::<F>(samples.len());
    let mean = samples.iter().fold(F::zero(), |acc, &v| acc + v) / n;
    if samples.len() < 2 {
        return (mean, F::zero());
    }
    let ss = samples.iter().fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean));
    let var = ss / from_usize(samples.len() - 1);
    (mean, (var / n).sqrt())
}

/// Averages `n_rollouts` discounted path costs. The estimate excludes the
/// tail beyond `K h`; `horizon_too_short` is set when the tail bound exceeds
/// `tolerance`.
pub fn discounted_cost_estimate<F: Scalar, C: Control<F> + Sync + ?Sized>(
    model: &DiffusionModel<F>,
    control: &C,
    x0: F,
    scheme: &SamplingScheme<F>,
    n_rollouts: usize,
    horizon: usize,
    tolerance: Option<F>,
) -> Result<CostEstimate<F>> {
    let costs = rollout_costs(model, control, x0, scheme, n_rollouts, horizon)?;
    let (estimate, std_error) = summarize(&costs);
    let tail = tail_bound(model, scheme.h, horizon);
    let horizon_too_short = tolerance.is_some_and(|tol| tail > tol);
    if horizon_too_short {
        log::warn!("discounted cost horizon {horizon} leaves a tail bound of {tail:e}");
    }
    Ok(CostEstimate { estimate, std_error, tail_bound: tail, n_rollouts, horizon, horizon_too_short })
}
