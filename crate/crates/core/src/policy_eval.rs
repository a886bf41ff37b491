//! Measured counterparts of the bounded quantities: discounted costs of
//! learned controls, the performance gap against a refined reference, and
//! empirical Wasserstein-Lipschitz constants of the sampled kernel.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx_mdp::{estimate_finite_mdp, greedy_policy, q_value_iteration, QMatrix};
use crate::bounds::{lipschitz_action_factor, lipschitz_state_factor, BoundReport};
use crate::diffusion::{discounted_cost_estimate, sample_transition, summarize, CostEstimate, DiffusionModel, SamplingScheme};
use crate::discretize::{ActionGrid, StateGrid};
use crate::io::fmt_float;
use crate::rng;
use crate::scalar::{from_usize, lit, Scalar};
use crate::{Error, Result};

/// Discounted cost of `u_h(t) = γ(φ_X(X(k h)))` started at `x0`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_learned_control<F: Scalar>(
    model: &DiffusionModel<F>,
    states: &StateGrid<F>,
    actions: &ActionGrid<F>,
    policy: &[usize],
    x0: F,
    scheme: &SamplingScheme<F>,
    n_rollouts: usize,
    horizon: usize,
) -> Result<CostEstimate<F>> {
    if policy.len() != states.len() {
        return Err(Error::validation(format!("policy covers {} states, grid has {}", policy.len(), states.len())));
    }
    if let Some(&a) = policy.iter().find(|&&a| a >= actions.len()) {
        return Err(Error::validation(format!("policy action index {a} out of range for {} actions", actions.len())));
    }
    let control = |_: usize, x: F| actions.action(policy[states.quantize(x)]);
    discounted_cost_estimate(model, &control, x0, scheme, n_rollouts, horizon, None)
}

/// Settings of the refined pipeline used as a stand-in for the optimal cost.
#[derive(Clone, Debug)]
pub struct ReferenceSetup<F: Scalar> {
    /// Sampling used to estimate the fine finite MDP.
    pub scheme: SamplingScheme<F>,
    /// Sampling used to evaluate the resulting control. Its `h` must equal
    /// `scheme.h`; its substep and seed may differ.
    pub eval_scheme: SamplingScheme<F>,
    pub states: StateGrid<F>,
    pub actions: ActionGrid<F>,
    pub n_samples_per_pair: usize,
    pub n_rollouts: usize,
    pub horizon: usize,
    pub vi_tolerance: F,
    /// Cap on `|X| |U| n_samples_per_pair`.
    pub max_transitions: u64,
}

#[derive(Clone, Debug)]
pub struct ReferenceOutcome<F> {
    pub estimate: CostEstimate<F>,
    pub q: QMatrix<F>,
    pub policy: Vec<usize>,
}

/// Estimates the fine finite MDP, solves it, and evaluates its greedy control
/// on the diffusion.
pub fn estimate_reference_optimum<F: Scalar>(model: &DiffusionModel<F>, x0: F, setup: &ReferenceSetup<F>) -> Result<ReferenceOutcome<F>> {
    if setup.eval_scheme.h != setup.scheme.h {
        return Err(Error::validation("reference evaluation must use the same sampling interval as the reference MDP"));
    }
    let pairs = (setup.states.len() * setup.actions.len()) as u64;
    let work = pairs.saturating_mul(setup.n_samples_per_pair as u64);
    if work > setup.max_transitions {
        return Err(Error::validation(format!(
            "reference needs {work} simulated transitions, above the budget of {}",
            setup.max_transitions
        )));
    }
    let est = estimate_finite_mdp(model, &setup.states, &setup.actions, &setup.scheme, setup.n_samples_per_pair)?;
    let q = q_value_iteration(&est.mdp, setup.vi_tolerance, 1_000_000)?;
    let policy = greedy_policy(&q);
    let estimate = evaluate_learned_control(
        model,
        &setup.states,
        &setup.actions,
        &policy,
        x0,
        &setup.eval_scheme,
        setup.n_rollouts,
        setup.horizon,
    )?;
    Ok(ReferenceOutcome { estimate, q, policy })
}

/// Run parameters echoed into a [`GapReport`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GapEcho<F> {
    pub h: F,
    pub substeps: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub x0: F,
    pub learn_seed: u64,
    pub eval_seed: u64,
    pub reference_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport<F> {
    pub w_learned: F,
    pub se_learned: F,
    pub w_reference: F,
    pub se_reference: F,
    pub gap: F,
    /// `sqrt(se_learned² + se_reference²)`.
    pub gap_se: F,
    /// May be `+∞` when the bound's hypotheses fail.
    pub bound_total: F,
    /// `gap - 4 gap_se > bound_total`.
    pub violation: bool,
    pub echo: GapEcho<F>,
}

pub const GAP_CSV_HEADER: &str =
    "w_learned,se_learned,w_reference,se_reference,gap,gap_se,bound_total,violation,h,substeps,n_states,n_actions,x0,learn_seed,eval_seed,reference_seed";

impl<F: Scalar> GapReport<F> {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{GAP_CSV_HEADER}")?;
        let e = &self.echo;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            fmt_float(self.w_learned),
            fmt_float(self.se_learned),
            fmt_float(self.w_reference),
            fmt_float(self.se_reference),
            fmt_float(self.gap),
            fmt_float(self.gap_se),
            fmt_float(self.bound_total),
            self.violation,
            fmt_float(e.h),
            e.substeps,
            e.n_states,
            e.n_actions,
            fmt_float(e.x0),
            e.learn_seed,
            e.eval_seed,
            e.reference_seed
        )?;
        Ok(())
    }
}

pub fn compute_gap<F: Scalar>(learned: &CostEstimate<F>, reference: &CostEstimate<F>, bound: &BoundReport<F>, echo: GapEcho<F>) -> GapReport<F> {
    let gap = learned.estimate - reference.estimate;
    let gap_se = (learned.std_error * learned.std_error + reference.std_error * reference.std_error).sqrt();
    GapReport {
        w_learned: learned.estimate,
        se_learned: learned.std_error,
        w_reference: reference.estimate,
        se_reference: reference.std_error,
        gap,
        gap_se,
        bound_total: bound.total,
        violation: gap - lit::<F>(4.0) * gap_se > bound.total,
        echo,
    }
}

fn sorted<F: Scalar>(v: &[F]) -> Result<Vec<F>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("NaN sample in Wasserstein estimate".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    Ok(s)
}

fn order_gaps<F: Scalar>(a: &[F], b: &[F]) -> Result<Vec<F>> {
    if a.len() != b.len() {
        return Err(Error::validation(format!("W1 samples must have equal sizes, got {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::validation("W1 samples must be nonempty"));
    }
    let (a, b) = (sorted(a)?, sorted(b)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (*x - *y).abs()).collect())
}

/// One-dimensional `W₁` between two equal-size empirical measures: mean gap
/// between matching order statistics.
pub fn empirical_w1<F: Scalar>(samples_a: &[F], samples_b: &[F]) -> Result<F> {
    let gaps = order_gaps(samples_a, samples_b)?;
    Ok(gaps.iter().fold(F::zero(), |acc, &g| acc + g) / from_usize(gaps.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    State,
    Action,
}

/// One kernel Lipschitz check. State rows compare `(x, u)` with `(y, u)`,
/// action rows compare `(x, u)` with `(x, û)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzRow<F> {
    pub kind: PairKind,
    pub x: F,
    pub y: F,
    pub u: F,
    pub u_hat: F,
    pub h: F,
    pub empirical_w1: F,
    pub bound: F,
    pub slack: F,
    pub pass: bool,
}

pub const LIPSCHITZ_CSV_HEADER: &str = "kind,x,y,u,u_hat,h,empirical_w1,bound,slack,pass";

pub fn write_lipschitz_csv<F: Scalar, W: Write>(rows: &[LipschitzRow<F>], mut out: W) -> Result<()> {
    writeln!(out, "{LIPSCHITZ_CSV_HEADER}")?;
    for r in rows {
        let kind = match r.kind {
            PairKind::State => "state",
            PairKind::Action => "action",
        };
        writeln!(
            out,
            "{kind},{},{},{},{},{},{},{},{},{}",
            fmt_float(r.x),
            fmt_float(r.y),
            fmt_float(r.u),
            fmt_float(r.u_hat),
            fmt_float(r.h),
            fmt_float(r.empirical_w1),
            fmt_float(r.bound),
            fmt_float(r.slack),
            r.pass
        )?;
    }
    Ok(())
}

/// Draws `n` coupled pairs `(X_h | x, u)`, `(X_h | y, û)`: both transitions of
/// sample `s` consume the same random numbers.
fn coupled_transitions<F: Scalar>(
    model: &DiffusionModel<F>,
    scheme: &SamplingScheme<F>,
    (x, u): (F, F),
    (y, u_hat): (F, F),
    n: usize,
    stream: u64,
) -> Result<(Vec<F>, Vec<F>)> {
    let mut rng = rng::substream(scheme.seed, stream);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for _ in 0..n {
        let mut twin = rng.clone();
        a.push(sample_transition(model, x, u, scheme, &mut twin)?);
        b.push(sample_transition(model, y, u_hat, scheme, &mut rng)?);
    }
    Ok((a, b))
}

/// Empirical check of the kernel's Wasserstein-Lipschitz constants.
///
/// `state_pairs` holds `(x, y, u)`, `action_pairs` holds `(x, u, û)`. Each
/// pair runs on its own random substream of `scheme.seed`, state pairs first.
/// A row passes when the estimate is at most the bound plus
/// `4 / √n` times the sample standard deviation of the coupled gaps.
pub fn check_kernel_lipschitz<F: Scalar>(
    model: &DiffusionModel<F>,
    scheme: &SamplingScheme<F>,
    state_pairs: &[(F, F, F)],
    action_pairs: &[(F, F, F)],
    n_samples: usize,
) -> Result<Vec<LipschitzRow<F>>> {
    if n_samples < 2 {
        return Err(Error::validation("Lipschitz check needs at least 2 samples per pair"));
    }
    let k = model.lipschitz_k;
    let h = scheme.h;
    let state_factor = lipschitz_state_factor(k, h)?;
    let action_factor = if action_pairs.is_empty() { F::zero() } else { lipschitz_action_factor(k, h)? };

    let jobs: Vec<(PairKind, F, F, F, F)> = state_pairs
        .iter()
        .map(|&(x, y, u)| (PairKind::State, x, y, u, u))
        .chain(action_pairs.iter().map(|&(x, u, uh)| (PairKind::Action, x, x, u, uh)))
        .collect();

    jobs.into_par_iter()
        .enumerate()
        .map(|(idx, (kind, x, y, u, u_hat))| {
            let (a, b) = coupled_transitions(model, scheme, (x, u), (y, u_hat), n_samples, idx as u64)?;
            let gaps = order_gaps(&a, &b)?;
            let (w1, se) = summarize(&gaps);
            let slack = lit::<F>(4.0) * se;
            let bound = match kind {
                PairKind::State => (x - y).abs() * state_factor,
                PairKind::Action => (u - u_hat).abs() * action_factor,
            };
            Ok(LipschitzRow { kind, x, y, u, u_hat, h, empirical_w1: w1, bound, slack, pass: w1 <= bound + slack })
        })
        .collect()
}
