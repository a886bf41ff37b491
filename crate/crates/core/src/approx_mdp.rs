//! The aggregated finite MDP and its exact solution.
//!
//! For every bin `B_i` and action `a`, the kernel row `P(· | i, a)` and cost
//! `C(i, a)` average the sampled dynamics over the weighting measure
//! restricted to `B_i`. The weighting measure here is Lebesgue-uniform inside
//! each bin, and the averages are estimated by Monte Carlo.

use std::collections::VecDeque;
use std::io::{BufRead, Read, Write};

use rayon::prelude::*;

use crate::diffusion::{sample_transition, DiffusionModel, SamplingScheme};
use crate::discretize::{ActionGrid, StateGrid};
use crate::io::{self, fmt_float, parse_float, parse_index, read_csv_rows};
use crate::scalar::{from_usize, lit, Scalar};
use crate::{rng, Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;
const MAGIC: &[u8; 8] = b"CDMDP001";

/// Finite MDP with a sparse kernel stored row-wise; row `i * N + a` holds
/// `P(· | i, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMdp<F> {
    n_states: usize,
    n_actions: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    probs: Vec<F>,
    cost: Vec<F>,
    pub beta_h: F,
    /// Monte Carlo draws per state-action pair (0 for hand-built models).
    pub n_samples: usize,
}

impl<F: Scalar> FiniteMdp<F> {
    /// Builds from sparse rows `(next state, probability)`; zero entries are
    /// dropped.
    pub fn from_rows(
        n_states: usize,
        n_actions: usize,
        rows: Vec<Vec<(usize, F)>>,
        cost: Vec<F>,
        beta_h: F,
        n_samples: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::validation("a finite MDP needs at least one state and one action"));
        }
        if n_states > u32::MAX as usize {
            return Err(Error::validation("too many states"));
        }
        let pairs = n_states * n_actions;
        if rows.len() != pairs || cost.len() != pairs {
            return Err(Error::validation(format!(
                "expected {pairs} kernel rows and costs, got {} and {}",
                rows.len(),
                cost.len()
            )));
        }
        if !(beta_h >= F::zero() && beta_h < F::one()) {
            return Err(Error::validation(format!("discount beta_h must lie in [0, 1), got {beta_h}")));
        }
        if let Some(c) = cost.iter().find(|c| !c.is_finite()) {
            return Err(Error::validation(format!("non-finite cost entry {c}")));
        }
        let mut row_ptr = Vec::with_capacity(pairs + 1);
        let mut cols = Vec::new();
        let mut probs = Vec::new();
        row_ptr.push(0);
        for (r, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            let tol = ROW_SUM_TOL.max(4.0 * F::epsilon().to_f64_lossy() * (row.len() + 1) as f64);
            let mut sum = F::zero();
            for (j, p) in row {
                if j >= n_states {
                    return Err(Error::validation(format!("row {r} references state {j} of {n_states}")));
                }
                if !(p.is_finite() && p >= F::zero()) {
                    return Err(Error::validation(format!("row {r} has invalid probability {p}")));
                }
                if p == F::zero() {
                    continue;
                }
                if cols.len() > row_ptr[r] && *cols.last().unwrap() as usize == j {
                    return Err(Error::validation(format!("row {r} lists state {j} twice")));
                }
                sum = sum + p;
                cols.push(j as u32);
                probs.push(p);
            }
            if (sum - F::one()).abs().to_f64_lossy() > tol {
                return Err(Error::validation(format!("kernel row {r} sums to {sum}, not 1")));
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { n_states, n_actions, row_ptr, cols, probs, cost, beta_h, n_samples })
    }

    /// Builds from a dense kernel indexed `[(i * N + a) * M + j]`.
    pub fn from_dense(n_states: usize, n_actions: usize, kernel: &[F], cost: Vec<F>, beta_h: F) -> Result<Self> {
        if kernel.len() != n_states * n_actions * n_states {
            return Err(Error::validation("dense kernel has the wrong length"));
        }
        let rows = kernel
            .chunks(n_states.max(1))
            .map(|row| row.iter().copied().enumerate().filter(|&(_, p)| p != F::zero()).collect())
            .collect();
        Self::from_rows(n_states, n_actions, rows, cost, beta_h, 0)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn cost(&self, i: usize, a: usize) -> F {
        self.cost[i * self.n_actions + a]
    }

    pub fn costs(&self) -> &[F] {
        &self.cost
    }

    /// Nonzero entries of `P(· | i, a)` as parallel slices.
    #[inline]
    pub fn kernel_row(&self, i: usize, a: usize) -> (&[u32], &[F]) {
        let r = i * self.n_actions + a;
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.cols[span.clone()], &self.probs[span])
    }

    pub fn prob(&self, i: usize, a: usize, j: usize) -> F {
        let (cols, probs) = self.kernel_row(i, a);
        match cols.binary_search(&(j as u32)) {
            Ok(k) => probs[k],
            Err(_) => F::zero(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Draws the next state of row `(i, a)` from a uniform `[0, 1)` variate.
    #[inline]
    pub fn sample_next(&self, i: usize, a: usize, uniform: F) -> usize {
        let (cols, probs) = self.kernel_row(i, a);
        let mut acc = F::zero();
        for (&j, &p) in cols.iter().zip(probs) {
            acc = acc + p;
            if uniform < acc {
                return j as usize;
            }
        }
        *cols.last().expect("kernel rows are nonempty") as usize
    }

    /// States reachable from `start` when every action has positive
    /// probability.
    pub fn reachable_from(&self, start: usize) -> Vec<bool> {
        let mut seen = vec![false; self.n_states];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            for a in 0..self.n_actions {
                for &j in self.kernel_row(i, a).0 {
                    if !seen[j as usize] {
                        seen[j as usize] = true;
                        queue.push_back(j as usize);
                    }
                }
            }
        }
        seen
    }

    /// Returns a copy with a different cost table.
    pub fn with_costs(&self, cost: Vec<F>) -> Result<Self> {
        if cost.len() != self.cost.len() || cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::validation("replacement cost table has the wrong shape or non-finite entries"));
        }
        Ok(Self { cost, ..self.clone() })
    }

    /// Little-endian binary encoding; all reals stored as `f64`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        io::write_u32(&mut out, self.n_states as u32)?;
        io::write_u32(&mut out, self.n_actions as u32)?;
        io::write_f64(&mut out, self.beta_h.to_f64_lossy())?;
        io::write_u64(&mut out, self.n_samples as u64)?;
        for c in &self.cost {
            io::write_f64(&mut out, c.to_f64_lossy())?;
        }
        for &p in &self.row_ptr {
            io::write_u64(&mut out, p as u64)?;
        }
        for &j in &self.cols {
            io::write_u32(&mut out, j)?;
        }
        for p in &self.probs {
            io::write_f64(&mut out, p.to_f64_lossy())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a finite-MDP file".into()));
        }
        let n_states = io::read_u32(&mut input)? as usize;
        let n_actions = io::read_u32(&mut input)? as usize;
        let beta_h = lit(io::read_f64(&mut input)?);
        let n_samples = io::read_u64(&mut input)? as usize;
        let pairs = n_states * n_actions;
        let cost = (0..pairs).map(|_| io::read_f64(&mut input).map(lit)).collect::<Result<Vec<F>>>()?;
        let row_ptr = (0..=pairs).map(|_| io::read_u64(&mut input).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let nnz = *row_ptr.last().unwrap_or(&0);
        if row_ptr.first() != Some(&0) || row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Parse("corrupt row pointers".into()));
        }
        let cols = (0..nnz).map(|_| io::read_u32(&mut input)).collect::<Result<Vec<_>>>()?;
        let probs = (0..nnz).map(|_| io::read_f64(&mut input).map(lit)).collect::<Result<Vec<F>>>()?;
        let rows = (0..pairs)
            .map(|r| (row_ptr[r]..row_ptr[r + 1]).map(|k| (cols[k] as usize, probs[k])).collect())
            .collect();
        Self::from_rows(n_states, n_actions, rows, cost, beta_h, n_samples)
    }
}

/// Output of [`estimate_finite_mdp`].
#[derive(Clone, Debug)]
pub struct MdpEstimate<F> {
    pub mdp: FiniteMdp<F>,
    /// `(i, a, j)` where bin `j` lies between bins hit from `(i, a)` but was
    /// never hit itself. The sampled law has connected support, so these are
    /// undersampling artefacts.
    pub support_gaps: Vec<(usize, usize, usize)>,
}

/// Empirical frequencies of landing bins; independent of draw order.
pub(crate) fn tally_row<F: Scalar>(landings: impl IntoIterator<Item = usize>, n_states: usize) -> Vec<(usize, F)> {
    let mut counts = vec![0u64; n_states];
    let mut total = 0u64;
    for j in landings {
        counts[j] += 1;
        total += 1;
    }
    let n = F::from_u64(total).expect("count fits");
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(j, &c)| (j, F::from_u64(c).expect("count fits") / n))
        .collect()
}

/// Monte Carlo estimate of the aggregated cost and kernel. Pair `(i, a)` uses
/// random substream `i * N + a` of `scheme.seed`.
pub fn estimate_finite_mdp<F: Scalar>(
    model: &DiffusionModel<F>,
    states: &StateGrid<F>,
    actions: &ActionGrid<F>,
    scheme: &SamplingScheme<F>,
    n_samples: usize,
) -> Result<MdpEstimate<F>> {
    if n_samples == 0 {
        return Err(Error::validation("n_samples_per_pair must be at least 1"));
    }
    let (m, n) = (states.len(), actions.len());
    let h = scheme.h;
    let results: Vec<(F, Vec<(usize, F)>)> = (0..m * n)
        .into_par_iter()
        .map(|pair| {
            let (i, a) = (pair / n, pair % n);
            let u = actions.action(a);
            let (left, right) = states.bin(i);
            let mut rng = rng::substream(scheme.seed, pair as u64);
            let mut cost_sum = F::zero();
            let mut landings = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let x = left + F::unit_uniform(&mut rng) * (right - left);
                cost_sum = cost_sum + model.cost(x, u);
                let y = sample_transition(model, x, u, scheme, &mut rng)?;
                landings.push(states.quantize(y));
            }
            Ok((cost_sum / from_usize(n_samples) * h, tally_row(landings, m)))
        })
        .collect::<Result<_>>()?;

    let mut support_gaps = Vec::new();
    let mut cost = Vec::with_capacity(m * n);
    let mut rows = Vec::with_capacity(m * n);
    for (pair, (c, row)) in results.into_iter().enumerate() {
        if let (Some(&(first, _)), Some(&(last, _))) = (row.first(), row.last()) {
            if last + 1 - first > row.len() {
                let hit: Vec<usize> = row.iter().map(|&(j, _)| j).collect();
                support_gaps.extend((first..=last).filter(|j| hit.binary_search(j).is_err()).map(|j| (pair / n, pair % n, j)));
            }
        }
        cost.push(c);
        rows.push(row);
    }
    if !support_gaps.is_empty() {
        log::warn!("{} kernel entries inside the sampled support were never hit", support_gaps.len());
    }
    let beta_h = scheme.beta_h(model.discount_beta);
    let mdp = FiniteMdp::from_rows(m, n, rows, cost, beta_h, n_samples)?;
    Ok(MdpEstimate { mdp, support_gaps })
}

/// State-action values over `M × N`, row-major by state.
#[derive(Clone, Debug, PartialEq)]
pub struct QMatrix<F> {
    n_states: usize,
    n_actions: usize,
    values: Vec<F>,
}

impl<F: Scalar> QMatrix<F> {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<F>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || values.len() != n_states * n_actions {
            return Err(Error::validation(format!(
                "Q matrix shape {n_states} x {n_actions} does not match {} values",
                values.len()
            )));
        }
        Ok(Self { n_states, n_actions, values })
    }

    pub fn filled(n_states: usize, n_actions: usize, value: F) -> Self {
        Self { n_states, n_actions, values: vec![value; n_states * n_actions] }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, a: usize) -> F {
        self.values[i * self.n_actions + a]
    }

    pub fn set(&mut self, i: usize, a: usize, v: F) {
        self.values[i * self.n_actions + a] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        &self.values[i * self.n_actions..(i + 1) * self.n_actions]
    }

    #[inline]
    pub fn row_min(&self, i: usize) -> F {
        self.row(i).iter().copied().fold(F::infinity(), F::min)
    }

    /// `max |self - other|`.
    pub fn sup_distance(&self, other: &QMatrix<F>) -> Result<F> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::validation("Q matrices have different shapes"));
        }
        Ok(self.values.iter().zip(&other.values).fold(F::zero(), |acc, (a, b)| acc.max((*a - *b).abs())))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "state,action,value")?;
        for i in 0..self.n_states {
            for a in 0..self.n_actions {
                writeln!(out, "{i},{a},{}", fmt_float(self.get(i, a)))?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let rows = read_csv_rows(input, "state,action,value")?;
        let entries = rows
            .iter()
            .map(|r| Ok((parse_index(&r[0])?, parse_index(&r[1])?, parse_float::<F>(&r[2])?)))
            .collect::<Result<Vec<_>>>()?;
        assemble_dense(&entries).map(|(m, n, values)| Self { n_states: m, n_actions: n, values })
    }
}

/// Rebuilds a dense `M × N` table from `(i, a, value)` triples that must cover
/// every cell exactly once.
pub(crate) fn assemble_dense<F: Scalar>(entries: &[(usize, usize, F)]) -> Result<(usize, usize, Vec<F>)> {
    let m = entries.iter().map(|e| e.0 + 1).max().ok_or_else(|| Error::Parse("no table rows".into()))?;
    let n = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
    if entries.len() != m * n {
        return Err(Error::Parse(format!("expected {} table rows, found {}", m * n, entries.len())));
    }
    let mut values = vec![F::nan(); m * n];
    let mut seen = vec![false; m * n];
    for &(i, a, v) in entries {
        let k = i * n + a;
        if seen[k] {
            return Err(Error::Parse(format!("duplicate table entry ({i}, {a})")));
        }
        seen[k] = true;
        values[k] = v;
    }
    Ok((m, n, values))
}

/// `Q ← C + β_h P min_b Q(·, b)` applied to every pair at once (a Jacobi
/// sweep: all rows read the previous iterate).
fn bellman_sweep<F: Scalar>(mdp: &FiniteMdp<F>, q: &QMatrix<F>, out: &mut [F]) {
    let v: Vec<F> = (0..mdp.n_states).map(|j| q.row_min(j)).collect();
    let beta = mdp.beta_h;
    out.par_iter_mut().with_min_len(256).enumerate().for_each(|(r, slot)| {
        let span = mdp.row_ptr[r]..mdp.row_ptr[r + 1];
        let ev = mdp.cols[span.clone()]
            .iter()
            .zip(&mdp.probs[span])
            .fold(F::zero(), |acc, (&j, &p)| acc + p * v[j as usize]);
        *slot = mdp.cost[r] + beta * ev;
    });
}

/// Value iteration output together with the sup-norm change of every sweep.
#[derive(Clone, Debug)]
pub struct ValueIteration<F> {
    pub q: QMatrix<F>,
    pub sup_changes: Vec<F>,
}

/// Value iteration from `Q ≡ 0`, stopped once a sweep changes Q by at most
/// `tol (1 - β_h) / (2 β_h)`, which puts the result within `tol` of the fixed
/// point.
pub fn q_value_iteration_traced<F: Scalar>(mdp: &FiniteMdp<F>, tol: F, max_iter: usize) -> Result<ValueIteration<F>> {
    if !(tol > F::zero()) {
        return Err(Error::validation(format!("value iteration tolerance must be positive, got {tol}")));
    }
    let beta = mdp.beta_h;
    let threshold = if beta == F::zero() {
        F::infinity()
    } else {
        tol * (F::one() - beta) / (lit::<F>(2.0) * beta)
    };
    let mut q = QMatrix::filled(mdp.n_states, mdp.n_actions, F::zero());
    let mut next = vec![F::zero(); q.values.len()];
    let mut sup_changes = Vec::new();
    for _ in 0..max_iter {
        bellman_sweep(mdp, &q, &mut next);
        let change = q.values.iter().zip(&next).fold(F::zero(), |acc, (a, b)| acc.max((*a - *b).abs()));
        std::mem::swap(&mut q.values, &mut next);
        sup_changes.push(change);
        if !change.is_finite() {
            return Err(Error::NonFinite("value iteration diverged".into()));
        }
        if change <= threshold {
            return Ok(ValueIteration { q, sup_changes });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        last_change: sup_changes.last().map_or(f64::NAN, |c| c.to_f64_lossy()),
    })
}

pub fn q_value_iteration<F: Scalar>(mdp: &FiniteMdp<F>, tol: F, max_iter: usize) -> Result<QMatrix<F>> {
    q_value_iteration_traced(mdp, tol, max_iter).map(|vi| vi.q)
}

/// Per-state argmin over actions, ties to the lower action index.
pub fn greedy_policy<F: Scalar>(q: &QMatrix<F>) -> Vec<usize> {
    (0..q.n_states)
        .map(|i| {
            q.row(i)
                .iter()
                .enumerate()
                .fold((0, F::infinity()), |(best, bv), (a, &v)| if v < bv { (a, v) } else { (best, bv) })
                .0
        })
        .collect()
}

/// `sup_{i,a} |Q(i,a) - C(i,a) - β_h Σ_j P(j|i,a) min_b Q(j,b)|`.
pub fn bellman_residual<F: Scalar>(mdp: &FiniteMdp<F>, q: &QMatrix<F>) -> Result<F> {
    if q.n_states != mdp.n_states || q.n_actions != mdp.n_actions {
        return Err(Error::validation("Q matrix shape does not match the MDP"));
    }
    let mut next = vec![F::zero(); q.values.len()];
    bellman_sweep(mdp, q, &mut next);
    Ok(q.values.iter().zip(&next).fold(F::zero(), |acc, (a, b)| acc.max((*a - *b).abs())))
}

/// Discounted cost of a stationary policy: solves `(I - β_h P_γ) J = C_γ`.
pub fn evaluate_mdp_policy<F: Scalar>(mdp: &FiniteMdp<F>, policy: &[usize]) -> Result<Vec<F>> {
    let m = mdp.n_states;
    if policy.len() != m || policy.iter().any(|&a| a >= mdp.n_actions) {
        return Err(Error::validation("policy must assign a valid action to every state"));
    }
    let mut a = vec![F::zero(); m * m];
    let mut rhs = vec![F::zero(); m];
    for i in 0..m {
        a[i * m + i] = F::one();
        let (cols, probs) = mdp.kernel_row(i, policy[i]);
        for (&j, &p) in cols.iter().zip(probs) {
            a[i * m + j as usize] = a[i * m + j as usize] - mdp.beta_h * p;
        }
        rhs[i] = mdp.cost(i, policy[i]);
    }
    solve_dense(m, &mut a, &mut rhs)?;
    Ok(rhs)
}

/// Gaussian elimination with partial pivoting; the solution overwrites `b`.
fn solve_dense<F: Scalar>(m: usize, a: &mut [F], b: &mut [F]) -> Result<()> {
    let eps = lit::<F>(1e-300).max(F::min_positive_value());
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&r, &s| a[r * m + col].abs().partial_cmp(&a[s * m + col].abs()).unwrap_or(std::cmp::Ordering::Equal))
            .expect("nonempty range");
        if !(a[pivot * m + col].abs() > eps) {
            return Err(Error::Singular(col));
        }
        if pivot != col {
            for k in 0..m {
                a.swap(col * m + k, pivot * m + k);
            }
            b.swap(col, pivot);
        }
        let d = a[col * m + col];
        for r in col + 1..m {
            let f = a[r * m + col] / d;
            if f == F::zero() {
                continue;
            }
            for k in col..m {
                a[r * m + k] = a[r * m + k] - f * a[col * m + k];
            }
            b[r] = b[r] - f * b[col];
        }
    }
    for col in (0..m).rev() {
        let s = (col + 1..m).fold(b[col], |acc, k| acc - a[col * m + k] * b[k]);
        b[col] = s / a[col * m + col];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{Interval, OuParams};
    use crate::discretize::{build_action_grid, build_uniform_state_grid};

    /// Two states, two actions, fixed kernel and costs.
    pub(crate) fn two_state() -> FiniteMdp<f64> {
        let kernel = [
            0.9, 0.1, // (0, 0)
            0.2, 0.8, // (0, 1)
            0.5, 0.5, // (1, 0)
            0.3, 0.7, // (1, 1)
        ];
        FiniteMdp::from_dense(2, 2, &kernel, vec![1.0, 2.0, 0.5, 3.0], 0.9).unwrap()
    }

    /// Brute force: many plain Bellman sweeps written out longhand.
    fn brute_force_fixed_point(mdp: &FiniteMdp<f64>, sweeps: usize) -> Vec<f64> {
        let (m, n) = (mdp.n_states(), mdp.n_actions());
        let mut q = vec![0.0; m * n];
        for _ in 0..sweeps {
            let v: Vec<f64> = (0..m).map(|j| (0..n).map(|b| q[j * n + b]).fold(f64::INFINITY, f64::min)).collect();
            let mut next = vec![0.0; m * n];
            for i in 0..m {
                for a in 0..n {
                    next[i * n + a] = mdp.cost(i, a) + mdp.beta_h * (0..m).map(|j| mdp.prob(i, a, j) * v[j]).sum::<f64>();
                }
            }
            if next == q {
                break;
            }
            q = next;
        }
        q
    }

    #[test]
    fn validation() {
        assert!(FiniteMdp::from_dense(1, 1, &[0.5], vec![1.0], 0.5).is_err());
        assert!(FiniteMdp::from_dense(1, 1, &[1.0], vec![1.0], 1.0).is_err());
        assert!(FiniteMdp::from_dense(2, 1, &[1.5, -0.5, 0.0, 1.0], vec![1.0, 1.0], 0.5).is_err());
        assert!(FiniteMdp::from_dense(1, 1, &[1.0], vec![f64::NAN], 0.5).is_err());
    }

    #[test]
    fn single_state_fixed_point() {
        let mdp = FiniteMdp::<f64>::from_dense(1, 1, &[1.0], vec![1.0], 0.5).unwrap();
        let q = q_value_iteration(&mdp, 1e-12, 1000).unwrap();
        assert!((q.get(0, 0) - 2.0).abs() < 1e-12);
        assert_eq!(evaluate_mdp_policy(&mdp, &[0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn zero_cost_fixed_point() {
        let mdp = two_state().with_costs(vec![0.0; 4]).unwrap();
        let q = q_value_iteration(&mdp, 1e-9, 10).unwrap();
        assert!(q.values().iter().all(|&v| v == 0.0));
        assert_eq!(evaluate_mdp_policy(&mdp, &[1, 0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn two_state_matches_brute_force() {
        let mdp = two_state();
        let tol = 1e-10;
        let q = q_value_iteration(&mdp, tol, 10_000).unwrap();
        let brute = brute_force_fixed_point(&mdp, 1_000_000);
        for (a, b) in q.values().iter().zip(&brute) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn contraction_per_sweep() {
        let mdp = two_state();
        let vi = q_value_iteration_traced(&mdp, 1e-12, 10_000).unwrap();
        for w in vi.sup_changes.windows(2) {
            assert!(w[1] <= mdp.beta_h * w[0] + 1e-13, "{w:?}");
        }
    }

    #[test]
    fn stopping_rule_guarantees_tolerance() {
        let mdp = two_state();
        for tol in [1e-2, 1e-4, 1e-6] {
            let q = q_value_iteration(&mdp, tol, 10_000).unwrap();
            let exact = q_value_iteration(&mdp, 1e-13, 100_000).unwrap();
            assert!(q.sup_distance(&exact).unwrap() <= tol);
            assert!(bellman_residual(&mdp, &q).unwrap() <= 2.0 * tol);
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let err = q_value_iteration(&two_state(), 1e-12, 3).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 3, .. }));
    }

    #[test]
    fn raising_a_cost_never_lowers_q() {
        let mdp = two_state();
        let base = q_value_iteration(&mdp, 1e-12, 100_000).unwrap();
        for k in 0..4 {
            let mut cost = mdp.costs().to_vec();
            cost[k] += 0.7;
            let raised = q_value_iteration(&mdp.with_costs(cost).unwrap(), 1e-12, 100_000).unwrap();
            for (a, b) in raised.values().iter().zip(base.values()) {
                assert!(*a >= *b - 1e-10);
            }
        }
    }

    #[test]
    fn greedy_policy_examples() {
        let q = QMatrix::new(3, 3, vec![1.0, 1.0, 1.0, 3.0, 1.0, 2.0, 0.0, -1.0, -1.0]).unwrap();
        assert_eq!(greedy_policy(&q), vec![0, 1, 1]);
        let shifted = QMatrix::new(3, 3, q.values().iter().map(|v| v + 5.0).collect()).unwrap();
        assert_eq!(greedy_policy(&shifted), greedy_policy(&q));
    }

    #[test]
    fn greedy_policy_is_optimal() {
        let mdp = two_state();
        let tol = 1e-9;
        let q = q_value_iteration(&mdp, tol, 100_000).unwrap();
        let j = evaluate_mdp_policy(&mdp, &greedy_policy(&q)).unwrap();
        for (i, ji) in j.iter().enumerate() {
            assert!((ji - q.row_min(i)).abs() <= 2.0 * tol);
        }
    }

    #[test]
    fn residual_examples() {
        let h = 0.1;
        let mdp = two_state().with_costs(vec![h; 4]).unwrap();
        let zero = QMatrix::filled(2, 2, 0.0);
        assert!((bellman_residual(&mdp, &zero).unwrap() - h).abs() < 1e-15);

        let base = two_state();
        let q = q_value_iteration(&base, 1e-12, 100_000).unwrap();
        let r0 = bellman_residual(&base, &q).unwrap();
        let eps = 1e-3;
        for k in 0..4 {
            let mut p = q.clone();
            p.set(k / 2, k % 2, q.get(k / 2, k % 2) + eps);
            let r1 = bellman_residual(&base, &p).unwrap();
            assert!((r1 - r0).abs() <= (1.0 + base.beta_h) * eps + 1e-12);
        }
    }

    #[test]
    fn policy_evaluation_matches_series() {
        let mdp = two_state();
        let policy = [1, 0];
        let j = evaluate_mdp_policy(&mdp, &policy).unwrap();
        // Σ_k β^k P^k C, truncated where the terms vanish in double precision.
        let p = [[mdp.prob(0, 1, 0), mdp.prob(0, 1, 1)], [mdp.prob(1, 0, 0), mdp.prob(1, 0, 1)]];
        let c = [mdp.cost(0, 1), mdp.cost(1, 0)];
        let mut term = c;
        let mut sum = [0.0; 2];
        for _ in 0..1_000_000 {
            sum[0] += term[0];
            sum[1] += term[1];
            let next = [
                mdp.beta_h * (p[0][0] * term[0] + p[0][1] * term[1]),
                mdp.beta_h * (p[1][0] * term[0] + p[1][1] * term[1]),
            ];
            if next[0].abs() + next[1].abs() < 1e-300 {
                break;
            }
            term = next;
        }
        assert!((j[0] - sum[0]).abs() < 1e-8 && (j[1] - sum[1]).abs() < 1e-8);
        assert!(evaluate_mdp_policy(&mdp, &[0, 2]).is_err());
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let mdp = two_state();
        let mut buf = Vec::new();
        mdp.write_binary(&mut buf).unwrap();
        let back = FiniteMdp::<f64>::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back, mdp);
        assert!(FiniteMdp::<f64>::read_binary(&buf[..10]).is_err());
    }

    #[test]
    fn qmatrix_csv_round_trip() {
        let q = QMatrix::<f64>::new(2, 3, vec![0.1, 1.0 / 3.0, 2.0, -0.0, 1e-300, 7.0]).unwrap();
        let mut buf = Vec::new();
        q.write_csv(&mut buf).unwrap();
        let back = QMatrix::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), q.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn tally_is_order_independent() {
        let draws = vec![3, 1, 1, 0, 3, 3, 2, 1];
        let mut shuffled = draws.clone();
        shuffled.reverse();
        shuffled.swap(0, 5);
        assert_eq!(tally_row::<f64>(draws, 4), tally_row::<f64>(shuffled, 4));
    }

    fn domain() -> (Interval<f64>, Interval<f64>) {
        (Interval::new(-2.0, 2.0).unwrap(), Interval::new(-1.0, 1.0).unwrap())
    }

    #[test]
    fn frozen_dynamics_give_identity_kernel() {
        let (d, a) = domain();
        let model = DiffusionModel::constant(0.0, 0.0, 1.0, d, a, 1.0).unwrap();
        let states = build_uniform_state_grid(-2.0, 2.0, 5).unwrap();
        let actions = build_action_grid(-1.0, 1.0, 3).unwrap();
        let scheme = SamplingScheme::new(0.2, 2, 4).unwrap();
        let est = estimate_finite_mdp(&model, &states, &actions, &scheme, 50).unwrap();
        for i in 0..5 {
            for a in 0..3 {
                assert_eq!(est.mdp.prob(i, a, i), 1.0);
                // c ≡ 1 gives cost h exactly.
                assert_eq!(est.mdp.cost(i, a), 0.2);
            }
        }
        assert!(est.support_gaps.is_empty());
    }

    #[test]
    fn estimated_mdp_invariants() {
        let (d, a) = domain();
        let model = DiffusionModel::ornstein_uhlenbeck(OuParams::new(1.0, 0.5, 0.2).unwrap(), d, a, 1.0).unwrap();
        let states = build_uniform_state_grid(-2.0, 2.0, 8).unwrap();
        let actions = build_action_grid(-1.0, 1.0, 3).unwrap();
        let scheme = SamplingScheme::new(0.2, 8, 4).unwrap();
        let est = estimate_finite_mdp(&model, &states, &actions, &scheme, 400).unwrap();
        let mdp = &est.mdp;
        assert!((mdp.beta_h - (-0.2f64).exp()).abs() < 1e-15);
        for i in 0..8 {
            for a in 0..3 {
                let (_, probs) = mdp.kernel_row(i, a);
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let c = mdp.cost(i, a);
                assert!(c >= 0.0 && c <= 0.2 * model.cost_bound_c);
            }
        }
        let q = q_value_iteration(mdp, 1e-8, 100_000).unwrap();
        let vmax = 0.2 * model.cost_bound_c / (1.0 - mdp.beta_h);
        assert!(q.values().iter().all(|&v| (0.0..=vmax).contains(&v)));

        // Deterministic given the seed, regardless of scheduling.
        let again = estimate_finite_mdp(&model, &states, &actions, &scheme, 400).unwrap();
        assert_eq!(again.mdp, est.mdp);
    }
}
