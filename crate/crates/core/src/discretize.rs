//! Finite state and action sets and the nearest-neighbour quantizer.

use std::io::Write;

use crate::io::fmt_float;
use crate::scalar::{from_usize, lit, Scalar};
use crate::{Error, Result};

/// Representatives of a partition of an interval into consecutive cells,
/// with the worst-case distance from a point to its representative.
#[derive(Clone, Debug, PartialEq)]
struct Cells<F> {
    points: Vec<F>,
    /// `points.len() + 1` edges; `edges[0]` and `edges[len]` are the interval
    /// endpoints, interior edges are midpoints between neighbours.
    edges: Vec<F>,
    sup_error: F,
}

impl<F: Scalar> Cells<F> {
    fn from_points(points: Vec<F>, lo: F, hi: F) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::validation("a grid needs at least one point"));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::validation(format!("grid interval requires lo < hi, got [{lo}, {hi}]")));
        }
        if points.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::validation("grid points must be strictly increasing"));
        }
        if points.iter().any(|&p| !(p >= lo && p <= hi)) {
            return Err(Error::validation("grid points must lie inside the interval"));
        }
        let half = lit::<F>(0.5);
        let mut edges = Vec::with_capacity(points.len() + 1);
        edges.push(lo);
        edges.extend(points.windows(2).map(|w| (w[0] + w[1]) * half));
        edges.push(hi);
        let sup_error = points
            .iter()
            .enumerate()
            .map(|(i, &p)| (p - edges[i]).max(edges[i + 1] - p))
            .fold(F::zero(), F::max);
        Ok(Self { points, edges, sup_error })
    }

    /// Nearest point, ties toward the lower index, out-of-range values go to
    /// the boundary cell.
    #[inline]
    fn nearest(&self, x: F) -> usize {
        let interior = &self.edges[1..self.points.len()];
        interior.partition_point(|&e| e < x)
    }
}

/// The finite state set with its bins.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrid<F> {
    cells: Cells<F>,
}

impl<F: Scalar> StateGrid<F> {
    /// Arbitrary sorted representatives; bins are their Voronoi cells
    /// clipped to `[x_min, x_max]`.
    pub fn from_points(points: Vec<F>, x_min: F, x_max: F) -> Result<Self> {
        Ok(Self { cells: Cells::from_points(points, x_min, x_max)? })
    }

    pub fn len(&self) -> usize {
        self.cells.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.points.is_empty()
    }

    pub fn points(&self) -> &[F] {
        &self.cells.points
    }

    pub fn bin_edges(&self) -> &[F] {
        &self.cells.edges
    }

    /// `(left, right)` edges of bin `i`.
    pub fn bin(&self, i: usize) -> (F, F) {
        (self.cells.edges[i], self.cells.edges[i + 1])
    }

    /// `sup_x |x - φ(x)|` over the truncated domain.
    pub fn l_x(&self) -> F {
        self.cells.sup_error
    }

    pub fn domain(&self) -> (F, F) {
        (self.cells.edges[0], self.cells.edges[self.len()])
    }

    /// Index of the representative nearest to `x`.
    #[inline]
    pub fn quantize(&self, x: F) -> usize {
        self.cells.nearest(x)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_cells_csv(&self.cells, out)
    }
}

/// `M` equal bins on `[x_min, x_max]` with representatives at bin centers.
pub fn build_uniform_state_grid<F: Scalar>(x_min: F, x_max: F, m: usize) -> Result<StateGrid<F>> {
    if m == 0 {
        return Err(Error::validation("state grid size M must be at least 1"));
    }
    if !(x_min < x_max) {
        return Err(Error::validation(format!("state domain requires x_min < x_max, got [{x_min}, {x_max}]")));
    }
    let width = (x_max - x_min) / from_usize(m);
    let half = lit::<F>(0.5);
    let points = (0..m).map(|i| x_min + width * (from_usize::<F>(i) + half)).collect();
    StateGrid::from_points(points, x_min, x_max)
}

/// Free-function form of [`StateGrid::quantize`].
pub fn quantize_state<F: Scalar>(grid: &StateGrid<F>, x: F) -> usize {
    grid.quantize(x)
}

/// The finite action set.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionGrid<F> {
    cells: Cells<F>,
}

impl<F: Scalar> ActionGrid<F> {
    pub fn from_points(points: Vec<F>, u_min: F, u_max: F) -> Result<Self> {
        Ok(Self { cells: Cells::from_points(points, u_min, u_max)? })
    }

    pub fn len(&self) -> usize {
        self.cells.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.points.is_empty()
    }

    pub fn points(&self) -> &[F] {
        &self.cells.points
    }

    #[inline]
    pub fn action(&self, a: usize) -> F {
        self.cells.points[a]
    }

    /// `sup_u min_k |u - u_k|` over the action interval.
    pub fn l_u(&self) -> F {
        self.cells.sup_error
    }

    pub fn nearest(&self, u: F) -> usize {
        self.cells.nearest(u)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_cells_csv(&self.cells, out)
    }
}

/// `N` equally spaced actions including both endpoints (`N ≥ 2`), or the
/// midpoint when `N = 1`.
pub fn build_action_grid<F: Scalar>(u_min: F, u_max: F, n: usize) -> Result<ActionGrid<F>> {
    if n == 0 {
        return Err(Error::validation("action grid size N must be at least 1"));
    }
    if !(u_min < u_max) {
        return Err(Error::validation(format!("action range requires u_min < u_max, got [{u_min}, {u_max}]")));
    }
    let points = if n == 1 {
        vec![(u_min + u_max) * lit::<F>(0.5)]
    } else {
        let gap = (u_max - u_min) / from_usize(n - 1);
        (0..n).map(|k| if k + 1 == n { u_max } else { u_min + gap * from_usize(k) }).collect()
    };
    ActionGrid::from_points(points, u_min, u_max)
}

/// Hard cap on grid sizes produced by [`coupled_resolution`].
pub const MAX_GRID_SIZE: usize = 1_000_000;

/// Grid sizes `(M, N)` whose quantization errors are at most `h^p`.
///
/// The state grid uses bin centers, so `M = ⌈w_x / (2 h^p)⌉`. The action grid
/// includes its endpoints, so it needs one more point than the same formula
/// unless a single midpoint already suffices.
pub fn coupled_resolution<F: Scalar>(h: F, exponent: F, state_width: F, action_width: F) -> Result<(usize, usize)> {
    if !(h > F::zero() && exponent > F::zero()) {
        return Err(Error::validation(format!("coupled resolution needs h > 0 and p > 0, got h = {h}, p = {exponent}")));
    }
    if !(state_width > F::zero() && action_width > F::zero()) {
        return Err(Error::validation("coupled resolution needs positive interval widths"));
    }
    let target = h.powf(exponent);
    let two = lit::<F>(2.0);
    let cells = |width: F| -> Result<usize> {
        let c = (width / (two * target)).ceil();
        match c.to_usize() {
            Some(v) if v <= MAX_GRID_SIZE => Ok(v.max(1)),
            _ => Err(Error::validation(format!(
                "coupled resolution h = {h}, p = {exponent} needs more than {MAX_GRID_SIZE} grid points"
            ))),
        }
    };
    let m = cells(state_width)?;
    let n = if action_width / two <= target { 1 } else { cells(action_width)? + 1 };
    if n > MAX_GRID_SIZE {
        return Err(Error::validation(format!("action grid would exceed {MAX_GRID_SIZE} points")));
    }
    Ok((m, n))
}

fn write_cells_csv<F: Scalar, W: Write>(cells: &Cells<F>, mut out: W) -> Result<()> {
    writeln!(out, "index,representative,left,right")?;
    for (i, p) in cells.points.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{}",
            fmt_float(*p),
            fmt_float(cells.edges[i]),
            fmt_float(cells.edges[i + 1])
        )?;
    }
    Ok(())
}
