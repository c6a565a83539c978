//! Fixed-step RK4 integration on a shared time grid, forward and backward,
//! with support for instantaneous state resets at marked grid nodes.
//!
//! Everything downstream (moment dynamics, adjoint, quadrature) lives on the
//! same equidistant grid so that piecewise-constant controls, trajectories
//! and costates stay aligned. Interval values are held constant across all
//! RK4 stages within a step.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::{la, Error, Result};

/// Equidistant grid on `[t0, t_end]` with `n_steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > t0) || !t0.is_finite() || !t_end.is_finite() {
            return Err(Error::Invalid(format!(
                "time grid requires t_end > t0, got [{t0}, {t_end}]"
            )));
        }
        if n_steps == 0 {
            return Err(Error::Invalid("time grid requires n_steps >= 1".into()));
        }
        Ok(TimeGrid { t0, t_end, n_steps })
    }

    /// Smallest grid refining `base_steps` whose nodes hit every time in
    /// `times` within the grid tolerance. Errors if no multiple of
    /// `base_steps` up to a generous cap succeeds.
    pub fn fit(t0: f64, t_end: f64, base_steps: usize, times: &[f64]) -> Result<Self> {
        let base = base_steps.max(1);
        for mult in 1..=4096 {
            let grid = TimeGrid::new(t0, t_end, base * mult)?;
            if times.iter().all(|&t| grid.node_index(t).is_some()) {
                return Ok(grid);
            }
        }
        Err(Error::Invalid(
            "could not fit a grid whose nodes contain all observation times".into(),
        ))
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    pub fn node_time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.t_end
        } else {
            self.t0 + i as f64 * self.dt()
        }
    }

    /// Absolute tolerance for snapping times onto nodes.
    pub fn snap_tol(&self) -> f64 {
        1e-9 * (self.t_end - self.t0)
    }

    /// Node index of `t` if it coincides with a grid node within tolerance.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let raw = (t - self.t0) / self.dt();
        let i = raw.round();
        if i < 0.0 || i > self.n_steps as f64 {
            return None;
        }
        let i = i as usize;
        if (t - self.node_time(i)).abs() <= self.snap_tol() {
            Some(i)
        } else {
            None
        }
    }

    /// Interval index containing `t` (clamped to the last interval at `t_end`).
    pub fn interval_index(&self, t: f64) -> usize {
        let raw = ((t - self.t0) / self.dt()).floor();
        (raw.max(0.0) as usize).min(self.n_steps - 1)
    }
}

/// Whether a grid function carries one value per node or per interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    Node,
    Interval,
}

/// Vector-valued function sampled on a [`TimeGrid`].
#[derive(Debug, Clone)]
pub struct GridFunction {
    pub grid: TimeGrid,
    pub convention: Convention,
    pub values: Vec<DVector<f64>>,
}

impl GridFunction {
    pub fn nodes(grid: TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::Dimension(format!(
                "node grid function needs {} values, got {}",
                grid.n_nodes(),
                values.len()
            )));
        }
        Ok(GridFunction { grid, convention: Convention::Node, values })
    }

    pub fn intervals(grid: TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.n_steps() {
            return Err(Error::Dimension(format!(
                "interval grid function needs {} values, got {}",
                grid.n_steps(),
                values.len()
            )));
        }
        Ok(GridFunction { grid, convention: Convention::Interval, values })
    }
}

/// One classical RK4 step of size `h` (which may be negative).
fn rk4_step<F>(rhs: &mut F, t: f64, y: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = rhs(t, y)?;
    let k2 = rhs(t + 0.5 * h, &(y + &k1 * (0.5 * h)))?;
    let k3 = rhs(t + 0.5 * h, &(y + &k2 * (0.5 * h)))?;
    let k4 = rhs(t + h, &(y + &k3 * h))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// RK4 solution of `y' = rhs(t, y)` sampled at every grid node.
pub fn integrate_forward<F>(mut rhs: F, y0: &DVector<f64>, grid: &TimeGrid) -> Result<GridFunction>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    integrate_forward_projected(&mut rhs, y0, grid, |_| {})
}

/// Like [`integrate_forward`] but applies `project` to the state after every
/// completed step (used for the PSD clamp on moment trajectories).
pub fn integrate_forward_projected<F, P>(
    rhs: &mut F,
    y0: &DVector<f64>,
    grid: &TimeGrid,
    mut project: P,
) -> Result<GridFunction>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    P: FnMut(&mut DVector<f64>),
{
    if !la::all_finite(y0) {
        return Err(Error::NonFiniteState { step: 0, t: grid.t0() });
    }
    let dt = grid.dt();
    let mut values = Vec::with_capacity(grid.n_nodes());
    values.push(y0.clone());
    let mut y = y0.clone();
    for k in 0..grid.n_steps() {
        let t = grid.node_time(k);
        let mut next = rk4_step(rhs, t, &y, dt)?;
        project(&mut next);
        if !la::all_finite(&next) {
            return Err(Error::NonFiniteState { step: k + 1, t: grid.node_time(k + 1) });
        }
        values.push(next.clone());
        y = next;
    }
    GridFunction::nodes(*grid, values)
}

/// Jump applied to the state at a reset node.
pub type Jump = Box<dyn Fn(&DVector<f64>) -> DVector<f64>>;

/// Integrates `dy/dt = rhs` backward from `t_end` to `t0` with RK4.
///
/// At each reset node `k` (traversed in decreasing time) the jump is applied
/// before continuing backward, so the stored value at a reset node is the
/// post-jump (left-limit) value.
pub fn integrate_backward_with_resets<F>(
    rhs: F,
    terminal: &DVector<f64>,
    grid: &TimeGrid,
    resets: &BTreeMap<usize, Jump>,
) -> Result<GridFunction>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    integrate_backward_hooked(rhs, terminal, grid, resets, |_| {})
}

/// Backward integration with a hook announcing the interval index before
/// each backward step, so callers can bind piecewise-constant interval data
/// without relying on floating-point time lookups at interval endpoints.
pub fn integrate_backward_hooked<F, H>(
    mut rhs: F,
    terminal: &DVector<f64>,
    grid: &TimeGrid,
    resets: &BTreeMap<usize, Jump>,
    mut before_step: H,
) -> Result<GridFunction>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    H: FnMut(usize),
{
    if let Some(&k) = resets.keys().next_back() {
        if k > grid.n_steps() {
            return Err(Error::Invalid(format!(
                "reset index {k} beyond last grid node {}",
                grid.n_steps()
            )));
        }
    }
    if !la::all_finite(terminal) {
        return Err(Error::NonFiniteState { step: grid.n_steps(), t: grid.t_end() });
    }
    let dt = grid.dt();
    let n = grid.n_steps();
    let mut values = vec![DVector::zeros(terminal.len()); n + 1];

    let mut y = terminal.clone();
    for k in (0..=n).rev() {
        if let Some(jump) = resets.get(&k) {
            y = jump(&y);
            if !la::all_finite(&y) {
                return Err(Error::NonFiniteState { step: k, t: grid.node_time(k) });
            }
        }
        values[k] = y.clone();
        if k > 0 {
            before_step(k - 1);
            let t = grid.node_time(k);
            y = rk4_step(&mut rhs, t, &y, -dt)?;
            if !la::all_finite(&y) {
                return Err(Error::NonFiniteState { step: k - 1, t: grid.node_time(k - 1) });
            }
        }
    }
    GridFunction::nodes(*grid, values)
}
