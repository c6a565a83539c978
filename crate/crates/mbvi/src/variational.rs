//! The controlled variational family and its control problem.
//!
//! A control path `u` modifies the prior drift by `R(x) v(t) T(x)` with
//! features `T(x) = (1, x_1, .., x_n)`. Projecting on first and second
//! moments gives deterministic dynamics `dphi/dt = f(u, phi)`; the path KL
//! to the prior is the quadratic running cost `L = u^T g(phi) u / 2` with
//! the Fisher block `g`, and Gaussian observations enter as closed-form
//! factors `F_k`. This module assembles the objective, the adjoint equation
//! with observation resets, and the regular / natural gradient directions.

use std::cell::Cell;
use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::closure::MomentPair;
use crate::la::{self, Tensor4};
use crate::models::{self, eval_values, NumPrimitives, PhiJacPrimitives, PriorModel, Rescaling};
use crate::ode::{self, GridFunction, Jump, TimeGrid};
use crate::{Error, Result};

/// Relative jitter added to the Fisher block for the natural-gradient solve.
pub const FISHER_JITTER_REL: f64 = 1e-8;

/// Relative eigenvalue floor of the PSD clamp applied after each forward step.
pub const PSD_CLAMP_REL: f64 = 1e-10;

/// Condition-number threshold above which the natural-gradient solve is
/// flagged as ill-conditioned.
pub const ILL_CONDITION_LIMIT: f64 = 1e10;

/// Packed moment-state dimension `n + n(n+1)/2`.
pub fn phi_dim(n: usize) -> usize {
    n + la::sym_len(n)
}

/// Pack `(m, M)` into the moment state vector.
pub fn pack_moments(mp: &MomentPair) -> DVector<f64> {
    let n = mp.dim();
    let mut out = DVector::zeros(phi_dim(n));
    out.rows_mut(0, n).copy_from(&mp.mean);
    out.rows_mut(n, la::sym_len(n)).copy_from(&la::pack_sym(&mp.second));
    out
}

/// Unpack a moment state vector into `(m, M)`.
pub fn unpack_moments(n: usize, phi: &DVector<f64>) -> MomentPair {
    let mean = DVector::from_fn(n, |i, _| phi[i]);
    let second = la::unpack_sym(n, &DVector::from_fn(la::sym_len(n), |k, _| phi[n + k]));
    MomentPair { mean, second }
}

/// Control features and dimensions of the variational family.
///
/// Only the standard feature set `T(x) = (1, x_1, .., x_n)` is built in.
/// `identity_metric` is a test hook forcing `g = I` (no jitter), which makes
/// the natural and regular gradient directions coincide.
#[derive(Debug, Clone, Copy)]
pub struct ControlSpec {
    n: usize,
    pub identity_metric: bool,
}

impl ControlSpec {
    pub fn new(n: usize) -> Self {
        ControlSpec { n, identity_metric: false }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Feature count `m = n + 1`.
    pub fn n_features(&self) -> usize {
        self.n + 1
    }

    /// Vectorized control dimension `n * m`.
    pub fn control_dim(&self) -> usize {
        self.n * self.n_features()
    }

    fn check_model(&self, model: &dyn PriorModel) -> Result<()> {
        if model.dim() != self.n {
            return Err(Error::Dimension(format!(
                "control spec dimension {} does not match model dimension {}",
                self.n,
                model.dim()
            )));
        }
        Ok(())
    }
}

/// Piecewise-constant vectorized control on a time grid; the variational
/// parameters. Layout per interval: `[u0; u1 column-major]`, i.e. the
/// stacked columns of the feature-coefficient matrix `v`.
#[derive(Debug, Clone)]
pub struct ControlPath {
    pub grid: TimeGrid,
    pub values: Vec<DVector<f64>>,
}

impl ControlPath {
    pub fn zero(grid: TimeGrid, spec: &ControlSpec) -> Self {
        ControlPath { grid, values: vec![DVector::zeros(spec.control_dim()); grid.n_steps()] }
    }

    pub fn new(grid: TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.n_steps() {
            return Err(Error::Dimension(format!(
                "control path needs {} interval values, got {}",
                grid.n_steps(),
                values.len()
            )));
        }
        if values.iter().any(|v| !la::all_finite(v)) {
            return Err(Error::Invalid("control path entries must be finite".into()));
        }
        Ok(ControlPath { grid, values })
    }

    /// State dimension implied by the stored control vectors.
    pub fn state_dim(&self) -> usize {
        let len = self.values.first().map(|v| v.len()).unwrap_or(0);
        let mut n = 0;
        while n * (n + 1) < len {
            n += 1;
        }
        n
    }

    /// Constant part `u0(t)` on interval `k`.
    pub fn u0(&self, k: usize) -> DVector<f64> {
        let n = self.state_dim();
        DVector::from_fn(n, |i, _| self.values[k][i])
    }

    /// Linear feedback part `u1(t)` on interval `k`.
    pub fn u1(&self, k: usize) -> DMatrix<f64> {
        let n = self.state_dim();
        DMatrix::from_fn(n, n, |i, j| self.values[k][n + j * n + i])
    }
}

/// Observation times, values, linear readout and Gaussian noise covariance.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub obs_matrix: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    noise_inv: DMatrix<f64>,
    log_det_2pi: f64,
}

impl ObservationSet {
    pub fn new(
        times: Vec<f64>,
        values: Vec<DVector<f64>>,
        obs_matrix: DMatrix<f64>,
        noise: DMatrix<f64>,
    ) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Dimension("observation times/values length mismatch".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("observation times must be strictly increasing".into()));
        }
        let p = obs_matrix.nrows();
        if noise.nrows() != p || noise.ncols() != p {
            return Err(Error::Dimension("noise covariance must be p x p".into()));
        }
        if values.iter().any(|y| y.len() != p) {
            return Err(Error::Dimension("observation value dimension mismatch".into()));
        }
        let chol = Cholesky::new(noise.clone())
            .ok_or_else(|| Error::Invalid("noise covariance must be positive definite".into()))?;
        let log_det_2pi = p as f64 * (2.0 * std::f64::consts::PI).ln()
            + 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let noise_inv = chol.inverse();
        Ok(ObservationSet { times, values, obs_matrix, noise, noise_inv, log_det_2pi })
    }

    /// Observation set with no observations (prior-only runs).
    pub fn empty(state_dim: usize) -> Self {
        ObservationSet {
            times: Vec::new(),
            values: Vec::new(),
            obs_matrix: DMatrix::identity(state_dim, state_dim),
            noise: DMatrix::identity(state_dim, state_dim),
            noise_inv: DMatrix::identity(state_dim, state_dim),
            log_det_2pi: state_dim as f64 * (2.0 * std::f64::consts::PI).ln(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_matrix.nrows()
    }

    pub fn noise_inv(&self) -> &DMatrix<f64> {
        &self.noise_inv
    }

    /// First `k` observations (for the online smoother).
    pub fn head(&self, k: usize) -> ObservationSet {
        let k = k.min(self.len());
        ObservationSet {
            times: self.times[..k].to_vec(),
            values: self.values[..k].to_vec(),
            obs_matrix: self.obs_matrix.clone(),
            noise: self.noise.clone(),
            noise_inv: self.noise_inv.clone(),
            log_det_2pi: self.log_det_2pi,
        }
    }

    /// Grid-node index of every observation; each time must sit on a node.
    pub fn node_indices(&self, grid: &TimeGrid) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.len());
        for &t in &self.times {
            let idx = grid.node_index(t).ok_or_else(|| {
                Error::Invalid(format!("observation time {t} does not sit on a grid node"))
            })?;
            if let Some(&last) = out.last() {
                if idx <= last {
                    return Err(Error::Invalid(
                        "observation times collapse onto the same grid node".into(),
                    ));
                }
            }
            out.push(idx);
        }
        Ok(out)
    }
}

/// Forward-integration diagnostics of the PSD clamp.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardDiagnostics {
    /// Number of steps where eigenvalue clamping changed the state.
    pub clamp_events: usize,
    /// Smallest pre-clamp eigenvalue of the central moments relative to the
    /// trace; meaningfully negative values indicate closure stress.
    pub min_eig_ratio: f64,
}

/// Expected summary statistics `phi(t) = (m, vech M)` on the grid.
#[derive(Debug, Clone)]
pub struct MomentTrajectory {
    pub states: GridFunction,
    pub n: usize,
    pub diagnostics: ForwardDiagnostics,
}

impl MomentTrajectory {
    pub fn moment_at(&self, node: usize) -> MomentPair {
        unpack_moments(self.n, &self.states.values[node])
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.states.grid
    }
}

/// Costate trajectory together with the observation jumps that were applied,
/// so the pre-jump (right-limit) value at a reset node can be reconstructed.
#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    pub states: GridFunction,
    pub jumps: BTreeMap<usize, DVector<f64>>,
}

impl AdjointTrajectory {
    /// Left-limit costate at `node` (the stored value).
    pub fn left(&self, node: usize) -> &DVector<f64> {
        &self.states.values[node]
    }

    /// Right-limit costate at `node` (jump at the node removed).
    pub fn right(&self, node: usize) -> DVector<f64> {
        match self.jumps.get(&node) {
            Some(j) => &self.states.values[node] - j,
            None => self.states.values[node].clone(),
        }
    }
}

fn control_contractions(
    num: &NumPrimitives,
    u0: &DVector<f64>,
    u1: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = u0.len();
    // dm_i = (r0 u0)_i + sum_kl r1[i,k,l] u1_kl
    let mut dm = &num.r0 * u0;
    for i in 0..n {
        let mut acc = 0.0;
        for k in 0..n {
            for l in 0..n {
                acc += num.r1.get(i, k, l) * u1[(k, l)];
            }
        }
        dm[i] += acc;
    }
    // C0_ij = sum_k r1[i,k,j] u0_k, C1_ij = sum_kl r2[i,k,l,j] u1_kl
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += num.r1.get(i, k, j) * u0[k];
                for l in 0..n {
                    acc += num.r2.get(i, k, l, j) * u1[(k, l)];
                }
            }
            c[(i, j)] = acc;
        }
    }
    (dm, &c + c.transpose())
}

/// Right-hand side `f(u_k, phi)` of the closed moment dynamics.
fn moment_rhs(
    model: &dyn PriorModel,
    u0: &DVector<f64>,
    u1: &DMatrix<f64>,
    phi: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = model.dim();
    let mp = unpack_moments(n, phi);
    let num = eval_values(model.primitives(), model.closure(), &mp, false)?;
    let (ctrl_m, ctrl_mat) = control_contractions(&num, u0, u1);
    let fm = &num.a_mean + ctrl_m;
    let sym_d = (&num.d_mean + num.d_mean.transpose()) * 0.5;
    let fmat = &num.a_cross + num.a_cross.transpose() + sym_d + ctrl_mat;

    let mut out = DVector::zeros(phi_dim(n));
    out.rows_mut(0, n).copy_from(&fm);
    out.rows_mut(n, la::sym_len(n)).copy_from(&la::pack_sym(&fmat));
    Ok(out)
}

/// Control Jacobian `f_u` (phi_dim x control_dim) at a moment pair.
fn control_jacobian(num: &NumPrimitives, n: usize) -> DMatrix<f64> {
    let p = phi_dim(n);
    let nm = n * (n + 1);
    let mut fu = DMatrix::zeros(p, nm);
    for i in 0..n {
        for k in 0..n {
            fu[(i, k)] = num.r0[(i, k)];
            for l in 0..n {
                fu[(i, n + l * n + k)] = num.r1.get(i, k, l);
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            let row = n + la::sym_index(n, i, j);
            for k in 0..n {
                fu[(row, k)] = num.r1.get(i, k, j) + num.r1.get(j, k, i);
                for l in 0..n {
                    fu[(row, n + l * n + k)] = num.r2.get(i, k, l, j) + num.r2.get(j, k, l, i);
                }
            }
        }
    }
    fu
}

/// State Jacobian `f_phi` (phi_dim x phi_dim) from the primitive Jacobians.
fn state_jacobian(
    jac: &PhiJacPrimitives,
    u0: &DVector<f64>,
    u1: &DMatrix<f64>,
    n: usize,
) -> DMatrix<f64> {
    let p = phi_dim(n);
    let mut fphi = DMatrix::zeros(p, p);
    for i in 0..n {
        for c in 0..p {
            let mut acc = jac.a_mean[(i, c)];
            for k in 0..n {
                acc += jac.r0[(i * n + k, c)] * u0[k];
                for l in 0..n {
                    acc += jac.r1[((i * n + k) * n + l, c)] * u1[(k, l)];
                }
            }
            fphi[(i, c)] = acc;
        }
    }
    for i in 0..n {
        for j in i..n {
            let row = n + la::sym_index(n, i, j);
            for c in 0..p {
                let mut acc = jac.a_cross[(i * n + j, c)]
                    + jac.a_cross[(j * n + i, c)]
                    + 0.5 * (jac.d_mean[(i * n + j, c)] + jac.d_mean[(j * n + i, c)]);
                for k in 0..n {
                    acc += (jac.r1[((i * n + k) * n + j, c)] + jac.r1[((j * n + k) * n + i, c)])
                        * u0[k];
                    for l in 0..n {
                        acc += (jac.r2[(((i * n + k) * n + l) * n + j, c)]
                            + jac.r2[(((j * n + k) * n + l) * n + i, c)])
                            * u1[(k, l)];
                    }
                }
                fphi[(row, c)] = acc;
            }
        }
    }
    fphi
}

/// Parameter Jacobian `f_theta` (phi_dim x q) from the primitive Jacobians;
/// same assembly as the state Jacobian with the parameter direction instead.
pub(crate) fn theta_jacobian(
    jac: &models::ThetaJacPrimitives,
    u0: &DVector<f64>,
    u1: &DMatrix<f64>,
    n: usize,
) -> DMatrix<f64> {
    let q = jac.a_mean.ncols();
    let p = phi_dim(n);
    let mut ftheta = DMatrix::zeros(p, q);
    for i in 0..n {
        for c in 0..q {
            let mut acc = jac.a_mean[(i, c)];
            for k in 0..n {
                acc += jac.r0[(i * n + k, c)] * u0[k];
                for l in 0..n {
                    acc += jac.r1[((i * n + k) * n + l, c)] * u1[(k, l)];
                }
            }
            ftheta[(i, c)] = acc;
        }
    }
    for i in 0..n {
        for j in i..n {
            let row = n + la::sym_index(n, i, j);
            for c in 0..q {
                let mut acc = jac.a_cross[(i * n + j, c)]
                    + jac.a_cross[(j * n + i, c)]
                    + 0.5 * (jac.d_mean[(i * n + j, c)] + jac.d_mean[(j * n + i, c)]);
                for k in 0..n {
                    acc += (jac.r1[((i * n + k) * n + j, c)] + jac.r1[((j * n + k) * n + i, c)])
                        * u0[k];
                    for l in 0..n {
                        acc += (jac.r2[(((i * n + k) * n + l) * n + j, c)]
                            + jac.r2[(((j * n + k) * n + l) * n + i, c)])
                            * u1[(k, l)];
                    }
                }
                ftheta[(row, c)] = acc;
            }
        }
    }
    ftheta
}

/// PSD clamp: symmetrize the central moments and floor their eigenvalues at
/// `PSD_CLAMP_REL * trace`, recording diagnostics.
fn clamp_psd(n: usize, phi: &mut DVector<f64>, diag: &mut ForwardDiagnostics) {
    let mp = unpack_moments(n, phi);
    let central = mp.central();
    let eig = central.symmetric_eigen();
    let trace: f64 = eig.eigenvalues.iter().sum();
    let floor = PSD_CLAMP_REL * trace.max(0.0);
    let min_eig = eig.eigenvalues.min();
    if trace > 0.0 {
        diag.min_eig_ratio = diag.min_eig_ratio.min(min_eig / trace);
    }
    if min_eig < floor {
        diag.clamp_events += 1;
        let clamped = eig.eigenvalues.map(|l| l.max(floor));
        let rebuilt =
            &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        let second = rebuilt + &mp.mean * mp.mean.transpose();
        phi.rows_mut(n, la::sym_len(n)).copy_from(&la::pack_sym(&second));
    }
}

/// Integrate the closed moment dynamics `dphi/dt = f(u, phi)` from `phi0`.
pub fn forward_moments(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u: &ControlPath,
    phi0: &MomentPair,
) -> Result<MomentTrajectory> {
    spec.check_model(model)?;
    if phi0.dim() != spec.dim() {
        return Err(Error::Dimension("initial moments have wrong dimension".into()));
    }
    let n = spec.dim();
    let grid = u.grid;
    let step = Cell::new(0usize);
    let mut diag = ForwardDiagnostics::default();

    let u0s: Vec<DVector<f64>> = (0..grid.n_steps()).map(|k| u.u0(k)).collect();
    let u1s: Vec<DMatrix<f64>> = (0..grid.n_steps()).map(|k| u.u1(k)).collect();

    let states = {
        let step_ref = &step;
        let mut rhs = |_t: f64, y: &DVector<f64>| {
            let k = step_ref.get().min(grid.n_steps() - 1);
            moment_rhs(model, &u0s[k], &u1s[k], y)
        };
        let diag_ref = &mut diag;
        ode::integrate_forward_projected(&mut rhs, &pack_moments(phi0), &grid, move |y| {
            clamp_psd(n, y, diag_ref);
            step_ref.set(step_ref.get() + 1);
        })?
    };
    Ok(MomentTrajectory { states, n, diagnostics: diag })
}

/// Feature Gram matrix `Phi_ab = E[T_a T_b]` for `T = (1, x)`.
fn feature_gram(mp: &MomentPair) -> DMatrix<f64> {
    let n = mp.dim();
    let m = n + 1;
    let mut gram = DMatrix::zeros(m, m);
    gram[(0, 0)] = 1.0;
    for i in 0..n {
        gram[(0, i + 1)] = mp.mean[i];
        gram[(i + 1, 0)] = mp.mean[i];
        for j in 0..n {
            gram[(i + 1, j + 1)] = mp.second[(i, j)];
        }
    }
    gram
}

fn ttd_values(model: &dyn PriorModel, mp: &MomentPair) -> Result<Tensor4> {
    let num = eval_values(model.primitives(), model.closure(), mp, true)?;
    num.ttd.ok_or_else(|| {
        Error::Invalid("model does not provide E[T T D] couplings for tensor rescaling".into())
    })
}

/// Un-jittered Fisher block; the exact weight of the path-KL quadratic form.
fn fisher_raw(model: &dyn PriorModel, spec: &ControlSpec, mp: &MomentPair) -> Result<DMatrix<f64>> {
    let n = spec.dim();
    let nm = spec.control_dim();
    if spec.identity_metric {
        return Ok(DMatrix::identity(nm, nm));
    }
    match model.rescaling() {
        Rescaling::DiffusionFactor => Ok(feature_gram(mp).kronecker(&DMatrix::identity(n, n))),
        Rescaling::Identity => {
            let d = model.constant_diffusion().ok_or(Error::SingularDiffusion)?;
            let d_inv = Cholesky::new(d).ok_or(Error::SingularDiffusion)?.inverse();
            Ok(feature_gram(mp).kronecker(&d_inv))
        }
        Rescaling::DiffusionTensor => {
            let ttd = ttd_values(model, mp)?;
            let m = n + 1;
            let mut g = DMatrix::zeros(nm, nm);
            for a in 0..m {
                for b in 0..m {
                    for i in 0..n {
                        for j in 0..n {
                            g[(a * n + i, b * n + j)] = ttd.get(a, b, i, j);
                        }
                    }
                }
            }
            // symmetrize against round-off in the closure moments
            Ok((&g + g.transpose()) * 0.5)
        }
    }
}

/// Fisher block `g(phi)` with relative jitter added; the operator used by
/// the natural-gradient solves.
pub fn fisher_block(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    mp: &MomentPair,
) -> Result<DMatrix<f64>> {
    let mut g = fisher_raw(model, spec, mp)?;
    if !spec.identity_metric {
        let nm = g.nrows();
        let jitter = FISHER_JITTER_REL * g.trace() / nm as f64;
        for i in 0..nm {
            g[(i, i)] += jitter;
        }
    }
    Ok(g)
}

/// Running path-KL cost `L(u_t, phi) = u_t^T g(phi) u_t / 2` (un-jittered;
/// the cost is exact, jitter is an optimizer device).
pub fn kl_running_cost(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u_t: &DVector<f64>,
    mp: &MomentPair,
) -> Result<f64> {
    let g = fisher_raw(model, spec, mp)?;
    Ok(0.5 * (u_t.transpose() * &g * u_t)[(0, 0)])
}

fn feature_blocks(spec: &ControlSpec, u_t: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = spec.dim();
    (0..spec.n_features()).map(|a| DVector::from_fn(n, |i, _| u_t[a * n + i])).collect()
}

/// Gradient of the running cost with respect to the packed moments.
fn kl_cost_phi_grad(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u_t: &DVector<f64>,
    mp: &MomentPair,
) -> Result<DVector<f64>> {
    let n = spec.dim();
    let p = phi_dim(n);
    let mut out = DVector::zeros(p);
    if spec.identity_metric {
        return Ok(out);
    }
    let blocks = feature_blocks(spec, u_t);
    match model.rescaling() {
        Rescaling::DiffusionFactor | Rescaling::Identity => {
            let w = match model.rescaling() {
                Rescaling::DiffusionFactor => DMatrix::identity(n, n),
                _ => {
                    let d = model.constant_diffusion().ok_or(Error::SingularDiffusion)?;
                    Cholesky::new(d).ok_or(Error::SingularDiffusion)?.inverse()
                }
            };
            let wv: Vec<DVector<f64>> = blocks.iter().map(|v| &w * v).collect();
            for k in 0..n {
                out[k] = blocks[0].dot(&wv[k + 1]);
                for l in k..n {
                    let val = blocks[k + 1].dot(&wv[l + 1]);
                    out[n + la::sym_index(n, k, l)] = if k == l { 0.5 * val } else { val };
                }
            }
        }
        Rescaling::DiffusionTensor => {
            let (_num, jac) =
                models::eval_with_phi_jac(model.primitives(), model.closure(), mp, true)?;
            let tj = jac.ttd.ok_or_else(|| {
                Error::Invalid("tensor rescaling needs E[T T D] polynomials".into())
            })?;
            let m = n + 1;
            for c in 0..p {
                let mut acc = 0.0;
                for a in 0..m {
                    for b in 0..m {
                        for i in 0..n {
                            for j in 0..n {
                                let row = ((a * m + b) * n + i) * n + j;
                                acc += 0.5 * blocks[a][i] * tj[(row, c)] * blocks[b][j];
                            }
                        }
                    }
                }
                out[c] = acc;
            }
        }
    }
    Ok(out)
}

/// Gradient of the running cost with respect to the model parameters.
pub(crate) fn kl_cost_theta_grad(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u_t: &DVector<f64>,
    mp: &MomentPair,
) -> Result<DVector<f64>> {
    let n = spec.dim();
    let q = model.primitives().q;
    let mut out = DVector::zeros(q);
    if spec.identity_metric {
        return Ok(out);
    }
    let blocks = feature_blocks(spec, u_t);
    match model.rescaling() {
        // g = Gram x I is independent of the parameters
        Rescaling::DiffusionFactor => {}
        Rescaling::Identity => {
            let d = model.constant_diffusion().ok_or(Error::SingularDiffusion)?;
            let d_inv = Cholesky::new(d).ok_or(Error::SingularDiffusion)?.inverse();
            let gram = feature_gram(mp);
            let theta_jac =
                models::eval_theta_jac(model.primitives(), model.closure(), mp, false)?;
            let wv: Vec<DVector<f64>> = blocks.iter().map(|v| &d_inv * v).collect();
            for qi in 0..q {
                let dd = DMatrix::from_fn(n, n, |i, j| theta_jac.d_mean[(i * n + j, qi)]);
                let dd = (&dd + dd.transpose()) * 0.5;
                let mut acc = 0.0;
                for a in 0..spec.n_features() {
                    for b in 0..spec.n_features() {
                        // d(D^-1)/dtheta = -D^-1 (dD/dtheta) D^-1
                        acc -= 0.5 * gram[(a, b)] * (wv[a].transpose() * &dd * &wv[b])[(0, 0)];
                    }
                }
                out[qi] = acc;
            }
        }
        Rescaling::DiffusionTensor => {
            let theta_jac = models::eval_theta_jac(model.primitives(), model.closure(), mp, true)?;
            let tj = theta_jac.ttd.ok_or_else(|| {
                Error::Invalid("tensor rescaling needs E[T T D] polynomials".into())
            })?;
            let m = n + 1;
            for qi in 0..q {
                let mut acc = 0.0;
                for a in 0..m {
                    for b in 0..m {
                        for i in 0..n {
                            for j in 0..n {
                                let row = ((a * m + b) * n + i) * n + j;
                                acc += 0.5 * blocks[a][i] * tj[(row, qi)] * blocks[b][j];
                            }
                        }
                    }
                }
                out[qi] = acc;
            }
        }
    }
    Ok(out)
}

/// Expected Gaussian log-likelihood factor `F_k` and its gradient with
/// respect to the packed moments:
/// `F_k = -1/2 log|2 pi S| - 1/2 (y - H m)^T S^-1 (y - H m)
///        - 1/2 tr(S^-1 H (M - m m^T) H^T)`.
pub fn obs_factor(obs: &ObservationSet, k: usize, mp: &MomentPair) -> Result<(f64, DVector<f64>)> {
    let n = mp.dim();
    let h = &obs.obs_matrix;
    if h.ncols() != n {
        return Err(Error::Dimension("observation matrix does not match state dimension".into()));
    }
    let y = &obs.values[k];
    let resid = y - h * &mp.mean;
    let central = mp.central();
    let quad = (resid.transpose() * &obs.noise_inv * &resid)[(0, 0)];
    let trace = (&obs.noise_inv * h * central * h.transpose()).trace();
    let value = -0.5 * (obs.log_det_2pi + quad + trace);

    // in raw coordinates F is linear in (m, M):
    // F = -1/2 (log|2 pi S| + y^T S^-1 y - 2 y^T S^-1 H m + tr(S^-1 H M H^T))
    let hth = h.transpose() * &obs.noise_inv * h;
    let mut grad = DVector::zeros(phi_dim(n));
    let gm = h.transpose() * &obs.noise_inv * y;
    for i in 0..n {
        grad[i] = gm[i];
    }
    for i in 0..n {
        for j in i..n {
            // d/dvech(i,j) of -tr(S^-1 H M H^T)/2; a packed off-diagonal
            // coordinate moves both symmetric entries of M
            grad[n + la::sym_index(n, i, j)] = if i == j {
                -0.5 * hth[(i, i)]
            } else {
                -0.5 * (hth[(i, j)] + hth[(j, i)])
            };
        }
    }
    Ok((value, grad))
}

/// Total objective `J[u] = int L dt - sum_k F_k(phi(t_k))`.
pub fn objective(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u: &ControlPath,
    phi0: &MomentPair,
    obs: &ObservationSet,
) -> Result<f64> {
    let traj = forward_moments(model, spec, u, phi0)?;
    objective_on_trajectory(model, spec, u, &traj, obs)
}

/// Objective evaluated on an existing forward trajectory; per-interval
/// trapezoidal quadrature of `L` plus observation factors at their nodes.
pub fn objective_on_trajectory(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u: &ControlPath,
    traj: &MomentTrajectory,
    obs: &ObservationSet,
) -> Result<f64> {
    spec.check_model(model)?;
    let grid = u.grid;
    let dt = grid.dt();
    let mut total = 0.0;
    for k in 0..grid.n_steps() {
        let left = kl_running_cost(model, spec, &u.values[k], &traj.moment_at(k))?;
        let right = kl_running_cost(model, spec, &u.values[k], &traj.moment_at(k + 1))?;
        total += 0.5 * dt * (left + right);
    }
    for (k, &node) in obs.node_indices(&grid)?.iter().enumerate() {
        let (f_val, _) = obs_factor(obs, k, &traj.moment_at(node))?;
        total -= f_val;
    }
    Ok(total)
}

/// Linear interpolation of the stored moment states at time `t`.
fn interp_phi(traj: &MomentTrajectory, t: f64) -> DVector<f64> {
    let grid = traj.states.grid;
    let dt = grid.dt();
    let raw = (t - grid.t0()) / dt;
    let k = (raw.floor().max(0.0) as usize).min(grid.n_steps() - 1);
    let w = (raw - k as f64).clamp(0.0, 1.0);
    &traj.states.values[k] * (1.0 - w) + &traj.states.values[k + 1] * w
}

/// Solve the adjoint equation `deta/dt = L_phi - f_phi^T eta` backward from
/// `eta(T) = 0` with jumps `+dF_k/dphi` at the observation nodes.
pub fn adjoint_solve(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u: &ControlPath,
    traj: &MomentTrajectory,
    obs: &ObservationSet,
) -> Result<AdjointTrajectory> {
    spec.check_model(model)?;
    let n = spec.dim();
    let p = phi_dim(n);
    let grid = u.grid;

    let mut resets: BTreeMap<usize, Jump> = BTreeMap::new();
    let mut jumps: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    for (k, &node) in obs.node_indices(&grid)?.iter().enumerate() {
        let (_, grad) = obs_factor(obs, k, &traj.moment_at(node))?;
        jumps.insert(node, grad.clone());
        resets.insert(node, Box::new(move |eta: &DVector<f64>| eta + &grad));
    }

    let u0s: Vec<DVector<f64>> = (0..grid.n_steps()).map(|k| u.u0(k)).collect();
    let u1s: Vec<DMatrix<f64>> = (0..grid.n_steps()).map(|k| u.u1(k)).collect();
    let interval = Cell::new(grid.n_steps() - 1);

    let rhs = |t: f64, eta: &DVector<f64>| -> Result<DVector<f64>> {
        let k = interval.get();
        let phi = interp_phi(traj, t);
        let mp = unpack_moments(n, &phi);
        let (_num, jac) =
            models::eval_with_phi_jac(model.primitives(), model.closure(), &mp, false)?;
        let fphi = state_jacobian(&jac, &u0s[k], &u1s[k], n);
        let lphi = kl_cost_phi_grad(model, spec, &u.values[k], &mp)?;
        Ok(lphi - fphi.transpose() * eta)
    };
    let states =
        ode::integrate_backward_hooked(rhs, &DVector::zeros(p), &grid, &resets, |k| {
            interval.set(k)
        })?;
    Ok(AdjointTrajectory { states, jumps })
}

fn fu_eta_at(
    model: &dyn PriorModel,
    n: usize,
    mp: &MomentPair,
    eta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let num = eval_values(model.primitives(), model.closure(), mp, false)?;
    let fu = control_jacobian(&num, n);
    Ok(fu.transpose() * eta)
}

/// Regular-gradient direction: per-interval trapezoidal average of the
/// functional gradient density `g(phi) u - f_u^T eta`.
pub fn gradient(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u: &ControlPath,
    traj: &MomentTrajectory,
    adj: &AdjointTrajectory,
) -> Result<ControlPath> {
    spec.check_model(model)?;
    let n = spec.dim();
    let grid = u.grid;
    let mut dirs = Vec::with_capacity(grid.n_steps());
    for k in 0..grid.n_steps() {
        let mp_l = traj.moment_at(k);
        let mp_r = traj.moment_at(k + 1);
        let eta_l = adj.right(k);
        let eta_r = adj.left(k + 1);
        let g_bar = (fisher_raw(model, spec, &mp_l)? + fisher_raw(model, spec, &mp_r)?) * 0.5;
        let w = (fu_eta_at(model, n, &mp_l, &eta_l)? + fu_eta_at(model, n, &mp_r, eta_r)?) * 0.5;
        dirs.push(&g_bar * &u.values[k] - w);
    }
    ControlPath::new(grid, dirs)
}

/// Outcome of a natural-gradient direction computation.
pub struct NaturalGradient {
    pub direction: ControlPath,
    /// Intervals where the jittered Fisher block still looked ill-conditioned.
    pub ill_conditioned: usize,
}

/// Natural-gradient direction `u - g^-1 f_u^T eta` with the jittered Fisher
/// block and Cholesky solves (no explicit inversion).
pub fn natural_gradient(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u: &ControlPath,
    traj: &MomentTrajectory,
    adj: &AdjointTrajectory,
) -> Result<NaturalGradient> {
    spec.check_model(model)?;
    let n = spec.dim();
    let grid = u.grid;
    let mut dirs = Vec::with_capacity(grid.n_steps());
    let mut ill = 0usize;
    for k in 0..grid.n_steps() {
        let mp_l = traj.moment_at(k);
        let mp_r = traj.moment_at(k + 1);
        let eta_l = adj.right(k);
        let eta_r = adj.left(k + 1);
        let w = (fu_eta_at(model, n, &mp_l, &eta_l)? + fu_eta_at(model, n, &mp_r, eta_r)?) * 0.5;
        let g_bar = (fisher_block(model, spec, &mp_l)? + fisher_block(model, spec, &mp_r)?) * 0.5;
        let chol: Cholesky<f64, Dyn> = Cholesky::new(g_bar).ok_or_else(|| {
            Error::Domain("jittered Fisher block is not positive definite".into())
        })?;
        let ldiag = chol.l().diagonal();
        let cond_est = (ldiag.max() / ldiag.min()).powi(2);
        if cond_est > ILL_CONDITION_LIMIT {
            ill += 1;
        }
        dirs.push(&u.values[k] - chol.solve(&w));
    }
    Ok(NaturalGradient { direction: ControlPath::new(grid, dirs)?, ill_conditioned: ill })
}
