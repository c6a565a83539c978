//! Stochastic simulation and exact references: Euler-Maruyama sampling of
//! prior and controlled SDEs, empirical moment estimation, synthetic
//! observation generation, and the exact continuous-discrete linear-Gaussian
//! smoother used as the ground-truth posterior for linear models.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::closure::MomentPair;
use crate::la;
use crate::models::PriorModel;
use crate::ode::TimeGrid;
use crate::variational::{
    pack_moments, ControlPath, ControlSpec, ForwardDiagnostics, MomentTrajectory, ObservationSet,
};
use crate::{Error, Result};

/// Positivity guard floor applied after each step for positive-state models.
const POSITIVITY_FLOOR: f64 = 1e-12;

/// Drift and diffusion factor of an SDE in pointwise (non-moment) form,
/// optionally overlaid with a variational feedback control.
pub struct ConcreteSde<'a> {
    model: &'a dyn PriorModel,
    control: Option<&'a ControlPath>,
}

impl<'a> ConcreteSde<'a> {
    /// The prior process of a model.
    pub fn prior(model: &'a dyn PriorModel) -> Self {
        ConcreteSde { model, control: None }
    }

    /// The controlled process `a(x) + R(x) (u0 + u1 x)`.
    pub fn controlled(model: &'a dyn PriorModel, control: &'a ControlPath) -> Self {
        ConcreteSde { model, control: Some(control) }
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn drift(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let mut a = self.model.drift_at(x);
        if let Some(u) = self.control {
            let k = u.grid.interval_index(t);
            let feedback = u.u0(k) + u.u1(k) * x;
            a += self.model.rescale_at(x) * feedback;
        }
        a
    }

    pub fn diffusion_factor(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.model.diffusion_factor_at(x)
    }

    pub fn positive_state(&self) -> bool {
        self.model.positive_state()
    }
}

/// Seeded ensemble of Euler-Maruyama sample paths on a simulation grid.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    /// `paths[p][node]` is the state of path `p` at a grid node.
    pub paths: Vec<Vec<DVector<f64>>>,
    pub seed: u64,
    /// Steps where the positivity guard clamped a state.
    pub clamp_events: usize,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }
}

/// Euler-Maruyama simulation `X_{k+1} = X_k + a dt + b sqrt(dt) xi`.
///
/// Per-path RNG streams are derived from `(seed, path index)`, so results do
/// not depend on scheduling and are reproducible given the seed.
pub fn euler_maruyama(
    sde: &ConcreteSde,
    x0: &DVector<f64>,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let n = sde.dim();
    if x0.len() != n {
        return Err(Error::Dimension("initial state has wrong dimension".into()));
    }
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut paths = Vec::with_capacity(n_paths);
    let mut clamp_events = 0usize;
    for p in 0..n_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let mut path = Vec::with_capacity(grid.n_nodes());
        let mut x = x0.clone();
        path.push(x.clone());
        for k in 0..grid.n_steps() {
            let t = grid.node_time(k);
            let noise =
                DVector::from_fn(n, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            x = &x + sde.drift(t, &x) * dt + sde.diffusion_factor(&x) * noise * sqrt_dt;
            if sde.positive_state() {
                for i in 0..n {
                    if x[i] < POSITIVITY_FLOOR {
                        x[i] = POSITIVITY_FLOOR;
                        clamp_events += 1;
                    }
                }
            }
            if !la::all_finite(&x) {
                return Err(Error::NonFinitePath { path: p, step: k + 1 });
            }
            path.push(x.clone());
        }
        paths.push(path);
    }
    Ok(PathEnsemble { grid, paths, seed, clamp_events })
}

/// Empirical moments of an ensemble with jackknife standard errors.
#[derive(Debug, Clone)]
pub struct EmpiricalMoments {
    pub traj: MomentTrajectory,
    /// Standard error of each mean component per node.
    pub se_mean: Vec<DVector<f64>>,
    /// Standard error of each raw second-moment entry per node.
    pub se_second: Vec<DMatrix<f64>>,
}

/// Per-node sample mean and raw second moments with standard errors.
pub fn empirical_moments(ens: &PathEnsemble) -> Result<EmpiricalMoments> {
    let n_paths = ens.n_paths();
    if n_paths < 2 {
        return Err(Error::Invalid("empirical moments need at least 2 paths".into()));
    }
    let n = ens.paths[0][0].len();
    let nodes = ens.grid.n_nodes();
    let mut values = Vec::with_capacity(nodes);
    let mut se_mean = Vec::with_capacity(nodes);
    let mut se_second = Vec::with_capacity(nodes);
    let norm = 1.0 / n_paths as f64;
    let se_norm = 1.0 / ((n_paths * (n_paths - 1)) as f64);

    for node in 0..nodes {
        let mut mean = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for p in 0..n_paths {
            let x = &ens.paths[p][node];
            mean += x;
            second += x * x.transpose();
        }
        mean *= norm;
        second *= norm;

        let mut var_mean = DVector::zeros(n);
        let mut var_second = DMatrix::zeros(n, n);
        for p in 0..n_paths {
            let x = &ens.paths[p][node];
            for i in 0..n {
                var_mean[i] += (x[i] - mean[i]).powi(2);
                for j in 0..n {
                    var_second[(i, j)] += (x[i] * x[j] - second[(i, j)]).powi(2);
                }
            }
        }
        se_mean.push(var_mean.map(|v: f64| (v * se_norm).sqrt()));
        se_second.push(var_second.map(|v: f64| (v * se_norm).sqrt()));
        values.push(pack_moments(&MomentPair { mean, second }));
    }
    Ok(EmpiricalMoments {
        traj: MomentTrajectory {
            states: crate::ode::GridFunction::nodes(ens.grid, values)?,
            n,
            diagnostics: ForwardDiagnostics::default(),
        },
        se_mean,
        se_second,
    })
}

/// Noisy linear observations `y_k = H x(t_k) + noise` of a single path.
pub fn generate_observations(
    path: &[DVector<f64>],
    grid: &TimeGrid,
    times: &[f64],
    obs_matrix: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    seed: u64,
) -> Result<ObservationSet> {
    let p = obs_matrix.nrows();
    let noise_factor = la::psd_sqrt(noise);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(times.len());
    for &t in times {
        let node = grid
            .node_index(t)
            .ok_or_else(|| Error::Invalid(format!("observation time {t} not on the grid")))?;
        let xi = DVector::from_fn(p, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        values.push(obs_matrix * &path[node] + &noise_factor * xi);
    }
    ObservationSet::new(times.to_vec(), values, obs_matrix.clone(), noise.clone())
}

/// Exact discrete transition of the linear SDE over one step: mean map
/// `m -> A m + c` and noise covariance `Q` via Van Loan's augmented
/// exponential.
fn linear_transition(
    gamma: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    dt: f64,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let n = gamma.nrows();
    let q_c = sigma * sigma.transpose();
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(gamma * dt));
    block.view_mut((0, n), (n, n)).copy_from(&(&q_c * dt));
    block.view_mut((n, n), (n, n)).copy_from(&(-gamma.transpose() * dt));
    let e = la::expm(&block);
    let a = e.view((n, n), (n, n)).transpose().into_owned();
    let q = &a * e.view((0, n), (n, n));
    let q = (&q + q.transpose()) * 0.5;
    let c = (DMatrix::identity(n, n) - &a) * mu;
    (a, c, q)
}

/// Exact continuous-discrete Kalman filter and RTS smoother for the linear
/// model `dX = -gamma (X - mu) dt + sigma dW` with Gaussian observations.
/// Returns the exact posterior marginals on the grid.
pub fn exact_linear_smoother(
    gamma: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    phi0: &MomentPair,
    obs: &ObservationSet,
    grid: TimeGrid,
) -> Result<MomentTrajectory> {
    let n = mu.len();
    let (a, c, q) = linear_transition(gamma, mu, sigma, grid.dt());
    let obs_nodes = obs.node_indices(&grid)?;

    let mut m = phi0.mean.clone();
    let mut cov = phi0.central();
    let mut filt_m = Vec::with_capacity(grid.n_nodes());
    let mut filt_p = Vec::with_capacity(grid.n_nodes());

    let update = |m: &mut DVector<f64>, cov: &mut DMatrix<f64>, k_obs: usize| -> Result<()> {
        let h = &obs.obs_matrix;
        let y = &obs.values[k_obs];
        let s = h * cov.clone() * h.transpose() + &obs.noise;
        let s_chol = Cholesky::new(s)
            .ok_or_else(|| Error::Domain("singular innovation covariance".into()))?;
        let gain = cov.clone() * h.transpose() * s_chol.inverse();
        *m += &gain * (y - h * m.clone());
        // Joseph form keeps the covariance symmetric PSD
        let eye = DMatrix::identity(n, n);
        let j = &eye - &gain * h;
        *cov = &j * cov.clone() * j.transpose() + &gain * &obs.noise * gain.transpose();
        Ok(())
    };

    if let Some(pos) = obs_nodes.iter().position(|&node| node == 0) {
        update(&mut m, &mut cov, pos)?;
    }
    filt_m.push(m.clone());
    filt_p.push(cov.clone());
    for k in 1..grid.n_nodes() {
        m = &a * m + &c;
        cov = &a * cov * a.transpose() + &q;
        if let Some(pos) = obs_nodes.iter().position(|&node| node == k) {
            update(&mut m, &mut cov, pos)?;
        }
        filt_m.push(m.clone());
        filt_p.push(cov.clone());
    }

    // RTS backward pass over the grid steps
    let mut sm_m = filt_m.clone();
    let mut sm_p = filt_p.clone();
    for k in (0..grid.n_steps()).rev() {
        let m_pred = &a * &filt_m[k] + &c;
        let p_pred = &a * &filt_p[k] * a.transpose() + &q;
        let chol = Cholesky::new(p_pred.clone())
            .ok_or_else(|| Error::Domain("singular predicted covariance".into()))?;
        let gain = &filt_p[k] * a.transpose() * chol.inverse();
        sm_m[k] = &filt_m[k] + &gain * (&sm_m[k + 1] - m_pred);
        let dp = &sm_p[k + 1] - p_pred;
        let p = &filt_p[k] + &gain * dp * gain.transpose();
        sm_p[k] = (&p + p.transpose()) * 0.5;
    }

    let values = (0..grid.n_nodes())
        .map(|k| {
            let mp = MomentPair::from_central(sm_m[k].clone(), sm_p[k].clone())?;
            Ok(pack_moments(&mp))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MomentTrajectory {
        states: crate::ode::GridFunction::nodes(grid, values)?,
        n,
        diagnostics: ForwardDiagnostics::default(),
    })
}

/// Exact marginal log-likelihood of the observations under the linear model
/// (innovation form of the Kalman filter). Used as a reference for
/// parameter-recovery checks.
pub fn kalman_log_likelihood(
    gamma: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    phi0: &MomentPair,
    obs: &ObservationSet,
    grid: TimeGrid,
) -> Result<f64> {
    let n = mu.len();
    let (a, c, q) = linear_transition(gamma, mu, sigma, grid.dt());
    let obs_nodes = obs.node_indices(&grid)?;
    let mut m = phi0.mean.clone();
    let mut cov = phi0.central();
    let mut loglik = 0.0;
    let two_pi = 2.0 * std::f64::consts::PI;

    let mut handle = |m: &mut DVector<f64>, cov: &mut DMatrix<f64>, k_obs: usize| -> Result<()> {
        let h = &obs.obs_matrix;
        let y = &obs.values[k_obs];
        let s = h * cov.clone() * h.transpose() + &obs.noise;
        let s_chol = Cholesky::new(s)
            .ok_or_else(|| Error::Domain("singular innovation covariance".into()))?;
        let resid = y - h * m.clone();
        let log_det =
            2.0 * s_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let maha = resid.dot(&s_chol.solve(&resid));
        loglik += -0.5 * (obs.obs_dim() as f64 * two_pi.ln() + log_det + maha);
        let gain = cov.clone() * h.transpose() * s_chol.inverse();
        *m += &gain * resid;
        let eye = DMatrix::identity(n, n);
        let j = &eye - &gain * h;
        *cov = &j * cov.clone() * j.transpose() + &gain * &obs.noise * gain.transpose();
        Ok(())
    };

    if let Some(pos) = obs_nodes.iter().position(|&node| node == 0) {
        handle(&mut m, &mut cov, pos)?;
    }
    for k in 1..grid.n_nodes() {
        m = &a * m + &c;
        cov = &a * cov * a.transpose() + &q;
        if let Some(pos) = obs_nodes.iter().position(|&node| node == k) {
            handle(&mut m, &mut cov, pos)?;
        }
    }
    Ok(loglik)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearModel;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn scalar_ou() -> LinearModel {
        LinearModel::new(dmatrix![1.0], dvector![0.0], dmatrix![1.0]).unwrap()
    }

    #[test]
    fn deterministic_zero_noise_paths_stay_put() {
        let model = LinearModel::new(dmatrix![0.0], dvector![0.0], dmatrix![0.0]).unwrap();
        let sde = ConcreteSde::prior(&model);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let ens = euler_maruyama(&sde, &dvector![2.5], grid, 3, 7).unwrap();
        for p in &ens.paths {
            for x in p {
                assert_eq!(x[0], 2.5);
            }
        }
    }

    #[test]
    fn seed_determinism() {
        let model = scalar_ou();
        let sde = ConcreteSde::prior(&model);
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let a = euler_maruyama(&sde, &dvector![1.0], grid, 4, 99).unwrap();
        let b = euler_maruyama(&sde, &dvector![1.0], grid, 4, 99).unwrap();
        for (pa, pb) in a.paths.iter().zip(&b.paths) {
            for (xa, xb) in pa.iter().zip(pb) {
                assert_eq!(xa, xb);
            }
        }
    }

    #[test]
    fn ou_mean_matches_exact_within_three_se() {
        let model = scalar_ou();
        let sde = ConcreteSde::prior(&model);
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let ens = euler_maruyama(&sde, &dvector![1.0], grid, 20_000, 3).unwrap();
        let emp = empirical_moments(&ens).unwrap();
        let last = grid.n_nodes() - 1;
        let mean = emp.traj.moment_at(last).mean[0];
        let se = emp.se_mean[last][0];
        let exact = (-1.0f64).exp();
        assert!(
            (mean - exact).abs() <= 3.0 * se + 1e-3,
            "mean {mean} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn empirical_constant_ensemble_has_zero_se() {
        let model = LinearModel::new(dmatrix![0.0], dvector![0.0], dmatrix![0.0]).unwrap();
        let sde = ConcreteSde::prior(&model);
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let ens = euler_maruyama(&sde, &dvector![3.0], grid, 10, 1).unwrap();
        let emp = empirical_moments(&ens).unwrap();
        let mp = emp.traj.moment_at(3);
        assert_eq!(mp.mean[0], 3.0);
        assert_eq!(mp.second[(0, 0)], 9.0);
        assert_eq!(emp.se_mean[3][0], 0.0);
    }

    #[test]
    fn zero_noise_observations_read_the_path() {
        let model = scalar_ou();
        let sde = ConcreteSde::prior(&model);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let ens = euler_maruyama(&sde, &dvector![1.0], grid, 1, 5).unwrap();
        let obs = generate_observations(
            &ens.paths[0],
            &grid,
            &[0.2, 0.5, 1.0],
            &dmatrix![1.0],
            &dmatrix![0.0],
            11,
        )
        .unwrap();
        assert!(obs.noise[(0, 0)] == 0.0 || ObservationSet::new(
            obs.times.clone(), obs.values.clone(), obs.obs_matrix.clone(), obs.noise.clone()
        ).is_err());
        for (k, &t) in [0.2, 0.5, 1.0].iter().enumerate() {
            let node = grid.node_index(t).unwrap();
            assert_eq!(obs.values[k][0], ens.paths[0][node][0]);
        }
    }

    #[test]
    fn smoother_without_observations_is_the_prior() {
        let gamma = dmatrix![0.7];
        let mu = dvector![0.4];
        let sigma = dmatrix![0.5];
        let phi0 = MomentPair::from_central(dvector![1.0], dmatrix![0.3]).unwrap();
        let grid = TimeGrid::new(0.0, 2.0, 100).unwrap();
        let obs = ObservationSet::empty(1);
        let sm = exact_linear_smoother(&gamma, &mu, &sigma, &phi0, &obs, grid).unwrap();
        // exact OU mean and variance
        let t = 2.0;
        let exp_m = 0.4 + (1.0 - 0.4) * (-0.7f64 * t).exp();
        let exp_v = 0.3 * (-2.0 * 0.7 * t).exp()
            + 0.25 / (2.0 * 0.7) * (1.0 - (-2.0 * 0.7 * t).exp());
        let mp = sm.moment_at(100);
        assert_relative_eq!(mp.mean[0], exp_m, max_relative = 1e-10);
        assert_relative_eq!(mp.central()[(0, 0)], exp_v, max_relative = 1e-10);
    }

    #[test]
    fn near_exact_observation_pins_the_mean() {
        let gamma = dmatrix![1.0];
        let mu = dvector![0.0];
        let sigma = dmatrix![1.0];
        let phi0 = MomentPair::from_central(dvector![0.0], dmatrix![0.5]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let obs = ObservationSet::new(
            vec![0.5],
            vec![dvector![1.3]],
            dmatrix![1.0],
            dmatrix![1e-12],
        )
        .unwrap();
        let sm = exact_linear_smoother(&gamma, &mu, &sigma, &phi0, &obs, grid).unwrap();
        let node = grid.node_index(0.5).unwrap();
        assert_relative_eq!(sm.moment_at(node).mean[0], 1.3, max_relative = 1e-6);
    }

    #[test]
    fn smoother_variance_never_exceeds_prior_at_observations() {
        let gamma = dmatrix![0.8];
        let mu = dvector![0.0];
        let sigma = dmatrix![0.9];
        let phi0 = MomentPair::from_central(dvector![0.5], dmatrix![0.2]).unwrap();
        let grid = TimeGrid::new(0.0, 4.0, 200).unwrap();
        let obs = ObservationSet::new(
            vec![1.0, 2.0, 3.0],
            vec![dvector![0.6], dvector![-0.4], dvector![0.2]],
            dmatrix![1.0],
            dmatrix![0.09],
        )
        .unwrap();
        let prior = exact_linear_smoother(&gamma, &mu, &sigma, &phi0, &ObservationSet::empty(1), grid)
            .unwrap();
        let post = exact_linear_smoother(&gamma, &mu, &sigma, &phi0, &obs, grid).unwrap();
        for &t in &[1.0, 2.0, 3.0] {
            let k = grid.node_index(t).unwrap();
            assert!(
                post.moment_at(k).central()[(0, 0)] <= prior.moment_at(k).central()[(0, 0)]
            );
        }
    }

    #[test]
    fn weak_order_one_mean_error_on_ou() {
        // deterministic mean recursion: error linear in dt
        let model = LinearModel::new(dmatrix![1.0], dvector![0.0], dmatrix![0.05]).unwrap();
        let sde = ConcreteSde::prior(&model);
        let exact = (-1.0f64).exp();
        let err = |steps: usize| {
            let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let ens = euler_maruyama(&sde, &dvector![1.0], grid, 100_000, 17).unwrap();
            let emp = empirical_moments(&ens).unwrap();
            (emp.traj.moment_at(steps).mean[0] - exact).abs()
        };
        let e1 = err(20);
        let e2 = err(40);
        let ratio = e1 / e2;
        assert!(
            (1.5..=2.5).contains(&ratio),
            "weak order ratio {ratio} (e1 {e1}, e2 {e2})"
        );
    }
}
