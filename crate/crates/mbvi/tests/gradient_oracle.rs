//! Finite-difference oracles for the adjoint-based control and parameter
//! gradients, exercised on small instances of all four model families.

use mbvi::closure::MomentPair;
use mbvi::models::{
    CleModel, DoubleWellModel, GbmModel, LinearFree, LinearModel, PriorModel, Rescaling,
    Stoichiometry,
};
use mbvi::ode::TimeGrid;
use mbvi::variational::{
    adjoint_solve, forward_moments, gradient, objective, ControlPath, ControlSpec, ObservationSet,
};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Deterministic pseudo-random control path.
fn random_control(grid: TimeGrid, spec: &ControlSpec, scale: f64, seed: u64) -> ControlPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..grid.n_steps())
        .map(|_| DVector::from_fn(spec.control_dim(), |_, _| scale * (rng.random::<f64>() - 0.5)))
        .collect();
    ControlPath::new(grid, values).unwrap()
}

/// Central finite differences of J per control entry, divided by dt so the
/// result is comparable to the per-interval gradient density.
fn fd_control_gradient(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u: &ControlPath,
    phi0: &MomentPair,
    obs: &ObservationSet,
    h: f64,
) -> ControlPath {
    let dt = u.grid.dt();
    let mut out = Vec::with_capacity(u.values.len());
    for k in 0..u.values.len() {
        let mut row = DVector::zeros(u.values[k].len());
        for e in 0..u.values[k].len() {
            let mut up = u.clone();
            up.values[k][e] += h;
            let mut dn = u.clone();
            dn.values[k][e] -= h;
            let jp = objective(model, spec, &up, phi0, obs).unwrap();
            let jm = objective(model, spec, &dn, phi0, obs).unwrap();
            row[e] = (jp - jm) / (2.0 * h * dt);
        }
        out.push(row);
    }
    ControlPath::new(u.grid, out).unwrap()
}

fn check_gradient(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u: &ControlPath,
    phi0: &MomentPair,
    obs: &ObservationSet,
    rtol: f64,
) {
    let traj = forward_moments(model, spec, u, phi0).unwrap();
    assert_eq!(traj.diagnostics.clamp_events, 0, "clamp fired inside a gradient test instance");
    let adj = adjoint_solve(model, spec, u, &traj, obs).unwrap();
    let grad = gradient(model, spec, u, &traj, &adj).unwrap();
    let fd = fd_control_gradient(model, spec, u, phi0, obs, 1e-5);

    let scale = fd
        .values
        .iter()
        .flat_map(|v| v.iter())
        .map(|x| x.abs())
        .fold(0.0f64, f64::max)
        .max(1e-10);
    for k in 0..u.values.len() {
        for e in 0..u.values[k].len() {
            let a = grad.values[k][e];
            let b = fd.values[k][e];
            let denom = b.abs().max(0.05 * scale);
            assert!(
                (a - b).abs() / denom <= rtol,
                "interval {k} entry {e}: adjoint {a} vs fd {b} (scale {scale})"
            );
        }
    }
}

#[test]
fn linear_identity_rescaling_gradient() {
    let model = LinearModel::new(
        dmatrix![1.0],
        dvector![0.5],
        dmatrix![0.8],
    )
    .unwrap();
    let spec = ControlSpec::new(1);
    let grid = TimeGrid::new(0.0, 0.4, 20).unwrap();
    let obs = ObservationSet::new(
        vec![0.1, 0.24, 0.4],
        vec![dvector![0.9], dvector![0.3], dvector![0.7]],
        dmatrix![1.0],
        dmatrix![0.05],
    )
    .unwrap();
    let phi0 = MomentPair::from_central(dvector![0.6], dmatrix![0.2]).unwrap();
    let u = random_control(grid, &spec, 0.8, 1);
    check_gradient(&model, &spec, &u, &phi0, &obs, 1e-3);
}

#[test]
fn linear_two_dimensional_gradient() {
    let model = LinearModel::new(
        dmatrix![0.9, 0.2; -0.1, 1.1],
        dvector![0.5, -0.5],
        dmatrix![0.6, 0.1; 0.0, 0.5],
    )
    .unwrap();
    let spec = ControlSpec::new(2);
    let grid = TimeGrid::new(0.0, 0.3, 20).unwrap();
    let obs = ObservationSet::new(
        vec![0.15, 0.3],
        vec![dvector![0.8, -0.2], dvector![0.4, -0.6]],
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * 0.1,
    )
    .unwrap();
    let phi0 =
        MomentPair::from_central(dvector![0.6, -0.4], dmatrix![0.3, 0.05; 0.05, 0.2]).unwrap();
    let u = random_control(grid, &spec, 0.6, 2);
    check_gradient(&model, &spec, &u, &phi0, &obs, 1e-3);
}

#[test]
fn linear_factor_rescaling_gradient() {
    let model = LinearModel::with_options(
        dmatrix![1.2],
        dvector![0.0],
        dmatrix![0.7],
        Rescaling::DiffusionFactor,
        LinearFree::default(),
    )
    .unwrap();
    let spec = ControlSpec::new(1);
    let grid = TimeGrid::new(0.0, 0.5, 20).unwrap();
    let obs = ObservationSet::new(
        vec![0.25, 0.5],
        vec![dvector![0.5], dvector![-0.3]],
        dmatrix![1.0],
        dmatrix![0.04],
    )
    .unwrap();
    let phi0 = MomentPair::from_central(dvector![0.2], dmatrix![0.15]).unwrap();
    let u = random_control(grid, &spec, 0.7, 3);
    check_gradient(&model, &spec, &u, &phi0, &obs, 1e-3);
}

#[test]
fn double_well_gradient() {
    let model = DoubleWellModel::new(4.0, 1.0).unwrap();
    let spec = ControlSpec::new(1);
    let grid = TimeGrid::new(0.0, 0.1, 20).unwrap();
    let obs = ObservationSet::new(
        vec![0.025, 0.06, 0.1],
        vec![dvector![-0.8], dvector![0.2], dvector![0.9]],
        dmatrix![1.0],
        dmatrix![0.16],
    )
    .unwrap();
    let phi0 = MomentPair::from_central(dvector![-0.9], dmatrix![0.05]).unwrap();
    let u = random_control(grid, &spec, 0.5, 4);
    check_gradient(&model, &spec, &u, &phi0, &obs, 1e-3);
}

#[test]
fn gbm_gradient() {
    let model = GbmModel::new(
        dvector![0.02, -0.01],
        dmatrix![0.25, 0.0; 0.08, 0.2],
    )
    .unwrap();
    let spec = ControlSpec::new(2);
    let grid = TimeGrid::new(0.0, 0.4, 16).unwrap();
    let obs = ObservationSet::new(
        vec![0.2, 0.4],
        vec![dvector![1.1, 0.9], dvector![1.05, 0.95]],
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * 0.01,
    )
    .unwrap();
    let phi0 = MomentPair::from_central(
        dvector![1.0, 1.0],
        dmatrix![0.01, 0.002; 0.002, 0.012],
    )
    .unwrap();
    let u = random_control(grid, &spec, 0.3, 5);
    check_gradient(&model, &spec, &u, &phi0, &obs, 1e-3);
}

#[test]
fn cle_gradient() {
    let model =
        CleModel::new(Stoichiometry::lotka_volterra(), dvector![0.5, 0.0025, 0.3]).unwrap();
    let spec = ControlSpec::new(2);
    let grid = TimeGrid::new(0.0, 0.5, 10).unwrap();
    let obs = ObservationSet::new(
        vec![0.25, 0.5],
        vec![dvector![75.0, 77.0], dvector![80.0, 74.0]],
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * 9.0,
    )
    .unwrap();
    let phi0 = MomentPair::from_central(
        dvector![71.0, 79.0],
        dmatrix![4.0, 0.5; 0.5, 4.0],
    )
    .unwrap();
    // controls scaled down: the tensor rescaling multiplies by D ~ O(50)
    let u = random_control(grid, &spec, 2e-4, 6);
    check_gradient(&model, &spec, &u, &phi0, &obs, 1e-3);
}
