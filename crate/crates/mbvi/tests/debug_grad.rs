use mbvi::closure::MomentPair;
use mbvi::models::LinearModel;
use mbvi::ode::TimeGrid;
use mbvi::variational::*;
use nalgebra::{dmatrix, dvector, DVector};

#[test]
fn probe_pieces() {
    let model = LinearModel::new(dmatrix![1.0], dvector![0.5], dmatrix![0.8]).unwrap();
    let spec = ControlSpec::new(1);
    let grid = TimeGrid::new(0.0, 0.4, 20).unwrap();
    let phi0 = MomentPair::from_central(dvector![0.6], dmatrix![0.2]).unwrap();
    let dt = grid.dt();

    // Case A: no observations, constant control -> gradient should be g*u
    let obs0 = ObservationSet::empty(1);
    let mut u = ControlPath::zero(grid, &spec);
    for k in 0..grid.n_steps() {
        u.values[k] = DVector::from_column_slice(&[0.3, -0.2]);
    }
    let traj = forward_moments(&model, &spec, &u, &phi0).unwrap();
    let adj = adjoint_solve(&model, &spec, &u, &traj, &obs0).unwrap();
    let grad = gradient(&model, &spec, &u, &traj, &adj).unwrap();
    // fd
    let h = 1e-5;
    for k in [0usize, 10, 19] {
        for e in 0..2 {
            let mut up = u.clone();
            up.values[k][e] += h;
            let mut dn = u.clone();
            dn.values[k][e] -= h;
            let jp = objective(&model, &spec, &up, &phi0, &obs0).unwrap();
            let jm = objective(&model, &spec, &dn, &phi0, &obs0).unwrap();
            let fd = (jp - jm) / (2.0 * h * dt);
            println!("A k={k} e={e}: adjoint {:+.6} fd {:+.6}", grad.values[k][e], fd);
        }
    }

    // Case B: one observation at final node, u = 0 -> gradient = -f_u^T eta
    let obs1 = ObservationSet::new(
        vec![0.4],
        vec![dvector![1.2]],
        dmatrix![1.0],
        dmatrix![0.05],
    )
    .unwrap();
    let u0 = ControlPath::zero(grid, &spec);
    let traj = forward_moments(&model, &spec, &u0, &phi0).unwrap();
    let adj = adjoint_solve(&model, &spec, &u0, &traj, &obs1).unwrap();
    println!("eta at T (stored, post-jump): {:?}", adj.left(20).as_slice());
    println!("eta at 0: {:?}", adj.left(0).as_slice());
    let grad = gradient(&model, &spec, &u0, &traj, &adj).unwrap();
    for k in [0usize, 10, 19] {
        for e in 0..2 {
            let mut up = u0.clone();
            up.values[k][e] += h;
            let mut dn = u0.clone();
            dn.values[k][e] -= h;
            let jp = objective(&model, &spec, &up, &phi0, &obs1).unwrap();
            let jm = objective(&model, &spec, &dn, &phi0, &obs1).unwrap();
            let fd = (jp - jm) / (2.0 * h * dt);
            println!("B k={k} e={e}: adjoint {:+.6} fd {:+.6}", grad.values[k][e], fd);
        }
    }
}
