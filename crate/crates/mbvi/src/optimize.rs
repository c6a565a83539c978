//! Optimization drivers: robust natural gradient descent for smoothing, the
//! online smoother, the parameter gradient, and robust alternating gradient
//! descent for joint parameter inference.
//!
//! All loops share the same accept/reject rule: a candidate is accepted only
//! if it strictly decreases the objective, the step size grows by `alpha` on
//! acceptance and shrinks by `beta` on rejection. Candidate evaluations that
//! blow up numerically count as rejections, which is what makes the descent
//! robust on stiff closure dynamics. Everything is deterministic: identical
//! inputs produce bit-identical iterate sequences.

use nalgebra::DVector;

use crate::closure::MomentPair;
use crate::models::{self, PriorModel};
use crate::variational::{
    self, adjoint_solve, forward_moments, gradient, natural_gradient, objective_on_trajectory,
    AdjointTrajectory, ControlPath, ControlSpec, MomentTrajectory, ObservationSet,
};
use crate::{Error, Result};

/// Rejections in a row before a robust loop gives up.
const MAX_CONSECUTIVE_REJECTIONS: usize = 50;

/// Accepted steps with relative improvement below `tol_rel` in a row that
/// trigger early stopping.
const STALL_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Natural gradient (Fisher-preconditioned) updates.
    Ngd,
    /// Regular (Euclidean) gradient updates.
    Rgd,
}

/// Step-size schedule and stopping parameters of the robust descent loops.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    /// Initial step size for the control updates.
    pub h0: f64,
    /// Initial step size for the parameter updates (alternating descent).
    pub h1: f64,
    /// Step growth factor on acceptance (> 1).
    pub alpha: f64,
    /// Step shrink factor on rejection (in (0, 1)).
    pub beta: f64,
    /// Iteration budget; outer-loop budget for the alternating descent.
    pub maxiter: usize,
    /// Inner steps per phase of the alternating descent.
    pub k_max: usize,
    /// Relative objective-change stopping threshold.
    pub tol_rel: f64,
    pub mode: GradientMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            h0: 0.1,
            h1: 0.1,
            alpha: 1.2,
            beta: 0.5,
            maxiter: 500,
            k_max: 5,
            tol_rel: 1e-8,
            mode: GradientMode::Ngd,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) || !(self.beta > 0.0 && self.beta < 1.0) || !(self.h0 > 0.0) {
            return Err(Error::Invalid(
                "optimizer needs alpha > 1 > beta > 0 and h0 > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Counters accumulated by a robust descent run.
#[derive(Debug, Clone, Copy, Default)]
pub struct OptDiagnostics {
    pub accepts: usize,
    pub rejects: usize,
    /// Candidate evaluations rejected because the forward solve failed.
    pub candidate_failures: usize,
    /// Natural-gradient solves with an ill-conditioned Fisher block.
    pub ill_conditioned: usize,
    /// PSD clamp events in the final accepted trajectory.
    pub clamp_events: usize,
    pub final_step: f64,
}

/// Result of a smoothing optimization.
#[derive(Debug, Clone)]
pub struct SmoothingResult {
    pub u_star: ControlPath,
    pub phi_star: MomentTrajectory,
    /// Objective after each iteration (the accepted value carried forward).
    pub objective_trace: Vec<f64>,
    /// Whether iteration `i` accepted its candidate.
    pub accepted: Vec<bool>,
    pub final_objective: f64,
    pub diagnostics: OptDiagnostics,
}

/// Numerical blow-ups count as rejections; structural errors propagate.
fn is_rejectable(err: &Error) -> bool {
    matches!(err, Error::NonFiniteState { .. } | Error::Domain(_))
}

struct Candidate {
    j: f64,
    traj: MomentTrajectory,
}

fn evaluate(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u: &ControlPath,
    phi0: &MomentPair,
    obs: &ObservationSet,
) -> Result<Candidate> {
    let traj = forward_moments(model, spec, u, phi0)?;
    let j = objective_on_trajectory(model, spec, u, &traj, obs)?;
    if !j.is_finite() {
        return Err(Error::NonFiniteState { step: 0, t: u.grid.t0() });
    }
    Ok(Candidate { j, traj })
}

/// Robust natural (or regular) gradient descent for variational smoothing.
///
/// Per iteration: forward solve, adjoint solve, candidate update with step
/// `h`; accept if the objective strictly decreases (`h <- alpha h`), else
/// reject and shrink (`h <- beta h`). Stops at `maxiter`, or when the
/// relative improvement of the last five consecutive accepted steps stayed
/// below `tol_rel`.
pub fn robust_ngd(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    phi0: &MomentPair,
    obs: &ObservationSet,
    u_init: ControlPath,
    cfg: &OptimizerConfig,
) -> Result<SmoothingResult> {
    cfg.validate()?;
    let mut u = u_init;
    let mut current = evaluate(model, spec, &u, phi0, obs)?;
    let mut h = cfg.h0;
    let mut diag = OptDiagnostics::default();
    let mut trace = Vec::with_capacity(cfg.maxiter);
    let mut accepted_flags = Vec::with_capacity(cfg.maxiter);
    let mut direction: Option<ControlPath> = None;
    let mut consecutive_rejects = 0usize;
    let mut stall = 0usize;

    for _ in 0..cfg.maxiter {
        if direction.is_none() {
            let adj = adjoint_solve(model, spec, &u, &current.traj, obs)?;
            direction = Some(match cfg.mode {
                GradientMode::Rgd => gradient(model, spec, &u, &current.traj, &adj)?,
                GradientMode::Ngd => {
                    let ng = natural_gradient(model, spec, &u, &current.traj, &adj)?;
                    diag.ill_conditioned += ng.ill_conditioned;
                    ng.direction
                }
            });
        }
        let dir = direction.as_ref().unwrap();
        let mut cand_u = u.clone();
        for k in 0..cand_u.values.len() {
            cand_u.values[k] -= &dir.values[k] * h;
        }
        let cand = match evaluate(model, spec, &cand_u, phi0, obs) {
            Ok(c) => Some(c),
            Err(e) if is_rejectable(&e) => {
                diag.candidate_failures += 1;
                None
            }
            Err(e) => return Err(e),
        };
        let improved = cand.as_ref().map(|c| c.j < current.j).unwrap_or(false);
        if improved {
            let cand = cand.unwrap();
            let rel = (current.j - cand.j) / current.j.abs().max(1e-300);
            stall = if rel < cfg.tol_rel { stall + 1 } else { 0 };
            u = cand_u;
            current = cand;
            h *= cfg.alpha;
            diag.accepts += 1;
            consecutive_rejects = 0;
            direction = None;
        } else {
            h *= cfg.beta;
            diag.rejects += 1;
            consecutive_rejects += 1;
        }
        trace.push(current.j);
        accepted_flags.push(improved);
        if consecutive_rejects >= MAX_CONSECUTIVE_REJECTIONS {
            return Err(Error::NoProgress {
                phase: "control",
                rejections: consecutive_rejects,
            });
        }
        if stall >= STALL_WINDOW {
            break;
        }
    }
    diag.clamp_events = current.traj.diagnostics.clamp_events;
    diag.final_step = h;
    Ok(SmoothingResult {
        u_star: u,
        phi_star: current.traj,
        objective_trace: trace,
        accepted: accepted_flags,
        final_objective: current.j,
        diagnostics: diag,
    })
}

/// Online variational smoothing: observations are included one at a time,
/// running `steps_per_obs` robust iterations per round and warm-starting
/// each round from the previous round's control. The returned result is the
/// final round's (all observations active).
pub fn online_smooth(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    phi0: &MomentPair,
    all_obs: &ObservationSet,
    grid: crate::ode::TimeGrid,
    cfg: &OptimizerConfig,
    steps_per_obs: usize,
) -> Result<SmoothingResult> {
    let round_cfg = OptimizerConfig { maxiter: steps_per_obs, ..cfg.clone() };
    let mut u = ControlPath::zero(grid, spec);
    if all_obs.is_empty() {
        return robust_ngd(model, spec, phi0, all_obs, u, &round_cfg);
    }
    let mut result = None;
    for r in 1..=all_obs.len() {
        let obs_r = all_obs.head(r);
        let res = robust_ngd(model, spec, phi0, &obs_r, u, &round_cfg)?;
        u = res.u_star.clone();
        result = Some(res);
    }
    Ok(result.unwrap())
}

/// Parameter gradient `d J / d theta = int (L_theta - f_theta^T eta) dt`,
/// trapezoidal on the grid, returned in log coordinates for parameters with
/// a positivity flag.
pub fn param_gradient(
    model: &dyn PriorModel,
    spec: &ControlSpec,
    u: &ControlPath,
    traj: &MomentTrajectory,
    adj: &AdjointTrajectory,
) -> Result<DVector<f64>> {
    let n = spec.dim();
    let q = model.primitives().q;
    let grid = u.grid;
    let dt = grid.dt();
    let mut total = DVector::zeros(q);
    for k in 0..grid.n_steps() {
        let u0 = u.u0(k);
        let u1 = u.u1(k);
        for (node, eta) in [(k, adj.right(k)), (k + 1, adj.left(k + 1).clone())] {
            let mp = traj.moment_at(node);
            let with_ttd = matches!(model.rescaling(), models::Rescaling::DiffusionTensor);
            let theta_jac =
                models::eval_theta_jac(model.primitives(), model.closure(), &mp, with_ttd)?;
            let ftheta = variational::theta_jacobian(&theta_jac, &u0, &u1, n);
            let ltheta = variational::kl_cost_theta_grad(model, spec, &u.values[k], &mp)?;
            total += (ltheta - ftheta.transpose() * eta) * (0.5 * dt);
        }
    }
    // chain rule to log coordinates for positive parameters
    let theta = model.params();
    for (i, positive) in model.param_positive().iter().enumerate() {
        if *positive {
            total[i] *= theta[i];
        }
    }
    Ok(total)
}

/// Result of a joint smoothing-and-inference run.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub theta_star: DVector<f64>,
    pub smoothing: SmoothingResult,
    /// Parameter vector after every outer iteration.
    pub theta_trace: Vec<DVector<f64>>,
}

/// Robust alternating gradient descent: `k_max` natural-gradient steps in
/// the controls with the parameters fixed, then `k_max` regular-gradient
/// steps in the parameters with the controls fixed, for `maxiter` outer
/// rounds. Each phase keeps its own adaptive step size across rounds.
pub fn alternating_gd(
    model: &mut dyn PriorModel,
    spec: &ControlSpec,
    phi0: &MomentPair,
    obs: &ObservationSet,
    theta_init: &DVector<f64>,
    u_init: ControlPath,
    cfg: &OptimizerConfig,
) -> Result<InferenceResult> {
    cfg.validate()?;
    model.set_params(theta_init)?;
    let positive = model.param_positive();
    let mut theta = theta_init.clone();
    let mut u = u_init;
    let mut current = evaluate(model, spec, &u, phi0, obs)?;
    let mut h0 = cfg.h0;
    let mut h1 = cfg.h1;
    let mut diag = OptDiagnostics::default();
    let mut trace = Vec::new();
    let mut accepted_flags = Vec::new();
    let mut theta_trace = Vec::with_capacity(cfg.maxiter);
    let mut u_rejects_in_row = 0usize;
    let mut theta_rejects_in_row = 0usize;

    for _ in 0..cfg.maxiter {
        // control phase
        let mut direction: Option<ControlPath> = None;
        for _ in 0..cfg.k_max {
            if direction.is_none() {
                let adj = adjoint_solve(model, spec, &u, &current.traj, obs)?;
                direction = Some(match cfg.mode {
                    GradientMode::Rgd => gradient(model, spec, &u, &current.traj, &adj)?,
                    GradientMode::Ngd => {
                        let ng = natural_gradient(model, spec, &u, &current.traj, &adj)?;
                        diag.ill_conditioned += ng.ill_conditioned;
                        ng.direction
                    }
                });
            }
            let dir = direction.as_ref().unwrap();
            let mut cand_u = u.clone();
            for k in 0..cand_u.values.len() {
                cand_u.values[k] -= &dir.values[k] * h0;
            }
            let cand = match evaluate(model, spec, &cand_u, phi0, obs) {
                Ok(c) => Some(c),
                Err(e) if is_rejectable(&e) => {
                    diag.candidate_failures += 1;
                    None
                }
                Err(e) => return Err(e),
            };
            let improved = cand.as_ref().map(|c| c.j < current.j).unwrap_or(false);
            if improved {
                u = cand_u;
                current = cand.unwrap();
                h0 *= cfg.alpha;
                diag.accepts += 1;
                u_rejects_in_row = 0;
                direction = None;
            } else {
                h0 *= cfg.beta;
                diag.rejects += 1;
                u_rejects_in_row += 1;
                if u_rejects_in_row >= MAX_CONSECUTIVE_REJECTIONS {
                    return Err(Error::NoProgress {
                        phase: "control",
                        rejections: u_rejects_in_row,
                    });
                }
            }
            trace.push(current.j);
            accepted_flags.push(improved);
        }

        // parameter phase
        let mut grad_theta: Option<DVector<f64>> = None;
        for _ in 0..cfg.k_max {
            if grad_theta.is_none() {
                let adj = adjoint_solve(model, spec, &u, &current.traj, obs)?;
                grad_theta = Some(param_gradient(model, spec, &u, &current.traj, &adj)?);
            }
            let g = grad_theta.as_ref().unwrap();
            let mut cand_theta = theta.clone();
            for i in 0..cand_theta.len() {
                if positive[i] {
                    cand_theta[i] = (theta[i].ln() - h1 * g[i]).exp();
                } else {
                    cand_theta[i] = theta[i] - h1 * g[i];
                }
            }
            let cand = match model.set_params(&cand_theta) {
                Ok(()) => match evaluate(model, spec, &u, phi0, obs) {
                    Ok(c) => Some(c),
                    Err(e) if is_rejectable(&e) => {
                        diag.candidate_failures += 1;
                        None
                    }
                    Err(e) => return Err(e),
                },
                Err(_) => {
                    diag.candidate_failures += 1;
                    None
                }
            };
            let improved = cand.as_ref().map(|c| c.j < current.j).unwrap_or(false);
            if improved {
                theta = cand_theta;
                current = cand.unwrap();
                h1 *= cfg.alpha;
                diag.accepts += 1;
                theta_rejects_in_row = 0;
                grad_theta = None;
            } else {
                model.set_params(&theta)?;
                h1 *= cfg.beta;
                diag.rejects += 1;
                theta_rejects_in_row += 1;
                if theta_rejects_in_row >= MAX_CONSECUTIVE_REJECTIONS {
                    return Err(Error::NoProgress {
                        phase: "parameters",
                        rejections: theta_rejects_in_row,
                    });
                }
            }
            trace.push(current.j);
            accepted_flags.push(improved);
        }
        theta_trace.push(theta.clone());
    }
    diag.clamp_events = current.traj.diagnostics.clamp_events;
    diag.final_step = h0;
    Ok(InferenceResult {
        theta_star: theta,
        smoothing: SmoothingResult {
            u_star: u,
            phi_star: current.traj,
            objective_trace: trace,
            accepted: accepted_flags,
            final_objective: current.j,
            diagnostics: diag,
        },
        theta_trace,
    })
}
