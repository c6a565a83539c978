//! Prior SDE model families.
//!
//! Each model exposes the closed-moment expectations needed by the controlled
//! moment dynamics — `E[a(Z)]`, `E[a(Z) Z^T]`, `E[D(Z)]` and the rescaling
//! couplings `E[R(Z)]`, `E[R(Z)_ik Z_l]`, `E[R(Z)_ik Z_l Z_j]` — as explicit
//! polynomials in closure moments. Values and the analytic Jacobians with
//! respect to the packed moment coordinates and the model parameters are all
//! produced by one shared evaluator, so every model expectation is auditable
//! against the closure operation it delegates to.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::closure::{self, ClosureKind, MomentGrad, MomentPair, MultiIndex};
use crate::la::{self, Tensor3, Tensor4};
use crate::{Error, Result};

mod cle;
mod double_well;
mod gbm;
mod linear;

pub use cle::{CleModel, Stoichiometry};
pub use double_well::DoubleWellModel;
pub use gbm::GbmModel;
pub use linear::{LinearFree, LinearModel};

/// Rescaling matrix `R(x)` applied to the control term of the drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rescaling {
    /// `R = I`; requires a constant, invertible diffusion tensor.
    Identity,
    /// `R = b`; the path-KL weight becomes independent of the diffusion.
    DiffusionFactor,
    /// `R = D`; avoids the inverse diffusion tensor for state-dependent noise.
    DiffusionTensor,
}

/// One term `coeff(theta) * E[Z^alpha]` of a moment polynomial.
#[derive(Debug, Clone)]
pub struct Term {
    pub coeff: f64,
    /// Derivative of `coeff` with respect to each model parameter.
    pub dcoeff: DVector<f64>,
    pub alpha: MultiIndex,
}

/// Sum of closure moments with parameter-dependent coefficients.
#[derive(Debug, Clone, Default)]
pub struct MomentPoly {
    pub terms: Vec<Term>,
}

impl MomentPoly {
    pub fn new() -> Self {
        MomentPoly { terms: Vec::new() }
    }

    pub fn push(&mut self, coeff: f64, dcoeff: DVector<f64>, alpha: MultiIndex) {
        self.terms.push(Term { coeff, dcoeff, alpha });
    }

    /// Term with a parameter-independent coefficient.
    pub fn push_const(&mut self, q: usize, coeff: f64, alpha: MultiIndex) {
        self.terms.push(Term { coeff, dcoeff: DVector::zeros(q), alpha });
    }
}

/// Moment-polynomial representation of all model expectations, rebuilt
/// whenever the parameters change. Flattened tensors are row-major.
#[derive(Debug, Clone)]
pub struct Primitives {
    pub n: usize,
    /// Parameter count.
    pub q: usize,
    /// `E[a(Z)]`, length n.
    pub a_mean: Vec<MomentPoly>,
    /// `E[a(Z) Z^T]`, length n*n.
    pub a_cross: Vec<MomentPoly>,
    /// `E[D(Z)]`, length n*n.
    pub d_mean: Vec<MomentPoly>,
    /// `E[R(Z)]`, length n*n.
    pub r0: Vec<MomentPoly>,
    /// `E[R(Z)_ik Z_l]`, length n*n*n.
    pub r1: Vec<MomentPoly>,
    /// `E[R(Z)_ik Z_l Z_j]`, length n*n*n*n.
    pub r2: Vec<MomentPoly>,
    /// `E[T_a T_b D(Z)_ij]` for features T = (1, x), length (n+1)^2*n*n.
    /// Only populated for the diffusion-tensor rescaling.
    pub ttd: Option<Vec<MomentPoly>>,
}

/// Numeric values of the model expectations at a moment pair.
#[derive(Debug, Clone)]
pub struct NumPrimitives {
    pub a_mean: DVector<f64>,
    pub a_cross: DMatrix<f64>,
    pub d_mean: DMatrix<f64>,
    pub r0: DMatrix<f64>,
    pub r1: Tensor3,
    pub r2: Tensor4,
    /// Shape (n+1, n+1, n, n) when present.
    pub ttd: Option<Tensor4>,
}

/// Jacobians of the flattened expectations with respect to the packed
/// moment coordinates `(m, vech M)`; one row per flattened entry.
#[derive(Debug, Clone)]
pub struct PhiJacPrimitives {
    pub a_mean: DMatrix<f64>,
    pub a_cross: DMatrix<f64>,
    pub d_mean: DMatrix<f64>,
    pub r0: DMatrix<f64>,
    pub r1: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    pub ttd: Option<DMatrix<f64>>,
}

/// Jacobians of the flattened expectations with respect to the parameters.
#[derive(Debug, Clone)]
pub struct ThetaJacPrimitives {
    pub a_mean: DMatrix<f64>,
    pub a_cross: DMatrix<f64>,
    pub d_mean: DMatrix<f64>,
    pub r0: DMatrix<f64>,
    pub r1: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    pub ttd: Option<DMatrix<f64>>,
}

/// Closure-moment cache shared across all polynomials of one evaluation.
struct MomentCache<'a> {
    kind: ClosureKind,
    mp: &'a MomentPair,
    vals: HashMap<Vec<u8>, f64>,
    grads: HashMap<Vec<u8>, MomentGrad>,
}

impl<'a> MomentCache<'a> {
    fn new(kind: ClosureKind, mp: &'a MomentPair) -> Self {
        MomentCache { kind, mp, vals: HashMap::new(), grads: HashMap::new() }
    }

    fn value(&mut self, alpha: &MultiIndex) -> Result<f64> {
        if let Some(&v) = self.vals.get(&alpha.0) {
            return Ok(v);
        }
        let v = closure::moment(self.kind, self.mp, alpha)?;
        self.vals.insert(alpha.0.clone(), v);
        Ok(v)
    }

    fn grad(&mut self, alpha: &MultiIndex) -> Result<MomentGrad> {
        if let Some(g) = self.grads.get(&alpha.0) {
            return Ok(g.clone());
        }
        let g = closure::moment_grad(self.kind, self.mp, alpha)?;
        self.grads.insert(alpha.0.clone(), g.clone());
        Ok(g)
    }
}

fn eval_poly(cache: &mut MomentCache, poly: &MomentPoly) -> Result<f64> {
    let mut acc = 0.0;
    for t in &poly.terms {
        if t.coeff != 0.0 {
            acc += t.coeff * cache.value(&t.alpha)?;
        }
    }
    Ok(acc)
}

fn eval_poly_phi_jac(cache: &mut MomentCache, poly: &MomentPoly, out: &mut [f64]) -> Result<f64> {
    let mut acc = 0.0;
    for t in &poly.terms {
        if t.coeff == 0.0 {
            continue;
        }
        let g = cache.grad(&t.alpha)?;
        acc += t.coeff * g.value;
        let n = g.d_mean.len();
        for i in 0..n {
            out[i] += t.coeff * g.d_mean[i];
        }
        for i in 0..g.d_second.len() {
            out[n + i] += t.coeff * g.d_second[i];
        }
    }
    Ok(acc)
}

fn eval_poly_theta_jac(cache: &mut MomentCache, poly: &MomentPoly, out: &mut [f64]) -> Result<()> {
    for t in &poly.terms {
        let mut any = false;
        for q in 0..t.dcoeff.len() {
            if t.dcoeff[q] != 0.0 {
                any = true;
                break;
            }
        }
        if !any {
            continue;
        }
        let v = cache.value(&t.alpha)?;
        for q in 0..t.dcoeff.len() {
            out[q] += t.dcoeff[q] * v;
        }
    }
    Ok(())
}

/// Evaluate all primitive expectations at `mp`.
pub fn eval_values(
    prims: &Primitives,
    kind: ClosureKind,
    mp: &MomentPair,
    with_ttd: bool,
) -> Result<NumPrimitives> {
    let n = prims.n;
    let mut cache = MomentCache::new(kind, mp);
    let mut a_mean = DVector::zeros(n);
    for i in 0..n {
        a_mean[i] = eval_poly(&mut cache, &prims.a_mean[i])?;
    }
    let mut a_cross = DMatrix::zeros(n, n);
    let mut d_mean = DMatrix::zeros(n, n);
    let mut r0 = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a_cross[(i, j)] = eval_poly(&mut cache, &prims.a_cross[i * n + j])?;
            d_mean[(i, j)] = eval_poly(&mut cache, &prims.d_mean[i * n + j])?;
            r0[(i, j)] = eval_poly(&mut cache, &prims.r0[i * n + j])?;
        }
    }
    let mut r1 = Tensor3::zeros(n, n, n);
    for i in 0..n {
        for k in 0..n {
            for l in 0..n {
                r1.set(i, k, l, eval_poly(&mut cache, &prims.r1[(i * n + k) * n + l])?);
            }
        }
    }
    let mut r2 = Tensor4::zeros(n, n, n, n);
    for i in 0..n {
        for k in 0..n {
            for l in 0..n {
                for j in 0..n {
                    let idx = ((i * n + k) * n + l) * n + j;
                    r2.set(i, k, l, j, eval_poly(&mut cache, &prims.r2[idx])?);
                }
            }
        }
    }
    let ttd = if with_ttd {
        prims.ttd.as_ref().map(|polys| -> Result<Tensor4> {
            let m = n + 1;
            let mut t = Tensor4::zeros(m, m, n, n);
            for a in 0..m {
                for b in 0..m {
                    for i in 0..n {
                        for j in 0..n {
                            let idx = ((a * m + b) * n + i) * n + j;
                            t.set(a, b, i, j, eval_poly(&mut cache, &polys[idx])?);
                        }
                    }
                }
            }
            Ok(t)
        })
        .transpose()?
    } else {
        None
    };
    Ok(NumPrimitives { a_mean, a_cross, d_mean, r0, r1, r2, ttd })
}

fn jac_block(
    cache: &mut MomentCache,
    polys: &[MomentPoly],
    p: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let rows = polys.len();
    let mut vals = DVector::zeros(rows);
    let mut jac = DMatrix::zeros(rows, p);
    let mut row = vec![0.0; p];
    for (r, poly) in polys.iter().enumerate() {
        row.iter_mut().for_each(|x| *x = 0.0);
        vals[r] = eval_poly_phi_jac(cache, poly, &mut row)?;
        for c in 0..p {
            jac[(r, c)] = row[c];
        }
    }
    Ok((vals, jac))
}

/// Evaluate values and moment-coordinate Jacobians in one pass.
pub fn eval_with_phi_jac(
    prims: &Primitives,
    kind: ClosureKind,
    mp: &MomentPair,
    with_ttd: bool,
) -> Result<(NumPrimitives, PhiJacPrimitives)> {
    let n = prims.n;
    let p = n + la::sym_len(n);
    let mut cache = MomentCache::new(kind, mp);

    let (am_v, am_j) = jac_block(&mut cache, &prims.a_mean, p)?;
    let (ac_v, ac_j) = jac_block(&mut cache, &prims.a_cross, p)?;
    let (dm_v, dm_j) = jac_block(&mut cache, &prims.d_mean, p)?;
    let (r0_v, r0_j) = jac_block(&mut cache, &prims.r0, p)?;
    let (r1_v, r1_j) = jac_block(&mut cache, &prims.r1, p)?;
    let (r2_v, r2_j) = jac_block(&mut cache, &prims.r2, p)?;
    let ttd_pair = if with_ttd {
        match prims.ttd.as_ref() {
            Some(polys) => Some(jac_block(&mut cache, polys, p)?),
            None => None,
        }
    } else {
        None
    };

    let mut r1_t = Tensor3::zeros(n, n, n);
    for i in 0..n {
        for k in 0..n {
            for l in 0..n {
                r1_t.set(i, k, l, r1_v[(i * n + k) * n + l]);
            }
        }
    }
    let mut r2_t = Tensor4::zeros(n, n, n, n);
    for i in 0..n {
        for k in 0..n {
            for l in 0..n {
                for j in 0..n {
                    r2_t.set(i, k, l, j, r2_v[((i * n + k) * n + l) * n + j]);
                }
            }
        }
    }
    let (ttd_t, ttd_j) = match ttd_pair {
        Some((v, j)) => {
            let m = n + 1;
            let mut t = Tensor4::zeros(m, m, n, n);
            for a in 0..m {
                for b in 0..m {
                    for i in 0..n {
                        for jj in 0..n {
                            t.set(a, b, i, jj, v[((a * m + b) * n + i) * n + jj]);
                        }
                    }
                }
            }
            (Some(t), Some(j))
        }
        None => (None, None),
    };

    let num = NumPrimitives {
        a_mean: am_v,
        a_cross: DMatrix::from_fn(n, n, |i, j| ac_v[i * n + j]),
        d_mean: DMatrix::from_fn(n, n, |i, j| dm_v[i * n + j]),
        r0: DMatrix::from_fn(n, n, |i, j| r0_v[i * n + j]),
        r1: r1_t,
        r2: r2_t,
        ttd: ttd_t,
    };
    let jac = PhiJacPrimitives {
        a_mean: am_j,
        a_cross: ac_j,
        d_mean: dm_j,
        r0: r0_j,
        r1: r1_j,
        r2: r2_j,
        ttd: ttd_j,
    };
    Ok((num, jac))
}

fn theta_block(cache: &mut MomentCache, polys: &[MomentPoly], q: usize) -> Result<DMatrix<f64>> {
    let rows = polys.len();
    let mut jac = DMatrix::zeros(rows, q);
    let mut row = vec![0.0; q];
    for (r, poly) in polys.iter().enumerate() {
        row.iter_mut().for_each(|x| *x = 0.0);
        eval_poly_theta_jac(cache, poly, &mut row)?;
        for c in 0..q {
            jac[(r, c)] = row[c];
        }
    }
    Ok(jac)
}

/// Evaluate parameter Jacobians of all primitive expectations at `mp`.
pub fn eval_theta_jac(
    prims: &Primitives,
    kind: ClosureKind,
    mp: &MomentPair,
    with_ttd: bool,
) -> Result<ThetaJacPrimitives> {
    let q = prims.q;
    let mut cache = MomentCache::new(kind, mp);
    Ok(ThetaJacPrimitives {
        a_mean: theta_block(&mut cache, &prims.a_mean, q)?,
        a_cross: theta_block(&mut cache, &prims.a_cross, q)?,
        d_mean: theta_block(&mut cache, &prims.d_mean, q)?,
        r0: theta_block(&mut cache, &prims.r0, q)?,
        r1: theta_block(&mut cache, &prims.r1, q)?,
        r2: theta_block(&mut cache, &prims.r2, q)?,
        ttd: if with_ttd {
            match prims.ttd.as_ref() {
                Some(polys) => Some(theta_block(&mut cache, polys, q)?),
                None => None,
            }
        } else {
            None
        },
    })
}

/// A prior SDE model with closed-moment expectations under a fixed closure.
///
/// Instances are immutable between `set_params` calls; all evaluations are
/// pure, so models are safe to share across threads.
pub trait PriorModel {
    fn dim(&self) -> usize;
    fn closure(&self) -> ClosureKind;
    fn rescaling(&self) -> Rescaling;

    /// Current parameter vector.
    fn params(&self) -> DVector<f64>;
    /// Replace the parameters and rebuild the moment polynomials.
    fn set_params(&mut self, theta: &DVector<f64>) -> Result<()>;
    /// Per-entry positivity flags (positive parameters are optimized in log
    /// coordinates by the inference drivers).
    fn param_positive(&self) -> Vec<bool>;
    fn param_names(&self) -> Vec<String>;

    /// Moment-polynomial form of the model expectations.
    fn primitives(&self) -> &Primitives;

    /// Constant diffusion tensor `D = b b^T` if the model has one.
    fn constant_diffusion(&self) -> Option<DMatrix<f64>> {
        None
    }

    /// Pointwise drift `a(x)` for simulation.
    fn drift_at(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Pointwise diffusion factor `b(x)` for simulation.
    fn diffusion_factor_at(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Whether states must stay positive (enables the simulation guard).
    fn positive_state(&self) -> bool {
        matches!(self.closure(), ClosureKind::LogNormal)
    }

    /// Pointwise rescaling matrix `R(x)` for the controlled drift overlay.
    fn rescale_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self.rescaling() {
            Rescaling::Identity => DMatrix::identity(self.dim(), self.dim()),
            Rescaling::DiffusionFactor => self.diffusion_factor_at(x),
            Rescaling::DiffusionTensor => {
                let b = self.diffusion_factor_at(x);
                &b * b.transpose()
            }
        }
    }
}

/// Populate the rescaling tensors for a constant matrix `R(x) = r_mat`,
/// optionally with the parameter derivative `dr[(i,k)][q]` of its entries.
pub(crate) fn constant_rescale_polys(
    prims: &mut Primitives,
    r_mat: &DMatrix<f64>,
    dr: Option<&dyn Fn(usize, usize) -> DVector<f64>>,
) {
    let n = prims.n;
    let q = prims.q;
    let zero_alpha = MultiIndex(vec![0u8; n]);
    for i in 0..n {
        for k in 0..n {
            let coeff = r_mat[(i, k)];
            let dcoeff = dr.map(|f| f(i, k)).unwrap_or_else(|| DVector::zeros(q));
            let mut p0 = MomentPoly::new();
            p0.push(coeff, dcoeff.clone(), zero_alpha.clone());
            prims.r0[i * n + k] = p0;
            for l in 0..n {
                let mut p1 = MomentPoly::new();
                p1.push(coeff, dcoeff.clone(), MultiIndex::unit(n, l));
                prims.r1[(i * n + k) * n + l] = p1;
                for j in 0..n {
                    let mut p2 = MomentPoly::new();
                    p2.push(
                        coeff,
                        dcoeff.clone(),
                        MultiIndex::unit(n, l).plus(&MultiIndex::unit(n, j)),
                    );
                    prims.r2[((i * n + k) * n + l) * n + j] = p2;
                }
            }
        }
    }
}

pub(crate) fn empty_primitives(n: usize, q: usize, with_ttd: bool) -> Primitives {
    Primitives {
        n,
        q,
        a_mean: vec![MomentPoly::new(); n],
        a_cross: vec![MomentPoly::new(); n * n],
        d_mean: vec![MomentPoly::new(); n * n],
        r0: vec![MomentPoly::new(); n * n],
        r1: vec![MomentPoly::new(); n * n * n],
        r2: vec![MomentPoly::new(); n * n * n * n],
        ttd: with_ttd.then(|| vec![MomentPoly::new(); (n + 1) * (n + 1) * n * n]),
    }
}

pub(crate) fn check_square(mat: &DMatrix<f64>, n: usize, name: &str) -> Result<()> {
    if mat.nrows() != n || mat.ncols() != n {
        return Err(Error::Dimension(format!(
            "{name} must be {n} x {n}, got {} x {}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    Ok(())
}
