//! Chemical Langevin population models
//! `dX = V^T h(X) dt + sqrt(V^T diag(h(X)) V) dW` with mass-action
//! propensities approximated by monomials `h_k(x) = c_k x^{s_k}`.
//!
//! The diffusion factor is not available in closed form, so the control is
//! rescaled by the diffusion tensor `D(x)` itself. Every expectation needed
//! by the moment dynamics and by the path-KL weight is then a log-normal
//! closure moment of the propensity exponents plus a low-order shift.

use nalgebra::{DMatrix, DVector};

use crate::closure::{ClosureKind, MultiIndex};
use crate::la::psd_sqrt;
use crate::models::{empty_primitives, MomentPoly, PriorModel, Primitives, Rescaling};
use crate::{Error, Result};

/// Reaction network stoichiometry: substrate counts `S`, product counts `P`
/// (both r x d, entries <= 2) and the net change matrix `V = P - S`.
#[derive(Debug, Clone)]
pub struct Stoichiometry {
    pub substrates: Vec<Vec<u8>>,
    pub products: Vec<Vec<u8>>,
}

impl Stoichiometry {
    pub fn new(substrates: Vec<Vec<u8>>, products: Vec<Vec<u8>>) -> Result<Self> {
        if substrates.is_empty() || substrates.len() != products.len() {
            return Err(Error::Dimension(
                "substrate and product matrices need the same non-zero number of reactions".into(),
            ));
        }
        let d = substrates[0].len();
        if d == 0 {
            return Err(Error::Dimension("stoichiometry needs at least one species".into()));
        }
        for row in substrates.iter().chain(products.iter()) {
            if row.len() != d {
                return Err(Error::Dimension("ragged stoichiometry rows".into()));
            }
        }
        if substrates.iter().flatten().any(|&s| s > 2) {
            return Err(Error::Invalid("substrate counts above 2 are not supported".into()));
        }
        Ok(Stoichiometry { substrates, products })
    }

    pub fn n_reactions(&self) -> usize {
        self.substrates.len()
    }

    pub fn n_species(&self) -> usize {
        self.substrates[0].len()
    }

    /// Net change matrix `V = P - S` (reactions x species).
    pub fn net_change(&self) -> DMatrix<f64> {
        let (r, d) = (self.n_reactions(), self.n_species());
        DMatrix::from_fn(r, d, |k, i| {
            self.products[k][i] as f64 - self.substrates[k][i] as f64
        })
    }

    /// The stochastic Lotka-Volterra predator-prey network.
    pub fn lotka_volterra() -> Self {
        Stoichiometry::new(
            vec![vec![1, 0], vec![1, 1], vec![0, 1]],
            vec![vec![2, 0], vec![0, 2], vec![0, 0]],
        )
        .unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct CleModel {
    stoich: Stoichiometry,
    rates: DVector<f64>,
    v: DMatrix<f64>,
    prims: Primitives,
}

impl CleModel {
    pub fn new(stoich: Stoichiometry, rates: DVector<f64>) -> Result<Self> {
        if rates.len() != stoich.n_reactions() {
            return Err(Error::Dimension(format!(
                "{} rate constants needed for {} reactions",
                stoich.n_reactions(),
                stoich.n_reactions()
            )));
        }
        if rates.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::Invalid("rate constants must be positive".into()));
        }
        let v = stoich.net_change();
        let n = stoich.n_species();
        let q = rates.len();
        let mut model =
            CleModel { stoich, rates, v, prims: empty_primitives(n, q, true) };
        model.rebuild();
        Ok(model)
    }

    pub fn stoichiometry(&self) -> &Stoichiometry {
        &self.stoich
    }

    fn propensity_alpha(&self, k: usize) -> MultiIndex {
        MultiIndex(self.stoich.substrates[k].clone())
    }

    /// Pointwise monomial propensities `h_k(x) = c_k prod_i x_i^{s_ki}`.
    pub fn propensities_at(&self, x: &DVector<f64>) -> DVector<f64> {
        let r = self.stoich.n_reactions();
        DVector::from_fn(r, |k, _| {
            let mut h = self.rates[k];
            for (i, &s) in self.stoich.substrates[k].iter().enumerate() {
                for _ in 0..s {
                    h *= x[i];
                }
            }
            h
        })
    }

    /// Pointwise diffusion tensor `D(x) = V^T diag(h(x)) V`.
    pub fn diffusion_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let h = self.propensities_at(x);
        let n = self.dim();
        let mut d = DMatrix::zeros(n, n);
        for k in 0..self.stoich.n_reactions() {
            for i in 0..n {
                for j in 0..n {
                    d[(i, j)] += h[k] * self.v[(k, i)] * self.v[(k, j)];
                }
            }
        }
        d
    }

    fn rebuild(&mut self) {
        let n = self.dim();
        let r = self.stoich.n_reactions();
        let q = r;
        let mut prims = empty_primitives(n, q, true);
        let v = self.v.clone();
        let c = self.rates.clone();

        // every expectation is sum_k coeff(V) c_k E[Z^{s_k + shift}]
        let add = |poly: &mut MomentPoly, k: usize, weight: f64, shift: &MultiIndex| {
            if weight == 0.0 {
                return;
            }
            let mut dcoeff = DVector::zeros(q);
            dcoeff[k] = weight;
            poly.push(weight * c[k], dcoeff, self.propensity_alpha(k).plus(shift));
        };
        let zero = MultiIndex(vec![0u8; n]);

        for i in 0..n {
            let mut am = MomentPoly::new();
            for k in 0..r {
                add(&mut am, k, v[(k, i)], &zero);
            }
            prims.a_mean[i] = am;
            for j in 0..n {
                let ej = MultiIndex::unit(n, j);
                let mut ac = MomentPoly::new();
                let mut dm = MomentPoly::new();
                for k in 0..r {
                    add(&mut ac, k, v[(k, i)], &ej);
                    add(&mut dm, k, v[(k, i)] * v[(k, j)], &zero);
                }
                prims.a_cross[i * n + j] = ac;
                prims.d_mean[i * n + j] = dm.clone();
                // R = D, so the zeroth coupling tensor is E[D] itself
                prims.r0[i * n + j] = dm;
            }
        }
        for i in 0..n {
            for kk in 0..n {
                for l in 0..n {
                    let el = MultiIndex::unit(n, l);
                    let mut p1 = MomentPoly::new();
                    for k in 0..r {
                        add(&mut p1, k, v[(k, i)] * v[(k, kk)], &el);
                    }
                    prims.r1[(i * n + kk) * n + l] = p1;
                    for j in 0..n {
                        let shift = MultiIndex::unit(n, l).plus(&MultiIndex::unit(n, j));
                        let mut p2 = MomentPoly::new();
                        for k in 0..r {
                            add(&mut p2, k, v[(k, i)] * v[(k, kk)], &shift);
                        }
                        prims.r2[((i * n + kk) * n + l) * n + j] = p2;
                    }
                }
            }
        }

        // E[T_a T_b D_ij] for features T = (1, x_1, .., x_n)
        let m = n + 1;
        let feature_alpha = |a: usize| -> MultiIndex {
            if a == 0 {
                zero.clone()
            } else {
                MultiIndex::unit(n, a - 1)
            }
        };
        let ttd = prims.ttd.as_mut().unwrap();
        for a in 0..m {
            for b in 0..m {
                let shift = feature_alpha(a).plus(&feature_alpha(b));
                for i in 0..n {
                    for j in 0..n {
                        let mut poly = MomentPoly::new();
                        for k in 0..r {
                            add(&mut poly, k, v[(k, i)] * v[(k, j)], &shift);
                        }
                        ttd[((a * m + b) * n + i) * n + j] = poly;
                    }
                }
            }
        }
        self.prims = prims;
    }
}

impl PriorModel for CleModel {
    fn dim(&self) -> usize {
        self.stoich.n_species()
    }

    fn closure(&self) -> ClosureKind {
        ClosureKind::LogNormal
    }

    fn rescaling(&self) -> Rescaling {
        Rescaling::DiffusionTensor
    }

    fn params(&self) -> DVector<f64> {
        self.rates.clone()
    }

    fn set_params(&mut self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.stoich.n_reactions() {
            return Err(Error::Dimension("rate vector length mismatch".into()));
        }
        if theta.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::Invalid("rate constants must be positive".into()));
        }
        self.rates = theta.clone();
        self.rebuild();
        Ok(())
    }

    fn param_positive(&self) -> Vec<bool> {
        vec![true; self.rates.len()]
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.rates.len()).map(|k| format!("c_{}", k + 1)).collect()
    }

    fn primitives(&self) -> &Primitives {
        &self.prims
    }

    fn drift_at(&self, x: &DVector<f64>) -> DVector<f64> {
        self.v.transpose() * self.propensities_at(x)
    }

    fn diffusion_factor_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        psd_sqrt(&self.diffusion_at(x))
    }

    fn rescale_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.diffusion_at(x)
    }
}
