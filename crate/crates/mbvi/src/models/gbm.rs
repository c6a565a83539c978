//! Multivariate geometric Brownian motion
//! `dX_i = r_i X_i dt + X_i d(Rmat W)_i` under the log-normal closure.
//!
//! The diffusion factor `b(x) = diag(x) Rmat` is state dependent, so the
//! control is rescaled by `b` and the path-KL weight becomes independent of
//! the diffusion. Third-order moments in the covariance dynamics are closed
//! with the log-normal closure. The growth rates `r` are fixed; the noise
//! mixing matrix `Rmat` is the parameter vector.

use nalgebra::{DMatrix, DVector};

use crate::closure::{ClosureKind, MultiIndex};
use crate::models::{
    check_square, empty_primitives, MomentPoly, PriorModel, Primitives, Rescaling,
};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GbmModel {
    n: usize,
    rates: DVector<f64>,
    rmat: DMatrix<f64>,
    prims: Primitives,
}

impl GbmModel {
    pub fn new(rates: DVector<f64>, rmat: DMatrix<f64>) -> Result<Self> {
        let n = rates.len();
        check_square(&rmat, n, "rmat")?;
        if rates.iter().chain(rmat.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Invalid("gbm parameters must be finite".into()));
        }
        let mut model = GbmModel { n, rates, rmat, prims: empty_primitives(n, n * n, false) };
        model.rebuild();
        Ok(model)
    }

    pub fn rmat(&self) -> &DMatrix<f64> {
        &self.rmat
    }

    /// Correlation matrix of the driving noise, `RR^T` normalized by its
    /// diagonal; the reported quantity in joint inference.
    pub fn correlation(&self) -> DMatrix<f64> {
        let d = &self.rmat * self.rmat.transpose();
        let mut out = d.clone();
        for i in 0..self.n {
            for j in 0..self.n {
                out[(i, j)] = d[(i, j)] / (d[(i, i)] * d[(j, j)]).sqrt();
            }
        }
        out
    }

    /// Per-component volatilities `sqrt(diag(RR^T))`.
    pub fn volatilities(&self) -> DVector<f64> {
        let d = &self.rmat * self.rmat.transpose();
        DVector::from_fn(self.n, |i, _| d[(i, i)].sqrt())
    }

    fn theta_idx(&self, i: usize, j: usize) -> usize {
        i * self.n + j
    }

    fn rebuild(&mut self) {
        let n = self.n;
        let q = n * n;
        let mut prims = empty_primitives(n, q, false);

        for i in 0..n {
            // E[a]_i = r_i E[Z_i]
            let mut am = MomentPoly::new();
            am.push_const(q, self.rates[i], MultiIndex::unit(n, i));
            prims.a_mean[i] = am;
            for j in 0..n {
                // E[a Z^T]_ij = r_i E[Z_i Z_j]
                let mut ac = MomentPoly::new();
                ac.push_const(
                    q,
                    self.rates[i],
                    MultiIndex::unit(n, i).plus(&MultiIndex::unit(n, j)),
                );
                prims.a_cross[i * n + j] = ac;

                // E[D]_ij = (RR^T)_ij E[Z_i Z_j]
                let rrt_ij: f64 = (0..n).map(|l| self.rmat[(i, l)] * self.rmat[(j, l)]).sum();
                let mut dcoeff = DVector::zeros(q);
                for l in 0..n {
                    dcoeff[self.theta_idx(i, l)] += self.rmat[(j, l)];
                    dcoeff[self.theta_idx(j, l)] += self.rmat[(i, l)];
                }
                let mut dm = MomentPoly::new();
                dm.push(rrt_ij, dcoeff, MultiIndex::unit(n, i).plus(&MultiIndex::unit(n, j)));
                prims.d_mean[i * n + j] = dm;
            }
        }

        // rescaling tensors for b(x) = diag(x) Rmat: R(Z)_ik = Z_i Rmat_ik
        for i in 0..n {
            for k in 0..n {
                let coeff = self.rmat[(i, k)];
                let mut dcoeff = DVector::zeros(q);
                dcoeff[self.theta_idx(i, k)] = 1.0;

                let mut p0 = MomentPoly::new();
                p0.push(coeff, dcoeff.clone(), MultiIndex::unit(n, i));
                prims.r0[i * n + k] = p0;
                for l in 0..n {
                    let mut p1 = MomentPoly::new();
                    p1.push(
                        coeff,
                        dcoeff.clone(),
                        MultiIndex::unit(n, i).plus(&MultiIndex::unit(n, l)),
                    );
                    prims.r1[(i * n + k) * n + l] = p1;
                    for j in 0..n {
                        let mut p2 = MomentPoly::new();
                        p2.push(
                            coeff,
                            dcoeff.clone(),
                            MultiIndex::unit(n, i)
                                .plus(&MultiIndex::unit(n, l))
                                .plus(&MultiIndex::unit(n, j)),
                        );
                        prims.r2[((i * n + k) * n + l) * n + j] = p2;
                    }
                }
            }
        }
        self.prims = prims;
    }
}

impl PriorModel for GbmModel {
    fn dim(&self) -> usize {
        self.n
    }

    fn closure(&self) -> ClosureKind {
        ClosureKind::LogNormal
    }

    fn rescaling(&self) -> Rescaling {
        Rescaling::DiffusionFactor
    }

    fn params(&self) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(n * n, |k, _| self.rmat[(k / n, k % n)])
    }

    fn set_params(&mut self, theta: &DVector<f64>) -> Result<()> {
        let n = self.n;
        if theta.len() != n * n {
            return Err(Error::Dimension(format!(
                "gbm expects {} parameters, got {}",
                n * n,
                theta.len()
            )));
        }
        for k in 0..n * n {
            self.rmat[(k / n, k % n)] = theta[k];
        }
        self.rebuild();
        Ok(())
    }

    fn param_positive(&self) -> Vec<bool> {
        vec![false; self.n * self.n]
    }

    fn param_names(&self) -> Vec<String> {
        let n = self.n;
        (0..n * n).map(|k| format!("rmat_{}{}", k / n + 1, k % n + 1)).collect()
    }

    fn primitives(&self) -> &Primitives {
        &self.prims
    }

    fn drift_at(&self, x: &DVector<f64>) -> DVector<f64> {
        x.component_mul(&self.rates)
    }

    fn diffusion_factor_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut b = self.rmat.clone();
        for i in 0..self.n {
            for j in 0..self.n {
                b[(i, j)] *= x[i];
            }
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closure::{lognormal_moment, MomentPair};
    use crate::models::eval_values;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn third_moment_delegates_to_lognormal_closure() {
        let model = GbmModel::new(dvector![0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        let mean = dvector![1.0, 1.0];
        let second = dmatrix![1.1, 1.02; 1.02, 1.15];
        let mp = MomentPair::new(mean, second).unwrap();
        let num = eval_values(model.primitives(), model.closure(), &mp, false).unwrap();
        // r2[(0, k, 0, 1)] = Rmat_0k E[Z_0 Z_0 Z_1] with Rmat = I
        let want = lognormal_moment(&mp, &MultiIndex(vec![2, 1])).unwrap();
        assert_relative_eq!(num.r2.get(0, 0, 0, 1), want, max_relative = 1e-13);
        assert_relative_eq!(num.r2.get(0, 1, 0, 1), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn diffusion_mean_is_rrt_weighted_second_moment() {
        let rmat = dmatrix![0.3, 0.0; 0.1, 0.25];
        let model = GbmModel::new(dvector![0.1, 0.2], rmat.clone()).unwrap();
        let mp = MomentPair::new(dvector![1.0, 2.0], dmatrix![1.2, 2.1; 2.1, 4.5]).unwrap();
        let num = eval_values(model.primitives(), model.closure(), &mp, false).unwrap();
        let rrt = &rmat * rmat.transpose();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(
                    num.d_mean[(i, j)],
                    rrt[(i, j)] * mp.second[(i, j)],
                    max_relative = 1e-13
                );
            }
        }
    }

    #[test]
    fn correlation_of_identity_mixing_is_identity() {
        let model = GbmModel::new(dvector![0.0, 0.0], DMatrix::identity(2, 2) * 0.2).unwrap();
        let corr = model.correlation();
        assert_relative_eq!(corr, DMatrix::identity(2, 2), epsilon = 1e-14);
        assert_relative_eq!(model.volatilities()[0], 0.2, max_relative = 1e-14);
    }
}
