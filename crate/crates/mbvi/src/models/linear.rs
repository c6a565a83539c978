//! Linear (Ornstein-Uhlenbeck) prior `dX = -gamma (X - mu) dt + sigma dW`.
//!
//! All expectations are polynomials in moments of order <= 2, so the
//! Gaussian closure is exact for this family.

use nalgebra::{DMatrix, DVector};

use crate::closure::{ClosureKind, MultiIndex};
use crate::models::{
    check_square, constant_rescale_polys, empty_primitives, MomentPoly, PriorModel, Primitives,
    Rescaling,
};
use crate::{Error, Result};

/// Which parameter groups are exposed through `params` / `set_params`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearFree {
    pub gamma: bool,
    pub mu: bool,
    pub sigma: bool,
}

impl Default for LinearFree {
    fn default() -> Self {
        LinearFree { gamma: true, mu: true, sigma: true }
    }
}

#[derive(Debug, Clone)]
pub struct LinearModel {
    n: usize,
    gamma: DMatrix<f64>,
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    rescaling: Rescaling,
    free: LinearFree,
    positive: Vec<bool>,
    prims: Primitives,
}

impl LinearModel {
    pub fn new(gamma: DMatrix<f64>, mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        Self::with_options(gamma, mu, sigma, Rescaling::Identity, LinearFree::default())
    }

    pub fn with_options(
        gamma: DMatrix<f64>,
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
        rescaling: Rescaling,
        free: LinearFree,
    ) -> Result<Self> {
        let n = mu.len();
        check_square(&gamma, n, "gamma")?;
        check_square(&sigma, n, "sigma")?;
        if matches!(rescaling, Rescaling::DiffusionTensor) {
            return Err(Error::Invalid(
                "linear model supports identity or diffusion-factor rescaling".into(),
            ));
        }
        if gamma.iter().chain(sigma.iter()).chain(mu.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Invalid("linear model parameters must be finite".into()));
        }
        let q = Self::q_for(n, free);
        let mut model = LinearModel {
            n,
            gamma,
            mu,
            sigma,
            rescaling,
            free,
            positive: vec![false; q],
            prims: empty_primitives(n, q, false),
        };
        model.rebuild();
        Ok(model)
    }

    fn q_for(n: usize, free: LinearFree) -> usize {
        let mut q = 0;
        if free.gamma {
            q += n * n;
        }
        if free.mu {
            q += n;
        }
        if free.sigma {
            q += n * n;
        }
        q
    }

    fn gamma_idx(&self, i: usize, j: usize) -> Option<usize> {
        self.free.gamma.then_some(i * self.n + j)
    }

    fn mu_idx(&self, i: usize) -> Option<usize> {
        self.free.mu.then_some(if self.free.gamma { self.n * self.n } else { 0 } + i)
    }

    fn sigma_idx(&self, i: usize, j: usize) -> Option<usize> {
        if !self.free.sigma {
            return None;
        }
        let mut off = 0;
        if self.free.gamma {
            off += self.n * self.n;
        }
        if self.free.mu {
            off += self.n;
        }
        Some(off + i * self.n + j)
    }

    /// Mark parameters as positive (optimized in log coordinates).
    pub fn set_param_positive(&mut self, flags: Vec<bool>) -> Result<()> {
        if flags.len() != self.prims.q {
            return Err(Error::Dimension("positivity flag length mismatch".into()));
        }
        self.positive = flags;
        Ok(())
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    fn rebuild(&mut self) {
        let n = self.n;
        let q = self.prims.q;
        let mut prims = empty_primitives(n, q, false);
        let zero = MultiIndex(vec![0u8; n]);

        // E[a]_i = -sum_j gamma_ij E[Z_j] + sum_j gamma_ij mu_j
        for i in 0..n {
            let mut poly = MomentPoly::new();
            let mut const_coeff = 0.0;
            let mut const_d = DVector::zeros(q);
            for j in 0..n {
                let mut d = DVector::zeros(q);
                if let Some(gi) = self.gamma_idx(i, j) {
                    d[gi] = -1.0;
                }
                poly.push(-self.gamma[(i, j)], d, MultiIndex::unit(n, j));
                const_coeff += self.gamma[(i, j)] * self.mu[j];
                if let Some(gi) = self.gamma_idx(i, j) {
                    const_d[gi] += self.mu[j];
                }
                if let Some(mi) = self.mu_idx(j) {
                    const_d[mi] += self.gamma[(i, j)];
                }
            }
            poly.push(const_coeff, const_d, zero.clone());
            prims.a_mean[i] = poly;
        }

        // E[a Z^T]_ij = -sum_k gamma_ik (E[Z_k Z_j] - mu_k E[Z_j])
        for i in 0..n {
            for j in 0..n {
                let mut poly = MomentPoly::new();
                let mut lin_coeff = 0.0;
                let mut lin_d = DVector::zeros(q);
                for k in 0..n {
                    let mut d = DVector::zeros(q);
                    if let Some(gi) = self.gamma_idx(i, k) {
                        d[gi] = -1.0;
                    }
                    poly.push(
                        -self.gamma[(i, k)],
                        d,
                        MultiIndex::unit(n, k).plus(&MultiIndex::unit(n, j)),
                    );
                    lin_coeff += self.gamma[(i, k)] * self.mu[k];
                    if let Some(gi) = self.gamma_idx(i, k) {
                        lin_d[gi] += self.mu[k];
                    }
                    if let Some(mi) = self.mu_idx(k) {
                        lin_d[mi] += self.gamma[(i, k)];
                    }
                }
                poly.push(lin_coeff, lin_d, MultiIndex::unit(n, j));
                prims.a_cross[i * n + j] = poly;
            }
        }

        // E[D]_ij = (sigma sigma^T)_ij
        let d_const = &self.sigma * self.sigma.transpose();
        for i in 0..n {
            for j in 0..n {
                let mut d = DVector::zeros(q);
                for l in 0..n {
                    if let Some(si) = self.sigma_idx(i, l) {
                        d[si] += self.sigma[(j, l)];
                    }
                    if let Some(sj) = self.sigma_idx(j, l) {
                        d[sj] += self.sigma[(i, l)];
                    }
                }
                let mut poly = MomentPoly::new();
                poly.push(d_const[(i, j)], d, zero.clone());
                prims.d_mean[i * n + j] = poly;
            }
        }

        match self.rescaling {
            Rescaling::Identity => {
                let eye = DMatrix::identity(n, n);
                constant_rescale_polys(&mut prims, &eye, None);
            }
            Rescaling::DiffusionFactor => {
                let sigma = self.sigma.clone();
                let sigma_idx: Vec<Option<usize>> =
                    (0..n * n).map(|k| self.sigma_idx(k / n, k % n)).collect();
                let dr = move |i: usize, k: usize| {
                    let mut d = DVector::zeros(q);
                    if let Some(si) = sigma_idx[i * n + k] {
                        d[si] = 1.0;
                    }
                    d
                };
                constant_rescale_polys(&mut prims, &sigma, Some(&dr));
            }
            Rescaling::DiffusionTensor => unreachable!(),
        }
        self.prims = prims;
    }
}

impl PriorModel for LinearModel {
    fn dim(&self) -> usize {
        self.n
    }

    fn closure(&self) -> ClosureKind {
        ClosureKind::Gaussian
    }

    fn rescaling(&self) -> Rescaling {
        self.rescaling
    }

    fn params(&self) -> DVector<f64> {
        let n = self.n;
        let mut out = DVector::zeros(self.prims.q);
        for i in 0..n {
            for j in 0..n {
                if let Some(gi) = self.gamma_idx(i, j) {
                    out[gi] = self.gamma[(i, j)];
                }
                if let Some(si) = self.sigma_idx(i, j) {
                    out[si] = self.sigma[(i, j)];
                }
            }
            if let Some(mi) = self.mu_idx(i) {
                out[mi] = self.mu[i];
            }
        }
        out
    }

    fn set_params(&mut self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.prims.q {
            return Err(Error::Dimension(format!(
                "linear model expects {} parameters, got {}",
                self.prims.q,
                theta.len()
            )));
        }
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                if let Some(gi) = self.gamma_idx(i, j) {
                    self.gamma[(i, j)] = theta[gi];
                }
                if let Some(si) = self.sigma_idx(i, j) {
                    self.sigma[(i, j)] = theta[si];
                }
            }
            if let Some(mi) = self.mu_idx(i) {
                self.mu[i] = theta[mi];
            }
        }
        self.rebuild();
        Ok(())
    }

    fn param_positive(&self) -> Vec<bool> {
        self.positive.clone()
    }

    fn param_names(&self) -> Vec<String> {
        let n = self.n;
        let mut names = Vec::new();
        if self.free.gamma {
            for i in 0..n {
                for j in 0..n {
                    names.push(format!("gamma_{}{}", i + 1, j + 1));
                }
            }
        }
        if self.free.mu {
            for i in 0..n {
                names.push(format!("mu_{}", i + 1));
            }
        }
        if self.free.sigma {
            for i in 0..n {
                for j in 0..n {
                    names.push(format!("sigma_{}{}", i + 1, j + 1));
                }
            }
        }
        names
    }

    fn primitives(&self) -> &Primitives {
        &self.prims
    }

    fn constant_diffusion(&self) -> Option<DMatrix<f64>> {
        Some(&self.sigma * self.sigma.transpose())
    }

    fn drift_at(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.gamma * (x - &self.mu))
    }

    fn diffusion_factor_at(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.sigma.clone()
    }

    fn positive_state(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closure::MomentPair;
    use crate::models::eval_values;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn drift_mean_vanishes_at_fixed_point() {
        let model = LinearModel::new(
            dmatrix![0.5, 0.1; 0.0, 0.7],
            dvector![1.0, -2.0],
            dmatrix![0.3, 0.0; 0.0, 0.3],
        )
        .unwrap();
        let mp = MomentPair::from_central(
            dvector![1.0, -2.0],
            dmatrix![0.2, 0.0; 0.0, 0.2],
        )
        .unwrap();
        let num =
            eval_values(model.primitives(), model.closure(), &mp, false).unwrap();
        assert_relative_eq!(num.a_mean.norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn amortized_experiment_prior_expectations() {
        // gamma = diag(0.3, 0.4), mu = (-1, 1), sigma = [[0.2, 0.1], [0.1, 0.15]]
        let model = LinearModel::new(
            dmatrix![0.3, 0.0; 0.0, 0.4],
            dvector![-1.0, 1.0],
            dmatrix![0.2, 0.1; 0.1, 0.15],
        )
        .unwrap();
        let mp = MomentPair::from_central(dvector![0.0, 0.0], dmatrix![1.0, 0.0; 0.0, 1.0])
            .unwrap();
        let num = eval_values(model.primitives(), model.closure(), &mp, false).unwrap();
        assert_relative_eq!(num.a_mean[0], -0.3, max_relative = 1e-14);
        assert_relative_eq!(num.a_mean[1], 0.4 * (1.0 - 0.0), max_relative = 1e-14);
        // E[D] = sigma sigma^T
        assert_relative_eq!(num.d_mean[(0, 0)], 0.05, max_relative = 1e-14);
        assert_relative_eq!(num.d_mean[(0, 1)], 0.035, max_relative = 1e-14);
        assert_relative_eq!(num.d_mean[(1, 1)], 0.0325, max_relative = 1e-12);
    }

    #[test]
    fn drift_cross_matches_formula() {
        let gamma = dmatrix![0.5, 0.1; -0.2, 0.7];
        let mu = dvector![1.0, -1.0];
        let model =
            LinearModel::new(gamma.clone(), mu.clone(), DMatrix::identity(2, 2)).unwrap();
        let mean = dvector![0.3, 0.8];
        let central = dmatrix![0.5, 0.1; 0.1, 0.4];
        let mp = MomentPair::from_central(mean.clone(), central).unwrap();
        let num = eval_values(model.primitives(), model.closure(), &mp, false).unwrap();
        let want = -&gamma * (&mp.second - &mu * mean.transpose());
        assert_relative_eq!(num.a_cross, want, epsilon = 1e-13);
    }
}
