//! Scalar double-well prior `dX = kappa X (1 - X^2) dt + sigma dW` under the
//! Gaussian closure. The drift has stable stationary points at +-1.

use nalgebra::{DMatrix, DVector};

use crate::closure::{ClosureKind, MultiIndex};
use crate::models::{
    constant_rescale_polys, empty_primitives, MomentPoly, PriorModel, Primitives, Rescaling,
};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct DoubleWellModel {
    kappa: f64,
    sigma: f64,
    rescaling: Rescaling,
    prims: Primitives,
}

impl DoubleWellModel {
    pub fn new(kappa: f64, sigma: f64) -> Result<Self> {
        Self::with_rescaling(kappa, sigma, Rescaling::Identity)
    }

    pub fn with_rescaling(kappa: f64, sigma: f64, rescaling: Rescaling) -> Result<Self> {
        if !(kappa > 0.0) || !(sigma > 0.0) {
            return Err(Error::Invalid("double-well needs kappa > 0 and sigma > 0".into()));
        }
        if matches!(rescaling, Rescaling::DiffusionTensor) {
            return Err(Error::Invalid(
                "double-well supports identity or diffusion-factor rescaling".into(),
            ));
        }
        let mut model =
            DoubleWellModel { kappa, sigma, rescaling, prims: empty_primitives(1, 2, false) };
        model.rebuild();
        Ok(model)
    }

    fn rebuild(&mut self) {
        let mut prims = empty_primitives(1, 2, false);
        let (k, s) = (self.kappa, self.sigma);

        // E[a] = kappa (E[Z] - E[Z^3]) via the Gaussian closure
        let mut am = MomentPoly::new();
        am.push(k, DVector::from_column_slice(&[1.0, 0.0]), MultiIndex(vec![1]));
        am.push(-k, DVector::from_column_slice(&[-1.0, 0.0]), MultiIndex(vec![3]));
        prims.a_mean[0] = am;

        // E[a Z] = kappa (E[Z^2] - E[Z^4])
        let mut ac = MomentPoly::new();
        ac.push(k, DVector::from_column_slice(&[1.0, 0.0]), MultiIndex(vec![2]));
        ac.push(-k, DVector::from_column_slice(&[-1.0, 0.0]), MultiIndex(vec![4]));
        prims.a_cross[0] = ac;

        let mut dm = MomentPoly::new();
        dm.push(s * s, DVector::from_column_slice(&[0.0, 2.0 * s]), MultiIndex(vec![0]));
        prims.d_mean[0] = dm;

        match self.rescaling {
            Rescaling::Identity => {
                constant_rescale_polys(&mut prims, &DMatrix::identity(1, 1), None);
            }
            Rescaling::DiffusionFactor => {
                let dr = |_i: usize, _k: usize| DVector::from_column_slice(&[0.0, 1.0]);
                constant_rescale_polys(&mut prims, &DMatrix::from_element(1, 1, s), Some(&dr));
            }
            Rescaling::DiffusionTensor => unreachable!(),
        }
        self.prims = prims;
    }
}

impl PriorModel for DoubleWellModel {
    fn dim(&self) -> usize {
        1
    }

    fn closure(&self) -> ClosureKind {
        ClosureKind::Gaussian
    }

    fn rescaling(&self) -> Rescaling {
        self.rescaling
    }

    fn params(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.kappa, self.sigma])
    }

    fn set_params(&mut self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != 2 {
            return Err(Error::Dimension("double-well expects 2 parameters".into()));
        }
        if !(theta[0] > 0.0) || !(theta[1] > 0.0) {
            return Err(Error::Invalid("double-well needs kappa > 0 and sigma > 0".into()));
        }
        self.kappa = theta[0];
        self.sigma = theta[1];
        self.rebuild();
        Ok(())
    }

    fn param_positive(&self) -> Vec<bool> {
        vec![true, true]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["kappa".into(), "sigma".into()]
    }

    fn primitives(&self) -> &Primitives {
        &self.prims
    }

    fn constant_diffusion(&self) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, self.sigma * self.sigma))
    }

    fn drift_at(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.kappa * x[0] * (1.0 - x[0] * x[0]))
    }

    fn diffusion_factor_at(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.sigma)
    }

    fn positive_state(&self) -> bool {
        false
    }
}
