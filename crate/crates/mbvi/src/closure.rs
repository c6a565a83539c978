//! Moment closures: multi-index moments of multivariate normal and
//! log-normal distributions as functions of first and second moments.
//!
//! Both closures reproduce the provided moments exactly up to order two and
//! come with analytic gradients with respect to the packed moment
//! coordinates `(m, vech M)` used by the moment state vector.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::{la, Error, Result};

/// Maximum supported moment order for the Gaussian closure.
pub const MAX_ORDER: usize = 8;

/// Distributional closure family used to express higher-order moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosureKind {
    Gaussian,
    LogNormal,
}

/// Closure moment `E[X^alpha]` under the selected family.
pub fn moment(kind: ClosureKind, mp: &MomentPair, alpha: &MultiIndex) -> Result<f64> {
    match kind {
        ClosureKind::Gaussian => gaussian_moment(mp, alpha),
        ClosureKind::LogNormal => lognormal_moment(mp, alpha),
    }
}

/// Closure moment with gradient under the selected family.
pub fn moment_grad(kind: ClosureKind, mp: &MomentPair, alpha: &MultiIndex) -> Result<MomentGrad> {
    match kind {
        ClosureKind::Gaussian => gaussian_moment_grad(mp, alpha),
        ClosureKind::LogNormal => lognormal_moment_grad(mp, alpha),
    }
}

/// Multi-index power `alpha` with order `sum(alpha)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(pub Vec<u8>);

impl MultiIndex {
    pub fn order(&self) -> usize {
        self.0.iter().map(|&a| a as usize).sum()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Unit multi-index `e_i`.
    pub fn unit(n: usize, i: usize) -> Self {
        let mut v = vec![0u8; n];
        v[i] = 1;
        MultiIndex(v)
    }

    pub fn plus(&self, other: &MultiIndex) -> Self {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }
}

/// First moments `m = E[X]` and raw second moments `M = E[X X^T]`.
#[derive(Debug, Clone)]
pub struct MomentPair {
    pub mean: DVector<f64>,
    pub second: DMatrix<f64>,
}

impl MomentPair {
    pub fn new(mean: DVector<f64>, second: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if second.nrows() != n || second.ncols() != n {
            return Err(Error::Dimension(format!(
                "second moment matrix must be {n} x {n}"
            )));
        }
        let scale = second.iter().map(|x| x.abs()).fold(1e-300, f64::max);
        for i in 0..n {
            for j in (i + 1)..n {
                if (second[(i, j)] - second[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Invalid(format!(
                        "second moment matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(MomentPair { mean, second })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Central second moments `M - m m^T`.
    pub fn central(&self) -> DMatrix<f64> {
        &self.second - &self.mean * self.mean.transpose()
    }

    /// Build from mean and central second moments.
    pub fn from_central(mean: DVector<f64>, central: DMatrix<f64>) -> Result<Self> {
        let second = &central + &mean * mean.transpose();
        MomentPair::new(mean, second)
    }
}

/// `(m, M) -> (m, central)`; exact algebra.
pub fn raw_to_central(mp: &MomentPair) -> (DVector<f64>, DMatrix<f64>) {
    (mp.mean.clone(), mp.central())
}

/// `(m, central) -> MomentPair`; exact algebra, round-trip is identity.
pub fn central_to_raw(mean: &DVector<f64>, central: &DMatrix<f64>) -> Result<MomentPair> {
    MomentPair::from_central(mean.clone(), central.clone())
}

/// Value and gradient of a closure moment with respect to the packed moment
/// coordinates: `d_mean` has length `n`, `d_second` has length `n(n+1)/2`
/// and refers to the upper-triangle packing of the raw second moments (an
/// off-diagonal packed coordinate moves both symmetric entries).
#[derive(Debug, Clone)]
pub struct MomentGrad {
    pub value: f64,
    pub d_mean: DVector<f64>,
    pub d_second: DVector<f64>,
}

fn check_dim(mp: &MomentPair, alpha: &MultiIndex) -> Result<()> {
    if alpha.dim() != mp.dim() {
        return Err(Error::Dimension(format!(
            "multi-index dimension {} does not match state dimension {}",
            alpha.dim(),
            mp.dim()
        )));
    }
    Ok(())
}

/// Recursive Gaussian moment: `E[X^alpha]` for `X ~ N(m, M - m m^T)`.
///
/// Implements the moment-generating-function recursion
/// `E[X_i X^b] = m_i E[X^b] + sum_j C_ij b_j E[X^{b - e_j}]`,
/// memoized by multi-index within a call. Orders <= 2 return the stored
/// moments exactly.
pub fn gaussian_moment(mp: &MomentPair, alpha: &MultiIndex) -> Result<f64> {
    check_dim(mp, alpha)?;
    let order = alpha.order();
    if order > MAX_ORDER {
        return Err(Error::UnsupportedOrder { order, max: MAX_ORDER });
    }
    if let Some(v) = low_order_exact(mp, alpha) {
        return Ok(v);
    }
    let central = mp.central();
    let mut memo: HashMap<Vec<u8>, f64> = HashMap::new();
    Ok(gaussian_rec(&mp.mean, &central, &alpha.0, &mut memo))
}

fn low_order_exact(mp: &MomentPair, alpha: &MultiIndex) -> Option<f64> {
    match alpha.order() {
        0 => Some(1.0),
        1 => {
            let i = alpha.0.iter().position(|&a| a > 0).unwrap();
            Some(mp.mean[i])
        }
        2 => {
            let mut idx = Vec::new();
            for (i, &a) in alpha.0.iter().enumerate() {
                for _ in 0..a {
                    idx.push(i);
                }
            }
            Some(mp.second[(idx[0], idx[1])])
        }
        _ => None,
    }
}

fn gaussian_rec(
    m: &DVector<f64>,
    c: &DMatrix<f64>,
    alpha: &[u8],
    memo: &mut HashMap<Vec<u8>, f64>,
) -> f64 {
    let order: usize = alpha.iter().map(|&a| a as usize).sum();
    if order == 0 {
        return 1.0;
    }
    if let Some(&v) = memo.get(alpha) {
        return v;
    }
    let i = alpha.iter().position(|&a| a > 0).unwrap();
    let mut beta = alpha.to_vec();
    beta[i] -= 1;
    let mut val = m[i] * gaussian_rec(m, c, &beta, memo);
    for j in 0..alpha.len() {
        if beta[j] > 0 {
            let bj = beta[j] as f64;
            let mut gamma = beta.clone();
            gamma[j] -= 1;
            val += c[(i, j)] * bj * gaussian_rec(m, c, &gamma, memo);
        }
    }
    memo.insert(alpha.to_vec(), val);
    val
}

/// Gaussian moment together with its gradient in packed `(m, vech M)`
/// coordinates. Uses the exact identities
/// `dE/dm_i|_C = alpha_i E[X^{alpha - e_i}]`,
/// `dE/dC_ij = alpha_i alpha_j E[X^{alpha - e_i - e_j}]` (i != j) and
/// `dE/dC_ii = alpha_i (alpha_i - 1) / 2 E[X^{alpha - 2 e_i}]`,
/// chained through `C = M - m m^T`.
pub fn gaussian_moment_grad(mp: &MomentPair, alpha: &MultiIndex) -> Result<MomentGrad> {
    check_dim(mp, alpha)?;
    let order = alpha.order();
    if order > MAX_ORDER {
        return Err(Error::UnsupportedOrder { order, max: MAX_ORDER });
    }
    let n = mp.dim();
    let p = la::sym_len(n);
    let mut d_mean = DVector::zeros(n);
    let mut d_second = DVector::zeros(p);

    // exact specials keep orders <= 2 free of cancellation
    match order {
        0 => return Ok(MomentGrad { value: 1.0, d_mean, d_second }),
        1 => {
            let i = alpha.0.iter().position(|&a| a > 0).unwrap();
            d_mean[i] = 1.0;
            return Ok(MomentGrad { value: mp.mean[i], d_mean, d_second });
        }
        2 => {
            let mut idx = Vec::new();
            for (i, &a) in alpha.0.iter().enumerate() {
                for _ in 0..a {
                    idx.push(i);
                }
            }
            d_second[la::sym_index(n, idx[0], idx[1])] = 1.0;
            return Ok(MomentGrad {
                value: mp.second[(idx[0], idx[1])],
                d_mean,
                d_second,
            });
        }
        _ => {}
    }

    let central = mp.central();
    let mut memo: HashMap<Vec<u8>, f64> = HashMap::new();
    let value = gaussian_rec(&mp.mean, &central, &alpha.0, &mut memo);

    // partials w.r.t. central coordinates first
    let mut d_central = DVector::zeros(p);
    for i in 0..n {
        for j in i..n {
            let (ai, aj) = (alpha.0[i] as f64, alpha.0[j] as f64);
            let coeff = if i == j { ai * (ai - 1.0) / 2.0 } else { ai * aj };
            if coeff != 0.0 {
                let mut beta = alpha.0.clone();
                beta[i] -= 1;
                beta[j] -= 1;
                d_central[la::sym_index(n, i, j)] =
                    coeff * gaussian_rec(&mp.mean, &central, &beta, &mut memo);
            }
        }
    }
    // dE/dm_i holding C fixed
    let mut d_mean_central = DVector::zeros(n);
    for i in 0..n {
        if alpha.0[i] > 0 {
            let mut beta = alpha.0.clone();
            beta[i] -= 1;
            d_mean_central[i] =
                alpha.0[i] as f64 * gaussian_rec(&mp.mean, &central, &beta, &mut memo);
        }
    }
    // chain rule: C_kl = M_kl - m_k m_l
    d_second.copy_from(&d_central);
    for i in 0..n {
        let mut acc = d_mean_central[i];
        for k in 0..n {
            for l in k..n {
                let dc = d_central[la::sym_index(n, k, l)];
                if dc != 0.0 {
                    let mut dcd_mi = 0.0;
                    if k == i {
                        dcd_mi -= mp.mean[l];
                    }
                    if l == i {
                        dcd_mi -= mp.mean[k];
                    }
                    acc += dc * dcd_mi;
                }
            }
        }
        d_mean[i] = acc;
    }
    Ok(MomentGrad { value, d_mean, d_second })
}

/// Exponents of `m_i`, `M_ij` in the log-normal closure
/// `Cl(m, M, alpha) = prod_i m_i^{2 a_i} / M_ii^{a_i / 2}
///                  * prod_{i,j} M_ij^{a_i a_j / 2} / (m_i m_j)^{a_i a_j / 2}`.
fn lognormal_exponents(alpha: &MultiIndex) -> (Vec<f64>, Vec<(usize, usize, f64)>) {
    let n = alpha.dim();
    let k: f64 = alpha.order() as f64;
    let mut m_exp = vec![0.0; n];
    let mut mat_exp = Vec::new();
    for i in 0..n {
        let ai = alpha.0[i] as f64;
        if ai == 0.0 {
            continue;
        }
        // 2 a_i from the first product, -a_i k from the double product
        m_exp[i] = 2.0 * ai - ai * k;
        // diagonal: -a_i/2 from the first product, a_i^2/2 from the double
        let diag = ai * (ai - 1.0) / 2.0;
        if diag != 0.0 {
            mat_exp.push((i, i, diag));
        }
        for j in (i + 1)..n {
            let aj = alpha.0[j] as f64;
            if aj != 0.0 {
                // (i,j) and (j,i) terms of the double product combined
                mat_exp.push((i, j, ai * aj));
            }
        }
    }
    (m_exp, mat_exp)
}

/// Log-normal closure moment `Cl(m, M, alpha)`, evaluated via sums of
/// logarithms. Requires the referenced entries of `m` and `M` to be strictly
/// positive; orders <= 2 return the stored moments exactly.
pub fn lognormal_moment(mp: &MomentPair, alpha: &MultiIndex) -> Result<f64> {
    check_dim(mp, alpha)?;
    if let Some(v) = lognormal_low_order(mp, alpha)? {
        return Ok(v);
    }
    let (m_exp, mat_exp) = lognormal_exponents(alpha);
    let mut log_val = 0.0;
    for (i, &e) in m_exp.iter().enumerate() {
        if e != 0.0 {
            let mi = mp.mean[i];
            if mi <= 0.0 {
                return Err(Error::Domain(format!("log-normal closure needs m[{i}] > 0")));
            }
            log_val += e * mi.ln();
        }
    }
    for &(i, j, e) in &mat_exp {
        let mij = mp.second[(i, j)];
        if mij <= 0.0 {
            return Err(Error::Domain(format!(
                "log-normal closure needs M[{i},{j}] > 0"
            )));
        }
        log_val += e * mij.ln();
    }
    Ok(log_val.exp())
}

fn lognormal_low_order(mp: &MomentPair, alpha: &MultiIndex) -> Result<Option<f64>> {
    match alpha.order() {
        0 => Ok(Some(1.0)),
        1 => {
            let i = alpha.0.iter().position(|&a| a > 0).unwrap();
            if mp.mean[i] <= 0.0 {
                return Err(Error::Domain(format!("log-normal closure needs m[{i}] > 0")));
            }
            Ok(Some(mp.mean[i]))
        }
        2 => {
            let mut idx = Vec::new();
            for (i, &a) in alpha.0.iter().enumerate() {
                for _ in 0..a {
                    idx.push(i);
                }
            }
            let v = mp.second[(idx[0], idx[1])];
            if v <= 0.0 {
                return Err(Error::Domain(format!(
                    "log-normal closure needs M[{},{}] > 0",
                    idx[0], idx[1]
                )));
            }
            Ok(Some(v))
        }
        _ => Ok(None),
    }
}

/// Log-normal closure moment with gradient in packed `(m, vech M)` coordinates.
pub fn lognormal_moment_grad(mp: &MomentPair, alpha: &MultiIndex) -> Result<MomentGrad> {
    check_dim(mp, alpha)?;
    let n = mp.dim();
    let mut d_mean = DVector::zeros(n);
    let mut d_second = DVector::zeros(la::sym_len(n));
    match alpha.order() {
        0 => return Ok(MomentGrad { value: 1.0, d_mean, d_second }),
        1 => {
            let value = lognormal_moment(mp, alpha)?;
            let i = alpha.0.iter().position(|&a| a > 0).unwrap();
            d_mean[i] = 1.0;
            return Ok(MomentGrad { value, d_mean, d_second });
        }
        2 => {
            let value = lognormal_moment(mp, alpha)?;
            let mut idx = Vec::new();
            for (i, &a) in alpha.0.iter().enumerate() {
                for _ in 0..a {
                    idx.push(i);
                }
            }
            d_second[la::sym_index(n, idx[0], idx[1])] = 1.0;
            return Ok(MomentGrad { value, d_mean, d_second });
        }
        _ => {}
    }
    let value = lognormal_moment(mp, alpha)?;
    let (m_exp, mat_exp) = lognormal_exponents(alpha);
    for (i, &e) in m_exp.iter().enumerate() {
        if e != 0.0 {
            d_mean[i] = value * e / mp.mean[i];
        }
    }
    for &(i, j, e) in &mat_exp {
        d_second[la::sym_index(n, i, j)] = value * e / mp.second[(i, j)];
    }
    Ok(MomentGrad { value, d_mean, d_second })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn mp2() -> MomentPair {
        let mean = dvector![0.4, -0.7];
        let central = dmatrix![0.9, 0.2; 0.2, 0.5];
        MomentPair::from_central(mean, central).unwrap()
    }

    #[test]
    fn first_moment_is_mean() {
        let mp = mp2();
        let a = MultiIndex::unit(2, 0);
        assert_eq!(gaussian_moment(&mp, &a).unwrap(), 0.4);
    }

    #[test]
    fn centered_second_moment() {
        let mean = dvector![0.0];
        let central = dmatrix![1.7];
        let mp = MomentPair::from_central(mean, central).unwrap();
        let a = MultiIndex(vec![2]);
        assert_eq!(gaussian_moment(&mp, &a).unwrap(), 1.7);
    }

    #[test]
    fn isserlis_three_factor() {
        let mean = dvector![0.3, -0.2, 0.5];
        let central = dmatrix![1.0, 0.1, -0.2; 0.1, 0.8, 0.3; -0.2, 0.3, 1.2];
        let mp = MomentPair::from_central(mean.clone(), central.clone()).unwrap();
        let a = MultiIndex(vec![1, 1, 1]);
        let want = mean[0] * mean[1] * mean[2]
            + mean[0] * central[(1, 2)]
            + mean[1] * central[(0, 2)]
            + mean[2] * central[(0, 1)];
        assert_relative_eq!(gaussian_moment(&mp, &a).unwrap(), want, max_relative = 1e-14);
    }

    #[test]
    fn double_well_moments_match_hand_expansion() {
        // E[X^3] = m^3 + 3 m C, E[X^4] = m^4 + 6 m^2 C + 3 C^2
        let (m, c) = (0.5, 0.1);
        let mp = MomentPair::from_central(dvector![m], dmatrix![c]).unwrap();
        let e3 = gaussian_moment(&mp, &MultiIndex(vec![3])).unwrap();
        let e4 = gaussian_moment(&mp, &MultiIndex(vec![4])).unwrap();
        assert_relative_eq!(e3, m * m * m + 3.0 * m * c, max_relative = 1e-14);
        assert_relative_eq!(e4, m.powi(4) + 6.0 * m * m * c + 3.0 * c * c, max_relative = 1e-14);
    }

    #[test]
    fn odd_central_moments_vanish() {
        let mp = MomentPair::from_central(dvector![0.0, 0.0], dmatrix![1.0, 0.3; 0.3, 2.0])
            .unwrap();
        for alpha in [vec![3, 0], vec![1, 2], vec![2, 3], vec![1, 0]] {
            let v = gaussian_moment(&mp, &MultiIndex(alpha)).unwrap();
            assert!(v.abs() <= 1e-14, "odd moment {v}");
        }
    }

    #[test]
    fn order_cap_enforced() {
        let mp = mp2();
        let res = gaussian_moment(&mp, &MultiIndex(vec![5, 4]));
        assert!(matches!(res, Err(Error::UnsupportedOrder { order: 9, .. })));
    }

    #[test]
    fn lognormal_consistency_low_orders() {
        let mp = MomentPair::new(dvector![2.0, 3.0], dmatrix![5.0, 6.5; 6.5, 11.0]).unwrap();
        assert_eq!(lognormal_moment(&mp, &MultiIndex::unit(2, 1)).unwrap(), 3.0);
        assert_eq!(lognormal_moment(&mp, &MultiIndex(vec![1, 1])).unwrap(), 6.5);
        assert_eq!(lognormal_moment(&mp, &MultiIndex(vec![2, 0])).unwrap(), 5.0);
    }

    #[test]
    fn lognormal_third_moment_scalar() {
        // E[X^3] = M^3 / m^3 for a scalar log-normal
        let mp = MomentPair::new(dvector![1.0], dmatrix![2.0]).unwrap();
        let v = lognormal_moment(&mp, &MultiIndex(vec![3])).unwrap();
        assert_relative_eq!(v, 8.0, max_relative = 1e-12);
    }

    #[test]
    fn lognormal_rejects_nonpositive_required_entries() {
        let mp = MomentPair::new(dvector![1.0, -1.0], dmatrix![2.0, 0.5; 0.5, 2.0]).unwrap();
        // alpha touching the negative mean must fail ...
        assert!(lognormal_moment(&mp, &MultiIndex(vec![0, 3])).is_err());
        // ... while an alpha that never references it passes
        assert!(lognormal_moment(&mp, &MultiIndex(vec![3, 0])).is_ok());
    }

    #[test]
    fn raw_central_trivial_cases() {
        let mp = MomentPair::new(dvector![0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        assert_eq!(mp.central(), DMatrix::identity(2, 2));
        let mp = MomentPair::new(dvector![1.0, 1.0], DMatrix::from_element(2, 2, 1.0)).unwrap();
        assert_eq!(mp.central(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn gaussian_grad_matches_finite_differences() {
        let mp = mp2();
        let alpha = MultiIndex(vec![2, 3]);
        let g = gaussian_moment_grad(&mp, &alpha).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut up = mp.clone();
            up.mean[i] += h;
            let mut dn = mp.clone();
            dn.mean[i] -= h;
            let fd = (gaussian_moment(&up, &alpha).unwrap()
                - gaussian_moment(&dn, &alpha).unwrap())
                / (2.0 * h);
            assert_relative_eq!(g.d_mean[i], fd, max_relative = 1e-6);
        }
        for i in 0..2 {
            for j in i..2 {
                let mut up = mp.clone();
                up.second[(i, j)] += h;
                up.second[(j, i)] = up.second[(i, j)];
                let mut dn = mp.clone();
                dn.second[(i, j)] -= h;
                dn.second[(j, i)] = dn.second[(i, j)];
                let fd = (gaussian_moment(&up, &alpha).unwrap()
                    - gaussian_moment(&dn, &alpha).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(
                    g.d_second[la::sym_index(2, i, j)],
                    fd,
                    max_relative = 1e-5
                );
            }
        }
    }

    #[test]
    fn lognormal_grad_matches_finite_differences() {
        let mp = MomentPair::new(dvector![1.4, 2.2], dmatrix![2.5, 3.2; 3.2, 5.5]).unwrap();
        let alpha = MultiIndex(vec![2, 1]);
        let g = lognormal_moment_grad(&mp, &alpha).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut up = mp.clone();
            up.mean[i] += h;
            let mut dn = mp.clone();
            dn.mean[i] -= h;
            let fd = (lognormal_moment(&up, &alpha).unwrap()
                - lognormal_moment(&dn, &alpha).unwrap())
                / (2.0 * h);
            assert_relative_eq!(g.d_mean[i], fd, max_relative = 1e-5);
        }
        for i in 0..2 {
            for j in i..2 {
                let mut up = mp.clone();
                up.second[(i, j)] += h;
                up.second[(j, i)] = up.second[(i, j)];
                let mut dn = mp.clone();
                dn.second[(i, j)] -= h;
                dn.second[(j, i)] = dn.second[(i, j)];
                let fd = (lognormal_moment(&up, &alpha).unwrap()
                    - lognormal_moment(&dn, &alpha).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(
                    g.d_second[la::sym_index(2, i, j)],
                    fd,
                    max_relative = 1e-5
                );
            }
        }
    }

    proptest! {
        #[test]
        fn roundtrip_central_raw(
            m0 in -3.0f64..3.0, m1 in -3.0f64..3.0,
            a in 0.2f64..2.0, b in -0.5f64..0.5, c in 0.2f64..2.0,
        ) {
            // C = L L^T is PSD by construction
            let l = dmatrix![a, 0.0; b, c];
            let central = &l * l.transpose();
            let mean = dvector![m0, m1];
            let mp = MomentPair::from_central(mean.clone(), central.clone()).unwrap();
            let (m_back, c_back) = raw_to_central(&mp);
            let mp_back = central_to_raw(&m_back, &c_back).unwrap();
            for i in 0..2 {
                prop_assert!((m_back[i] - mean[i]).abs() <= 1e-14 * (1.0 + mean[i].abs()));
                for j in 0..2 {
                    prop_assert!(
                        (c_back[(i,j)] - central[(i,j)]).abs()
                            <= 1e-13 * (1.0 + central[(i,j)].abs())
                    );
                    prop_assert!(
                        (mp_back.second[(i,j)] - mp.second[(i,j)]).abs()
                            <= 1e-13 * (1.0 + mp.second[(i,j)].abs())
                    );
                }
            }
        }

        #[test]
        fn lognormal_scaling_covariance(
            c0 in 0.5f64..3.0, c1 in 0.5f64..3.0,
            s00 in 0.05f64..0.4, s11 in 0.05f64..0.4, rho in -0.6f64..0.6,
        ) {
            // construct a valid log-normal moment pair from underlying normal params
            let sig01 = rho * (s00 * s11).sqrt();
            let mu = dvector![0.2, -0.1];
            let mk = |i: usize, s_ii: f64| (mu[i] + 0.5 * s_ii).exp();
            let mean = dvector![mk(0, s00), mk(1, s11)];
            let mij = |i: usize, j: usize, s: f64| mean[i] * mean[j] * s.exp();
            let second = dmatrix![
                mij(0, 0, s00), mij(0, 1, sig01);
                mij(0, 1, sig01), mij(1, 1, s11)
            ];
            let mp = MomentPair::new(mean.clone(), second.clone()).unwrap();
            let alpha = MultiIndex(vec![2, 1]);

            let scale = dvector![c0, c1];
            let s_mean = mean.component_mul(&scale);
            let mut s_second = second.clone();
            for i in 0..2 {
                for j in 0..2 {
                    s_second[(i, j)] *= scale[i] * scale[j];
                }
            }
            let mp_scaled = MomentPair::new(s_mean, s_second).unwrap();

            let lhs = lognormal_moment(&mp_scaled, &alpha).unwrap();
            let factor = c0.powi(2) * c1;
            let rhs = factor * lognormal_moment(&mp, &alpha).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
        }
    }
}
