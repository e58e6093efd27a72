//! The debiased point estimate, its asymptotic covariance as a function of
//! the tuning matrix Ω, and the variance-minimizing choices of Ω.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum TuningMatrix {
    Identity,
    Diagonal(Vec<f64>),
    Full(Matrix),
}

impl TuningMatrix {
    pub fn zero(d: usize) -> Self {
        TuningMatrix::Diagonal(vec![0.0; d])
    }

    pub fn to_matrix(&self, d: usize) -> Matrix {
        match self {
            TuningMatrix::Identity => Matrix::identity(d),
            TuningMatrix::Diagonal(v) => Matrix::diag(v),
            TuningMatrix::Full(m) => m.clone(),
        }
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        let ok = match self {
            TuningMatrix::Identity => true,
            TuningMatrix::Diagonal(v) => v.len() == d && v.iter().all(|x| x.is_finite()),
            TuningMatrix::Full(m) => m.rows() == d && m.cols() == d && m.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("tuning matrix does not fit dimension {d}")))
        }
    }

    /// Ω v
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v.len())?;
        Ok(match self {
            TuningMatrix::Identity => v.to_vec(),
            TuningMatrix::Diagonal(w) => w.iter().zip(v).map(|(a, b)| a * b).collect(),
            TuningMatrix::Full(m) => m.mul_vec(v)?,
        })
    }
}

/// Asymptotic covariances (scaled by N) of the three fits:
/// Σθ• = Var(θ̂•), Σγ• = Var(γ̂•), Σγ° = Var(γ̂°), Σθγ• = Cov(θ̂•, γ̂•).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceBundle {
    pub sigma_theta_c: Matrix,
    pub sigma_gamma_c: Matrix,
    pub sigma_gamma_o: Matrix,
    pub sigma_cross: Matrix,
}

impl CovarianceBundle {
    pub fn dim(&self) -> usize {
        self.sigma_theta_c.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for m in [&self.sigma_theta_c, &self.sigma_gamma_c, &self.sigma_gamma_o, &self.sigma_cross] {
            if m.rows() != d || m.cols() != d {
                return Err(Error::ShapeMismatch("covariance bundle blocks differ in size".into()));
            }
        }
        Ok(())
    }

    /// Σγ• + Σγ°
    fn gamma_total(&self) -> Matrix {
        self.sigma_gamma_c.add(&self.sigma_gamma_o).expect("validated shapes")
    }
}

/// Ω γ° + (θ• − Ω γ•)
pub fn ptd_combine(omega: &TuningMatrix, gamma_o: &[f64], theta_c: &[f64], gamma_c: &[f64]) -> Result<Vec<f64>> {
    let d = theta_c.len();
    if gamma_o.len() != d || gamma_c.len() != d {
        return Err(Error::ShapeMismatch("estimate vectors differ in length".into()));
    }
    let diff: Vec<f64> = gamma_o.iter().zip(gamma_c).map(|(a, b)| a - b).collect();
    let shift = omega.apply(&diff)?;
    Ok(theta_c.iter().zip(&shift).map(|(t, s)| t + s).collect())
}

/// Per-coordinate optimum `[Σθγ•]_jj / [Σγ• + Σγ°]_jj`.
pub fn optimal_diag_tuning(cov: &CovarianceBundle) -> Result<TuningMatrix> {
    cov.validate()?;
    let total = cov.gamma_total();
    let d = cov.dim();
    let scale = total.trace().abs() / d as f64;
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let den = total[(j, j)];
        if !(den > 1e-14 * scale) {
            return Err(Error::DegenerateDenominator(j));
        }
        out.push(cov.sigma_cross[(j, j)] / den);
    }
    Ok(TuningMatrix::Diagonal(out))
}

/// `Σθγ• (Σγ• + Σγ°)⁻¹`, minimizing every diagonal entry of the asymptotic
/// covariance at once.
pub fn optimal_full_tuning(cov: &CovarianceBundle) -> Result<TuningMatrix> {
    cov.validate()?;
    full_tuning_from(&cov.sigma_cross, &cov.gamma_total())
}

fn full_tuning_from(cross: &Matrix, total: &Matrix) -> Result<TuningMatrix> {
    // S Ωᵀ = Σθγᵀ with S symmetric
    let omega_t = solve_spd(total, &cross.transpose())?;
    Ok(TuningMatrix::Full(omega_t.transpose()))
}

/// [`optimal_full_tuning`], retrying with a ridge of `1e-10·trace/d` when the
/// denominator is numerically singular. The flag reports whether the ridge
/// was needed.
pub fn optimal_full_tuning_ridged(cov: &CovarianceBundle) -> Result<(TuningMatrix, bool)> {
    match optimal_full_tuning(cov) {
        Ok(t) => Ok((t, false)),
        Err(Error::NotSpd { .. }) => {
            let total = cov.gamma_total();
            let d = cov.dim();
            let ridge = 1e-10 * total.trace().abs().max(f64::MIN_POSITIVE) / d as f64;
            let ridged = total.add(&Matrix::identity(d).scale(ridge)).expect("same shape");
            Ok((full_tuning_from(&cov.sigma_cross, &ridged)?, true))
        }
        Err(e) => Err(e),
    }
}

/// Σθ• − Σθγ• Ωᵀ − Ω Σθγ•ᵀ + Ω (Σγ• + Σγ°) Ωᵀ
pub fn ptd_asymptotic_variance(omega: &TuningMatrix, cov: &CovarianceBundle) -> Result<Matrix> {
    cov.validate()?;
    let d = cov.dim();
    omega.check_dim(d)?;
    let om = omega.to_matrix(d);
    let om_t = om.transpose();
    let cross_om = cov.sigma_cross.matmul(&om_t)?;
    let quad = om.matmul(&cov.gamma_total())?.matmul(&om_t)?;
    cov.sigma_theta_c.sub(&cross_om)?.sub(&cross_om.transpose())?.add(&quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_bundle(t: f64, gc: f64, go: f64, x: f64) -> CovarianceBundle {
        let m = |v| Matrix::from_rows(&[[v]]).unwrap();
        CovarianceBundle { sigma_theta_c: m(t), sigma_gamma_c: m(gc), sigma_gamma_o: m(go), sigma_cross: m(x) }
    }

    /// Covariance bundle read off a random joint covariance of
    /// (θ•, γ•, γ°) with γ° independent of the other two.
    pub(crate) fn random_bundle(d: usize, rng: &mut impl Rng) -> CovarianceBundle {
        let k = 2 * d;
        let a = Matrix::from_vec(k, k + 2, (0..k * (k + 2)).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let joint = a.matmul(&a.transpose()).unwrap();
        let block = |r0: usize, c0: usize| {
            let mut m = Matrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] = joint[(r0 + i, c0 + j)];
                }
            }
            m
        };
        let b = Matrix::from_vec(d, d + 1, (0..d * (d + 1)).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        CovarianceBundle {
            sigma_theta_c: block(0, 0),
            sigma_gamma_c: block(d, d),
            sigma_gamma_o: b.matmul(&b.transpose()).unwrap(),
            sigma_cross: block(0, d),
        }
    }

    #[test]
    fn combine_examples() {
        assert_eq!(ptd_combine(&TuningMatrix::zero(1), &[9.0], &[1.0], &[3.0]).unwrap(), vec![1.0]);
        assert_eq!(ptd_combine(&TuningMatrix::Identity, &[2.5, 1.0], &[1.0, 7.0], &[2.5, 1.0]).unwrap(), vec![1.0, 7.0]);
        assert_eq!(ptd_combine(&TuningMatrix::Diagonal(vec![0.5]), &[4.0], &[1.0], &[2.0]).unwrap(), vec![2.0]);
        assert!(ptd_combine(&TuningMatrix::Identity, &[1.0], &[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn diag_tuning_examples() {
        assert_eq!(optimal_diag_tuning(&scalar_bundle(5.0, 1.0, 3.0, 2.0)).unwrap(), TuningMatrix::Diagonal(vec![0.5]));
        assert_eq!(optimal_diag_tuning(&scalar_bundle(5.0, 1.0, 3.0, 0.0)).unwrap(), TuningMatrix::Diagonal(vec![0.0]));
        assert_eq!(optimal_diag_tuning(&scalar_bundle(5.0, 0.0, 0.0, 0.0)), Err(Error::DegenerateDenominator(0)));
    }

    #[test]
    fn diag_tuning_minimizes_over_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let cov = random_bundle(3, &mut rng);
            let TuningMatrix::Diagonal(opt) = optimal_diag_tuning(&cov).unwrap() else { unreachable!() };
            for j in 0..3 {
                let var_at = |w: f64| {
                    let mut v = opt.clone();
                    v[j] = w;
                    ptd_asymptotic_variance(&TuningMatrix::Diagonal(v), &cov).unwrap()[(j, j)]
                };
                let best = var_at(opt[j]);
                let mut w = -3.0;
                while w <= 3.0 {
                    assert!(best <= var_at(w) + 1e-10);
                    w += 1e-3;
                }
            }
        }
    }

    #[test]
    fn full_tuning_examples() {
        let mut cov = scalar_bundle(5.0, 1.0, 3.0, 2.0);
        assert_eq!(optimal_full_tuning(&cov).unwrap(), TuningMatrix::Full(Matrix::from_rows(&[[0.5]]).unwrap()));
        let d = Matrix::diag(&[1.0, 2.0]);
        cov = CovarianceBundle {
            sigma_theta_c: Matrix::identity(2),
            sigma_gamma_c: d.clone(),
            sigma_gamma_o: d.clone(),
            sigma_cross: d.scale(2.0),
        };
        let TuningMatrix::Full(full) = optimal_full_tuning(&cov).unwrap() else { unreachable!() };
        assert!(full.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn full_matches_diag_on_diagonal_bundles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let diag = |rng: &mut ChaCha8Rng, lo: f64| Matrix::diag(&(0..4).map(|_| lo + rng.random::<f64>()).collect::<Vec<_>>());
            let cov = CovarianceBundle {
                sigma_theta_c: diag(&mut rng, 1.0),
                sigma_gamma_c: diag(&mut rng, 0.1),
                sigma_gamma_o: diag(&mut rng, 0.1),
                sigma_cross: diag(&mut rng, -0.5),
            };
            let TuningMatrix::Full(full) = optimal_full_tuning(&cov).unwrap() else { unreachable!() };
            let TuningMatrix::Diagonal(dg) = optimal_diag_tuning(&cov).unwrap() else { unreachable!() };
            for i in 0..4 {
                for j in 0..4 {
                    let want = if i == j { dg[i] } else { 0.0 };
                    assert!((full[(i, j)] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ridge_fallback() {
        let cov = CovarianceBundle {
            sigma_theta_c: Matrix::identity(2),
            sigma_gamma_c: Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap(),
            sigma_gamma_o: Matrix::zeros(2, 2),
            sigma_cross: Matrix::identity(2),
        };
        assert!(matches!(optimal_full_tuning(&cov), Err(Error::NotSpd { .. })));
        let (t, ridged) = optimal_full_tuning_ridged(&cov).unwrap();
        assert!(ridged);
        assert!(t.check_dim(2).is_ok());
    }

    #[test]
    fn variance_examples() {
        let cov = random_bundle(2, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(ptd_asymptotic_variance(&TuningMatrix::zero(2), &cov).unwrap(), cov.sigma_theta_c);
        let special = CovarianceBundle {
            sigma_theta_c: cov.sigma_theta_c.clone(),
            sigma_gamma_c: cov.sigma_gamma_c.clone(),
            sigma_gamma_o: Matrix::zeros(2, 2),
            sigma_cross: cov.sigma_gamma_c.clone(),
        };
        let v = ptd_asymptotic_variance(&TuningMatrix::Identity, &special).unwrap();
        assert!(v.sub(&cov.sigma_theta_c.sub(&cov.sigma_gamma_c).unwrap()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn variance_at_optimum_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for d in 1..5 {
            let cov = random_bundle(d, &mut rng);
            let v = ptd_asymptotic_variance(&optimal_full_tuning(&cov).unwrap(), &cov).unwrap();
            let total = cov.sigma_gamma_c.add(&cov.sigma_gamma_o).unwrap();
            let closed = cov
                .sigma_theta_c
                .sub(&cov.sigma_cross.matmul(&solve_spd(&total, &cov.sigma_cross.transpose()).unwrap()).unwrap())
                .unwrap();
            assert!(v.sub(&closed).unwrap().max_abs() < 1e-10 * cov.sigma_theta_c.max_abs().max(1.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn optimum_dominates_random_tuning(seed in any::<u64>(), d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cov = random_bundle(d, &mut rng);
            let opt = ptd_asymptotic_variance(&optimal_full_tuning(&cov).unwrap(), &cov).unwrap();
            for j in 0..d {
                prop_assert!(opt[(j, j)] <= cov.sigma_theta_c[(j, j)] + 1e-10);
            }
            for _ in 0..20 {
                let om = Matrix::from_vec(d, d, (0..d * d).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
                let v = ptd_asymptotic_variance(&TuningMatrix::Full(om), &cov).unwrap();
                for j in 0..d {
                    prop_assert!(opt[(j, j)] <= v[(j, j)] + 1e-10);
                }
            }
        }

        #[test]
        fn combine_is_affine(a in -5.0f64..5.0, b in -5.0f64..5.0, w in -2.0f64..2.0, t in 0.0f64..1.0) {
            let omega = TuningMatrix::Diagonal(vec![w]);
            let f = |g: f64| ptd_combine(&omega, &[g], &[a], &[b]).unwrap()[0];
            let lhs = f(t * 3.0 + (1.0 - t) * -1.0);
            let rhs = t * f(3.0) + (1.0 - t) * f(-1.0);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
