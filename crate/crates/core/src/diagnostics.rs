//! Specification tests: first-stage weak-instrument F, Sargan-Hansen
//! overidentification, and the Hausman contrast between nested fits.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::gmm::GmmFit;
use crate::varcomp::{omega_check, VarComp};

#[derive(Clone, Debug, Default)]
pub struct TestReport {
    pub weak_iv_f: Option<f64>,
    pub sargan_stat: Option<f64>,
    pub sargan_df: Option<usize>,
    pub sargan_p: Option<f64>,
    pub hausman_stat: Option<f64>,
    pub hausman_df: Option<usize>,
    pub hausman_p: Option<f64>,
}

/// First-stage F: regress the projected endogenous regressor `J G y` on
/// all instruments and test joint nullity of the excluded block with a
/// school-clustered covariance.
pub fn weak_iv_f(fit: &GmmFit) -> Result<f64> {
    let design = &fit.design;
    let n_excl = design.n_excluded();
    if n_excl < 1 {
        return Err(Error::Diagnostics("no excluded instruments".into()));
    }
    let q = design.schools[0].z.ncols();
    let mut ztz = DMatrix::zeros(q, q);
    let mut ztd = DVector::zeros(q);
    for s in &design.schools {
        let d = s.r.column(0); // J G y
        ztz += s.z.transpose() * &s.z;
        ztd += s.z.transpose() * d;
    }
    let chol = ztz
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Diagnostics("singular first-stage Gram matrix".into()))?;
    let b = chol.solve(&ztd);
    let inv = chol.inverse();
    let mut mid = DMatrix::zeros(q, q);
    for s in &design.schools {
        let u = s.r.column(0) - &s.z * &b;
        let zu = s.z.transpose() * u;
        mid += &zu * zu.transpose();
    }
    let vcov = &inv * mid * &inv;
    // Excluded instruments occupy the leading columns of Z.
    let be = b.rows(0, n_excl).into_owned();
    let ve = vcov.view((0, 0), (n_excl, n_excl)).into_owned();
    let ve_inv = ve
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Diagnostics("singular excluded-block covariance".into()))?;
    Ok((be.transpose() * ve_inv * be)[(0, 0)] / n_excl as f64)
}

fn chi2_upper(stat: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    let d = ChiSquared::new(df as f64).expect("positive df");
    (1.0 - d.cdf(stat.max(0.0))).clamp(0.0, 1.0)
}

/// Sargan-Hansen overidentification test. When variance components are
/// available the moment metric is the model-implied `Omega_check` and the
/// coefficient is re-estimated in that metric; otherwise the clustered
/// two-step metric is used. Returns `None` for exactly identified models.
pub fn sargan(fit: &GmmFit, vc: Option<&VarComp>) -> Result<Option<(f64, usize, f64)>> {
    let design = &fit.design;
    let n_excl = design.n_excluded();
    if n_excl <= 1 {
        return Ok(None); // exactly identified
    }
    let df = n_excl - 1;
    let q = design.schools[0].z.ncols();
    let m = design.schools[0].r.ncols();
    let mut ztr = DMatrix::zeros(q, m);
    let mut zty = DVector::zeros(q);
    for s in &design.schools {
        ztr += s.z.transpose() * &s.r;
        zty += s.z.transpose() * &s.jy;
    }
    let weight = match vc {
        Some(vc) => {
            let omega = omega_check(fit, vc);
            crate::gmm::sym_pinv(&omega, 1e-12).0
        }
        None => {
            let mut mid = DMatrix::zeros(q, q);
            for (s, v) in design.schools.iter().zip(&fit.residuals) {
                let zv = s.z.transpose() * v;
                mid += &zv * zv.transpose();
            }
            crate::gmm::sym_pinv(&mid, 1e-12).0
        }
    };
    // Re-estimate in the test metric so the quadratic form is minimized.
    let a = ztr.transpose() * &weight * &ztr;
    let bvec = ztr.transpose() * &weight * &zty;
    let coef = a
        .lu()
        .solve(&bvec)
        .ok_or_else(|| Error::Diagnostics("singular system in Sargan metric".into()))?;
    let mut g = DVector::zeros(q);
    for s in &design.schools {
        g += s.z.transpose() * (&s.jy - &s.r * &coef);
    }
    let stat = (g.transpose() * &weight * &g)[(0, 0)].max(0.0);
    Ok(Some((stat, df, chi2_upper(stat, df))))
}

/// Per-school influence contributions to the coefficient vector under the
/// one-step instrument metric: `psi_hat - psi = sum_s H Z_s' v_s` with
/// `H = (R'Z(Z'Z)^-1 Z'R)^-1 R'Z(Z'Z)^-1`. The contributions sum to zero
/// exactly by the estimator's normal equations.
fn influences(fit: &GmmFit) -> Result<Vec<DVector<f64>>> {
    let q = fit.design.schools[0].z.ncols();
    let m = fit.design.schools[0].r.ncols();
    let mut ztz = DMatrix::zeros(q, q);
    let mut ztr = DMatrix::zeros(q, m);
    for s in &fit.design.schools {
        ztz += s.z.transpose() * &s.z;
        ztr += s.z.transpose() * &s.r;
    }
    let w = ztz
        .cholesky()
        .ok_or_else(|| Error::Diagnostics("singular instrument Gram matrix".into()))?
        .inverse();
    let a = (ztr.transpose() * &w * &ztr)
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Diagnostics("singular bread matrix".into()))?;
    let h = a * ztr.transpose() * w;
    Ok(fit
        .design
        .schools
        .iter()
        .zip(&fit.residuals)
        .map(|(s, v)| &h * (s.z.transpose() * v))
        .collect())
}

/// Hausman contrast over the coefficient labels common to both fits.
/// `lambda_only` restricts the contrast to the peer effect itself.
///
/// The covariance of `d = psi_restr - psi_flex` is estimated from paired
/// per-school influence contributions, `sum_s (phi_rs - phi_fs)(..)'`,
/// rather than as a difference of marginal covariances: neither estimator
/// is efficient here, the two are strongly positively correlated on the
/// same data, and the variance difference is neither PSD nor correctly
/// sized.
pub fn hausman(
    fit_restricted: &GmmFit,
    fit_flexible: &GmmFit,
    lambda_only: bool,
) -> Result<(f64, usize, f64)> {
    let labels: Vec<&String> = fit_flexible
        .design
        .coef_labels
        .iter()
        .filter(|l| {
            (!lambda_only || l.as_str() == "lambda")
                && fit_restricted.design.coef_labels.contains(l)
        })
        .collect();
    if labels.is_empty() {
        return Err(Error::Diagnostics("no common coefficients to contrast".into()));
    }
    let idx = |fit: &GmmFit, l: &str| {
        fit.design
            .coef_labels
            .iter()
            .position(|x| x == l)
            .expect("label present")
    };
    let ir: Vec<usize> = labels.iter().map(|l| idx(fit_restricted, l)).collect();
    let if_: Vec<usize> = labels.iter().map(|l| idx(fit_flexible, l)).collect();
    let k = labels.len();
    let mut d = DVector::zeros(k);
    for a in 0..k {
        d[a] = fit_restricted.coef[ir[a]] - fit_flexible.coef[if_[a]];
    }
    let phi_r = influences(fit_restricted)?;
    let phi_f = influences(fit_flexible)?;
    let mut v = DMatrix::zeros(k, k);
    for s in 0..phi_r.len() {
        let mut dphi = DVector::zeros(k);
        for a in 0..k {
            dphi[a] = phi_r[s][ir[a]] - phi_f[s][if_[a]];
        }
        v += &dphi * dphi.transpose();
    }
    let (pinv, rank) = crate::gmm::sym_pinv(&v, 1e-10);
    let stat = (d.transpose() * pinv * &d)[(0, 0)].max(0.0);
    Ok((stat, rank, chi2_upper(stat, rank)))
}

/// Assemble the standard report for a fit.
pub fn report(
    fit: &GmmFit,
    vc: Option<&VarComp>,
    flexible: Option<&GmmFit>,
) -> Result<TestReport> {
    let f = weak_iv_f(fit)?;
    let sg = sargan(fit, vc)?;
    let hm = match flexible {
        Some(flex) => Some(hausman(fit, flex, false)?),
        None => None,
    };
    Ok(TestReport {
        weak_iv_f: Some(f),
        sargan_stat: sg.map(|t| t.0),
        sargan_df: sg.map(|t| t.1),
        sargan_p: sg.map(|t| t.2),
        hausman_stat: hm.map(|t| t.0),
        hausman_df: hm.map(|t| t.1),
        hausman_p: hm.map(|t| t.2),
    })
}

/// Upper-tail p-value helper for an F statistic (used by callers that want
/// a p-value to accompany `weak_iv_f`).
pub fn f_upper(stat: f64, df1: usize, df2: usize) -> f64 {
    if df1 == 0 || df2 == 0 {
        return 1.0;
    }
    let d = FisherSnedecor::new(df1 as f64, df2 as f64).expect("positive dfs");
    (1.0 - d.cdf(stat.max(0.0))).clamp(0.0, 1.0)
}
