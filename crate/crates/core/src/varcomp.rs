//! Error-variance components by concentrated quasi-maximum likelihood.
//!
//! The projected residual of school `s` has covariance proportional to
//! `Omega_s = I + tau^2 F'WW'F + rho tau F'(W + W')F` with `W = I - lambda G`
//! and `tau = sigma_eta / sigma_eps`. The scale `sigma_eps^2` is profiled
//! out analytically, leaving a two-dimensional search over `(tau, rho)`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::GmmFit;
use crate::netgraph::{build_annihilator, SchoolNetwork};

#[derive(Clone, Debug)]
pub struct VarComp {
    pub sigma_eta2: f64,
    pub sigma_eps2: f64,
    pub rho: f64,
    /// `sigma_eta / sigma_eps`.
    pub tau: f64,
    /// Concentrated objective at the optimum (equals the full Gaussian
    /// log-likelihood up to the `-df/2 log 2 pi` constant).
    pub llh: f64,
    pub converged: bool,
    /// Optimum at the edge of the search region (`tau` near zero or
    /// `|rho|` near one).
    pub boundary: bool,
    pub warnings: Vec<String>,
}

/// Per-school quantities that depend only on `lambda_hat`, cached once so
/// each `(tau, rho)` evaluation is a small dense factorization.
pub(crate) struct SchoolPre {
    /// `F' W W' F`
    a: DMatrix<f64>,
    /// `F' (W + W') F`
    b: DMatrix<f64>,
    /// `F' v_hat`
    fv: DVector<f64>,
}

pub(crate) fn precompute(
    fs: &[DMatrix<f64>],
    gs: &[DMatrix<f64>],
    residuals: &[DVector<f64>],
    lambda_hat: f64,
) -> (Vec<SchoolPre>, usize) {
    let mut pre = Vec::with_capacity(fs.len());
    let mut df = 0usize;
    for ((f, g), v) in fs.iter().zip(gs).zip(residuals) {
        let n = g.nrows();
        let w = DMatrix::identity(n, n) - g * lambda_hat;
        let fw = f.transpose() * &w;
        let a = &fw * fw.transpose();
        let b = {
            let s = &w + w.transpose();
            f.transpose() * s * f
        };
        pre.push(SchoolPre {
            a,
            b,
            fv: f.transpose() * v,
        });
        df += f.ncols();
    }
    (pre, df)
}

/// Evaluate the concentrated objective; also returns the profiled-out
/// residual scale. Non-positive-definite `Omega_s` yields `-inf`.
fn objective(tau: f64, rho: f64, pre: &[SchoolPre], df: usize) -> (f64, f64) {
    if !(tau > 0.0) || rho.abs() > 1.0 {
        return (f64::NEG_INFINITY, f64::NAN);
    }
    let mut logdet = 0.0;
    let mut quad = 0.0;
    for p in pre {
        let k = p.a.nrows();
        let omega = DMatrix::identity(k, k) + &p.a * (tau * tau) + &p.b * (rho * tau);
        let chol = match Cholesky::new(omega) {
            Some(c) => c,
            None => return (f64::NEG_INFINITY, f64::NAN),
        };
        for i in 0..k {
            logdet += 2.0 * chol.l_dirty()[(i, i)].ln();
        }
        let sol = chol.solve(&p.fv);
        quad += p.fv.dot(&sol);
    }
    if quad <= 0.0 {
        return (f64::NEG_INFINITY, f64::NAN);
    }
    let dff = df as f64;
    let sigma2 = quad / dff;
    let llh = -0.5 * dff * sigma2.ln() - 0.5 * logdet - 0.5 * dff;
    (llh, sigma2)
}

/// Concentrated quasi-log-likelihood at `(tau, rho)` given `lambda_hat`,
/// per-school residuals and networks (dual-group projection).
pub fn concentrated_objective(
    tau: f64,
    rho: f64,
    lambda_hat: f64,
    residuals: &[DVector<f64>],
    nets: &[SchoolNetwork],
) -> f64 {
    let fs: Vec<DMatrix<f64>> = nets.iter().map(|n| build_annihilator(n).f).collect();
    let gs: Vec<DMatrix<f64>> = nets.iter().map(|n| n.interaction().to_dense()).collect();
    concentrated_objective_with_bases(tau, rho, lambda_hat, residuals, &fs, &gs)
}

/// Same objective with caller-supplied per-school projection bases. The
/// columns of each `fs[s]` must be orthonormal; any basis of the same
/// column space yields the same value.
pub fn concentrated_objective_with_bases(
    tau: f64,
    rho: f64,
    lambda_hat: f64,
    residuals: &[DVector<f64>],
    fs: &[DMatrix<f64>],
    gs: &[DMatrix<f64>],
) -> f64 {
    let (pre, df) = precompute(fs, gs, residuals, lambda_hat);
    objective(tau, rho, &pre, df).0
}

const TAU_MIN: f64 = 0.02;
const TAU_MAX: f64 = 50.0;

fn golden_max(mut lo: f64, mut hi: f64, f: &dyn Fn(f64) -> f64, iters: usize) -> (f64, f64) {
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

fn maximize(pre: &[SchoolPre], df: usize) -> (f64, f64, f64, bool) {
    // Coarse 21 x 21 grid: geometric in tau, linear in rho.
    let ratio = (TAU_MAX / TAU_MIN).powf(1.0 / 20.0);
    let taus: Vec<f64> = (0..21).map(|i| TAU_MIN * ratio.powi(i)).collect();
    let rhos: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
    let mut best = (taus[0], rhos[10], f64::NEG_INFINITY);
    for &t in &taus {
        for &r in &rhos {
            let (v, _) = objective(t, r, pre, df);
            if v > best.2 {
                best = (t, r, v);
            }
        }
    }
    // Derivative-free polish: alternating golden-section sweeps in
    // log(tau) and rho around the incumbent.
    let (mut tau, mut rho, mut val) = best;
    let mut converged = false;
    for sweep in 0..8 {
        let rho_fixed = rho;
        let (lt, vt) = golden_max(
            (tau.ln() - 1.2).max(TAU_MIN.ln()),
            (tau.ln() + 1.2).min(TAU_MAX.ln()),
            &|lt| objective(lt.exp(), rho_fixed, pre, df).0,
            24,
        );
        tau = lt.exp();
        let tau_fixed = tau;
        let (r, vr) = golden_max(
            (rho - 0.3).max(-1.0),
            (rho + 0.3).min(1.0),
            &|r| objective(tau_fixed, r, pre, df).0,
            24,
        );
        rho = r;
        let new_val = vr.max(vt);
        if sweep > 0 && (new_val - val).abs() <= 1e-10 * (1.0 + val.abs()) {
            val = new_val;
            converged = true;
            break;
        }
        val = new_val;
    }
    (tau, rho, val, converged)
}

/// Estimate `(sigma_eps^2, sigma_eta^2, rho)` from a fitted model's
/// projected residuals.
pub fn fit_varcomp(fit: &GmmFit) -> Result<VarComp> {
    let lambda_hat = fit.lambda();
    let mut warnings = Vec::new();
    if lambda_hat.abs() < 0.01 {
        warnings.push(format!(
            "lambda_hat = {lambda_hat:.4} near zero: variance components weakly identified"
        ));
    }
    let fs: Vec<DMatrix<f64>> = fit.design.schools.iter().map(|s| s.ann.f.clone()).collect();
    let gs: Vec<DMatrix<f64>> = fit.design.schools.iter().map(|s| s.g.clone()).collect();
    // Normalize the residual scale by a power of two before the search:
    // the division is exact, so the (tau, rho) optimum is bit-for-bit
    // invariant to rescaling the residuals, and only the profiled-out
    // variance carries the scale.
    let ssq: f64 = fit.residuals.iter().map(|v| v.norm_squared()).sum();
    let n_total: usize = fit.residuals.iter().map(|v| v.len()).sum();
    if n_total == 0 || !(ssq > 0.0) {
        return Err(Error::VarComp("residuals are empty or identically zero".into()));
    }
    let scale = ((ssq / n_total as f64).sqrt().log2().round() as i32).max(-500).min(500);
    let scale = (2.0_f64).powi(scale);
    let residuals: Vec<DVector<f64>> = fit.residuals.iter().map(|v| v / scale).collect();
    let (pre, df) = precompute(&fs, &gs, &residuals, lambda_hat);
    if df == 0 {
        return Err(Error::VarComp("no degrees of freedom after projection".into()));
    }
    let (tau, rho, llh_norm, converged) = maximize(&pre, df);
    if !llh_norm.is_finite() {
        return Err(Error::VarComp("objective not finite anywhere on the grid".into()));
    }
    let (_, sigma_norm) = objective(tau, rho, &pre, df);
    let sigma_eps2 = sigma_norm * scale * scale;
    let llh = llh_norm - df as f64 * scale.ln();
    let boundary = tau <= TAU_MIN * 1.05 || tau >= TAU_MAX * 0.95 || rho.abs() >= 0.999;
    if boundary {
        warnings.push(format!(
            "optimum at search boundary: tau = {tau:.4}, rho = {rho:.4}"
        ));
    }
    if !converged {
        warnings.push("polish sweeps did not converge".into());
    }
    Ok(VarComp {
        sigma_eta2: tau * tau * sigma_eps2,
        sigma_eps2,
        rho,
        tau,
        llh,
        converged,
        boundary,
        warnings,
    })
}

/// Model-implied moment covariance
/// `Omega_check = sum_s Z_s' (sigma_eps^2 J + sigma_eta^2 J W W' J
///  + rho sigma_eps sigma_eta J (W + W') J) Z_s`.
pub fn omega_check(fit: &GmmFit, vc: &VarComp) -> DMatrix<f64> {
    let lambda_hat = fit.lambda();
    let q = fit.design.schools[0].z.ncols();
    let mut out = DMatrix::zeros(q, q);
    let s_e = vc.sigma_eps2.sqrt();
    let s_h = vc.sigma_eta2.sqrt();
    for s in &fit.design.schools {
        let n = s.g.nrows();
        let w = DMatrix::identity(n, n) - &s.g * lambda_hat;
        let jw = &s.ann.j * &w;
        // The trailing J of each term is dropped: Z's columns lie in
        // range(J), so J Z = Z.
        let mid = &s.ann.j * vc.sigma_eps2
            + &jw * jw.transpose() * vc.sigma_eta2
            + (&jw + jw.transpose()) * (vc.rho * s_e * s_h);
        out += s.z.transpose() * mid * &s.z;
    }
    (&out + out.transpose()) * 0.5
}

/// QML-based sandwich covariance of the coefficient vector:
/// `B^-1 D B^-1` with the clustered middle replaced by the model-implied
/// `Omega_check`.
pub fn qml_vcov(fit: &GmmFit, vc: &VarComp) -> Result<DMatrix<f64>> {
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
        .ok_or_else(|| Error::VarComp("singular instrument Gram matrix".into()))?
        .inverse();
    let a = ztr.transpose() * &w * &ztr;
    let a_inv = a
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::VarComp("singular bread matrix".into()))?;
    let omega = omega_check(fit, vc);
    let v = &a_inv * ztr.transpose() * &w * omega * &w * &ztr * &a_inv;
    Ok((&v + v.transpose()) * 0.5)
}
