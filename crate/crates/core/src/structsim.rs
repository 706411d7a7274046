//! The structural network game: best responses, the unique Nash
//! equilibrium in effort, and the outcome (GPA) production function.
//!
//! Used both to generate synthetic data and as the simulation oracle for
//! the estimators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::netgraph::SchoolNetwork;

/// Full structural parameter set. `alpha[s]` and `c[s]` are per-school
/// shifters of output and of marginal payoff respectively.
#[derive(Debug, Clone)]
pub struct StructuralParams {
    pub lambda: f64,
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub delta: f64,
    pub theta: DVector<f64>,
    pub alpha: Vec<f64>,
    pub c: Vec<f64>,
    pub sigma_eta2: f64,
    pub sigma_eps2: f64,
    pub rho: f64,
}

impl StructuralParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.abs() >= 1.0 {
            return Err(Error::Simulation(format!(
                "|lambda| = {} >= 1: equilibrium not unique",
                self.lambda.abs()
            )));
        }
        if self.delta <= 0.0 {
            return Err(Error::Simulation("delta must be positive".into()));
        }
        if self.sigma_eta2 <= 0.0 || self.sigma_eps2 <= 0.0 {
            return Err(Error::Simulation("shock variances must be positive".into()));
        }
        if self.rho.abs() > 1.0 {
            return Err(Error::Simulation("|rho| must be <= 1".into()));
        }
        Ok(())
    }

    /// Composite reduced-form slopes: `beta_tilde = delta^2 beta + theta`,
    /// `gamma_tilde = delta^2 gamma - lambda theta`.
    pub fn composite_slopes(&self) -> (DVector<f64>, DVector<f64>) {
        let d2 = self.delta * self.delta;
        let beta_t = &self.beta * d2 + &self.theta;
        let gamma_t = &self.gamma * d2 - &self.theta * self.lambda;
        (beta_t, gamma_t)
    }
}

/// One school's data. `effort`, `eta`, `eps` are populated by simulation
/// only; `eps` stores the scaled draw `delta^2 * epsilon`, the object whose
/// variance is `sigma_eps2`.
#[derive(Debug, Clone)]
pub struct SchoolData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub effort: Option<DVector<f64>>,
    pub eta: Option<DVector<f64>>,
    pub eps: Option<DVector<f64>>,
}

impl SchoolData {
    pub fn check_against(&self, net: &SchoolNetwork) -> Result<()> {
        if self.x.nrows() != net.n || self.y.len() != net.n {
            return Err(Error::Simulation(format!(
                "school {}: data rows ({} / {}) do not match network size {}",
                net.school_id,
                self.x.nrows(),
                self.y.len(),
                net.n
            )));
        }
        Ok(())
    }
}

/// Solve the unique Nash equilibrium in effort,
/// `e = (I - lambda G)^{-1} delta (c 1 + X beta + G X gamma + eps)`,
/// by a direct dense linear solve. `eps` is the raw structural shock.
pub fn solve_equilibrium(
    net: &SchoolNetwork,
    x: &DMatrix<f64>,
    params: &StructuralParams,
    school_idx: usize,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    params.validate()?;
    let g = net.interaction();
    let gx = g.mul_mat(x);
    let rhs = (DVector::from_element(net.n, params.c[school_idx])
        + x * &params.beta
        + gx * &params.gamma
        + eps)
        * params.delta;
    let a = DMatrix::identity(net.n, net.n) - g.to_dense() * params.lambda;
    a.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Simulation("equilibrium system singular".into()))
}

/// Outcome production: `y = alpha 1 + delta e + X theta + eta`.
pub fn produce_gpa(
    x: &DMatrix<f64>,
    effort: &DVector<f64>,
    params: &StructuralParams,
    school_idx: usize,
    eta: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_element(effort.len(), params.alpha[school_idx])
        + effort * params.delta
        + x * &params.theta
        + eta
}

/// Reduced-form intercepts for one school:
/// `kappa_I = delta^2 c + alpha`, `kappa_NI = delta^2 c + (1 - lambda) alpha`.
pub fn reduced_form_intercepts(params: &StructuralParams, school_idx: usize) -> (f64, f64) {
    let d2 = params.delta * params.delta;
    let c = params.c[school_idx];
    let a = params.alpha[school_idx];
    (d2 * c + a, d2 * c + (1.0 - params.lambda) * a)
}

/// Draw `n` i.i.d. bivariate normal pairs `(eta, delta^2 eps)` with
/// variances `sigma_eta2`, `sigma_eps2` and correlation `rho`.
pub fn draw_shocks<R: Rng + ?Sized>(
    n: usize,
    sigma_eta2: f64,
    sigma_eps2: f64,
    rho: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if sigma_eta2 <= 0.0 || sigma_eps2 <= 0.0 {
        return Err(Error::Simulation("shock variances must be positive".into()));
    }
    if rho.abs() > 1.0 {
        return Err(Error::Simulation("|rho| must be <= 1".into()));
    }
    let s_eta = sigma_eta2.sqrt();
    let s_eps = sigma_eps2.sqrt();
    let tail = (1.0 - rho * rho).max(0.0).sqrt();
    let mut eta = DVector::zeros(n);
    let mut eps = DVector::zeros(n);
    for i in 0..n {
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        eta[i] = s_eta * z1;
        eps[i] = s_eps * (rho * z1 + tail * z2);
    }
    Ok((eta, eps))
}

/// Simulate one school end to end: draw shocks, solve the equilibrium and
/// produce outcomes. Stores latent effort and the shock draws.
pub fn simulate_school<R: Rng + ?Sized>(
    net: &SchoolNetwork,
    x: &DMatrix<f64>,
    params: &StructuralParams,
    school_idx: usize,
    rng: &mut R,
) -> Result<SchoolData> {
    let (eta, eps2) = draw_shocks(net.n, params.sigma_eta2, params.sigma_eps2, params.rho, rng)?;
    // The stored draw is delta^2 * epsilon; the game is solved in epsilon.
    let eps_raw = &eps2 / (params.delta * params.delta);
    let effort = solve_equilibrium(net, x, params, school_idx, &eps_raw)?;
    let y = produce_gpa(x, &effort, params, school_idx, &eta);
    Ok(SchoolData {
        x: x.clone(),
        y,
        effort: Some(effort),
        eta: Some(eta),
        eps: Some(eps2),
    })
}

/// Solve the reduced form directly:
/// `y = kappa-pattern + lambda G y + X beta~ + G X gamma~ + (I - lambda G) eta + delta^2 eps`.
/// Serves as an independent oracle for the structural pipeline.
pub fn solve_reduced_form(
    net: &SchoolNetwork,
    x: &DMatrix<f64>,
    params: &StructuralParams,
    school_idx: usize,
    eta: &DVector<f64>,
    eps2: &DVector<f64>,
) -> Result<DVector<f64>> {
    params.validate()?;
    let (kappa_i, kappa_ni) = reduced_form_intercepts(params, school_idx);
    let kappa = DVector::from_iterator(
        net.n,
        net.iso_mask
            .iter()
            .map(|&iso| if iso { kappa_i } else { kappa_ni }),
    );
    let g = net.interaction();
    let (beta_t, gamma_t) = params.composite_slopes();
    let gd = g.to_dense();
    let w = DMatrix::identity(net.n, net.n) - &gd * params.lambda;
    let rhs = kappa + x * beta_t + g.mul_mat(x) * gamma_t + &w * eta + eps2;
    w.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Simulation("reduced-form system singular".into()))
}
