//! Instrumented GMM estimation of the outcome equation after fixed-effect
//! annihilation.
//!
//! Four nested specifications are supported:
//! * Model 1 — single global intercept (constant column, no projection);
//! * Model 2 — school fixed effects (within-school demeaning);
//! * Model 3 — school fixed effects plus a pooled has-friends dummy;
//! * Model 4 — dual fixed effects per school x isolation status.
//!
//! The endogenous regressor `J G y` is instrumented by `J G^q X`,
//! `q = 2..p`. The default estimator is 2SLS (GMM with weight `(Z'Z)^-1`);
//! two-step efficient GMM with the school-clustered weight is available
//! behind an option.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::netgraph::{build_annihilator, single_group_annihilator, Annihilator, SchoolNetwork};
use crate::structsim::SchoolData;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelVariant {
    Model1,
    Model2,
    Model3,
    Model4,
}

impl ModelVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::Model1 => "model1",
            ModelVariant::Model2 => "model2",
            ModelVariant::Model3 => "model3",
            ModelVariant::Model4 => "model4",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub variant: ModelVariant,
    /// Highest interaction-matrix power used to build excluded instruments
    /// `J G^q X`, `q = 2..=instrument_power`. Must be at least 2.
    pub instrument_power: usize,
}

impl ModelSpec {
    pub fn new(variant: ModelVariant) -> Self {
        Self {
            variant,
            instrument_power: 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.instrument_power < 2 {
            return Err(Error::Gmm("instrument power must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Re-weight with the inverse clustered moment covariance after an
    /// initial 2SLS step.
    pub two_step: bool,
    /// Covariate column names; defaults to x1..xK.
    pub x_names: Option<Vec<String>>,
    /// Additional exogenous regressor blocks, one matrix per school,
    /// appended (projected) to both the regressors and the instruments.
    pub extra_exog: Option<Vec<DMatrix<f64>>>,
    pub extra_exog_labels: Vec<String>,
}

/// Per-school design pieces after projection.
#[derive(Clone, Debug)]
pub struct SchoolDesign {
    pub jy: DVector<f64>,
    /// Regressors `[J G y | kept exogenous columns]`.
    pub r: DMatrix<f64>,
    /// Instruments `[kept excluded columns | kept exogenous columns]`.
    pub z: DMatrix<f64>,
    /// Unprojected regressors aligned with the coefficient vector
    /// (`[G y | kept exogenous, unprojected]`), used for intercept recovery.
    pub raw: DMatrix<f64>,
    pub ann: Annihilator,
    pub g: DMatrix<f64>,
    pub y: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct Design {
    pub spec: ModelSpec,
    /// Coefficient labels: "lambda" first, then kept exogenous columns.
    pub coef_labels: Vec<String>,
    pub excluded_labels: Vec<String>,
    pub schools: Vec<SchoolDesign>,
    pub warnings: Vec<String>,
    pub n_total: usize,
}

impl Design {
    pub fn n_excluded(&self) -> usize {
        self.excluded_labels.len()
    }
}

const COLUMN_DROP_TOL: f64 = 1e-10;

fn identity_annihilator(n: usize) -> Annihilator {
    Annihilator {
        j: DMatrix::identity(n, n),
        f: DMatrix::identity(n, n),
        groups: 0,
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ColKind {
    Exog,
    Endog,
    Excluded,
}

struct Candidate {
    label: String,
    kind: ColKind,
    /// Per-school projected column.
    proj: Vec<DVector<f64>>,
    /// Per-school unprojected column (regressors only).
    raw: Vec<DVector<f64>>,
}

fn stack(cols: &[DVector<f64>]) -> DVector<f64> {
    let total: usize = cols.iter().map(|c| c.len()).sum();
    let mut out = DVector::zeros(total);
    let mut off = 0;
    for c in cols {
        out.rows_mut(off, c.len()).copy_from(c);
        off += c.len();
    }
    out
}

/// Build the per-school regressor and instrument matrices for a model
/// variant, dropping exogenous columns that are annihilated by (or
/// collinear after) the projection.
pub fn build_design(
    spec: &ModelSpec,
    nets: &[SchoolNetwork],
    data: &[SchoolData],
    opts: &FitOptions,
) -> Result<Design> {
    spec.validate()?;
    if nets.is_empty() || nets.len() != data.len() {
        return Err(Error::Gmm(format!(
            "need matching non-empty school lists (got {} networks, {} data)",
            nets.len(),
            data.len()
        )));
    }
    for (net, d) in nets.iter().zip(data) {
        d.check_against(net)?;
    }
    let k = data[0].x.ncols();
    if data.iter().any(|d| d.x.ncols() != k) {
        return Err(Error::Gmm("covariate counts differ across schools".into()));
    }
    if let Some(extra) = &opts.extra_exog {
        if extra.len() != nets.len() {
            return Err(Error::Gmm("extra regressor blocks do not match school count".into()));
        }
        if extra.iter().any(|m| m.ncols() != opts.extra_exog_labels.len()) {
            return Err(Error::Gmm("extra regressor labels do not match column count".into()));
        }
    }
    let x_names: Vec<String> = match &opts.x_names {
        Some(names) => {
            if names.len() != k {
                return Err(Error::Gmm("x_names length mismatch".into()));
            }
            names.clone()
        }
        None => (1..=k).map(|j| format!("x{j}")).collect(),
    };

    let p = spec.instrument_power;
    let s_count = nets.len();
    let mut anns = Vec::with_capacity(s_count);
    let mut gs = Vec::with_capacity(s_count);
    let mut gys = Vec::with_capacity(s_count);
    // Per-school G^q X for q = 1..=p.
    let mut gqx: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(s_count);
    for (net, d) in nets.iter().zip(data) {
        let ann = match spec.variant {
            ModelVariant::Model1 => identity_annihilator(net.n),
            ModelVariant::Model2 | ModelVariant::Model3 => single_group_annihilator(net.n),
            ModelVariant::Model4 => build_annihilator(net),
        };
        let g = net.interaction();
        let mut powers = Vec::with_capacity(p);
        let mut cur = g.mul_mat(&d.x);
        powers.push(cur.clone());
        for _ in 2..=p {
            cur = g.mul_mat(&cur);
            powers.push(cur.clone());
        }
        gys.push(g.mul_vec(&d.y));
        gs.push(g.to_dense());
        gqx.push(powers);
        anns.push(ann);
    }

    // Assemble candidate columns in presentation order.
    let mut candidates: Vec<Candidate> = Vec::new();
    let proj_col = |j: usize, col_of: &dyn Fn(usize) -> DVector<f64>| -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let _ = j;
        let mut proj = Vec::with_capacity(s_count);
        let mut raw = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let c = col_of(s);
            proj.push(&anns[s].j * &c);
            raw.push(c);
        }
        (proj, raw)
    };
    for j in 0..k {
        let (proj, raw) = proj_col(j, &|s| data[s].x.column(j).into_owned());
        candidates.push(Candidate {
            label: x_names[j].clone(),
            kind: ColKind::Exog,
            proj,
            raw,
        });
    }
    for j in 0..k {
        let (proj, raw) = proj_col(j, &|s| gqx[s][0].column(j).into_owned());
        candidates.push(Candidate {
            label: format!("g_{}", x_names[j]),
            kind: ColKind::Exog,
            proj,
            raw,
        });
    }
    match spec.variant {
        ModelVariant::Model1 => {
            let (proj, raw) = proj_col(0, &|s| DVector::from_element(nets[s].n, 1.0));
            candidates.push(Candidate {
                label: "const".into(),
                kind: ColKind::Exog,
                proj,
                raw,
            });
        }
        ModelVariant::Model3 => {
            // Has-friends dummy; its pooled coefficient estimates -lambda *
            // mean(alpha) when alpha is constant across schools.
            let (proj, raw) = proj_col(0, &|s| nets[s].noniso_indicator());
            candidates.push(Candidate {
                label: "noniso_dummy".into(),
                kind: ColKind::Exog,
                proj,
                raw,
            });
        }
        _ => {}
    }
    if let Some(extra) = &opts.extra_exog {
        for (j, label) in opts.extra_exog_labels.iter().enumerate() {
            let (proj, raw) = proj_col(j, &|s| extra[s].column(j).into_owned());
            candidates.push(Candidate {
                label: label.clone(),
                kind: ColKind::Exog,
                proj,
                raw,
            });
        }
    }
    {
        let mut proj = Vec::with_capacity(s_count);
        let mut raw = Vec::with_capacity(s_count);
        for s in 0..s_count {
            proj.push(&anns[s].j * &gys[s]);
            raw.push(gys[s].clone());
        }
        candidates.push(Candidate {
            label: "lambda".into(),
            kind: ColKind::Endog,
            proj,
            raw,
        });
    }
    for q in 2..=p {
        for j in 0..k {
            let (proj, raw) = proj_col(j, &|s| gqx[s][q - 1].column(j).into_owned());
            candidates.push(Candidate {
                label: format!("g{}_{}", q, x_names[j]),
                kind: ColKind::Excluded,
                proj,
                raw,
            });
        }
    }

    // Greedy rank screen on the stacked projected columns: exogenous
    // dependents are dropped with a warning; an endogenous or excluded
    // dependent column is an error.
    let mut warnings = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept_exog: Vec<usize> = Vec::new();
    let mut kept_excl: Vec<usize> = Vec::new();
    let n_total: usize = nets.iter().map(|n| n.n).sum();
    for (idx, cand) in candidates.iter().enumerate() {
        let stacked = stack(&cand.proj);
        let norm0 = stacked.norm();
        let dependent = if norm0 <= 1e-12 * (n_total as f64).sqrt().max(1.0) {
            true
        } else {
            let mut u = stacked / norm0;
            for b in &basis {
                let c = b.dot(&u);
                u -= b * c;
            }
            let res = u.norm();
            if res <= COLUMN_DROP_TOL {
                true
            } else {
                basis.push(u / res);
                false
            }
        };
        match (dependent, cand.kind) {
            (false, ColKind::Exog) => kept_exog.push(idx),
            (false, ColKind::Excluded) => kept_excl.push(idx),
            (false, ColKind::Endog) => {}
            (true, ColKind::Exog) => warnings.push(format!(
                "dropped exogenous column '{}': zero or collinear after projection",
                cand.label
            )),
            (true, ColKind::Endog) => {
                return Err(Error::Gmm(
                    "endogenous regressor G*y collinear with exogenous columns".into(),
                ))
            }
            (true, ColKind::Excluded) => {
                return Err(Error::Gmm(format!(
                    "rank-deficient design: excluded instrument '{}' collinear",
                    cand.label
                )))
            }
        }
    }
    if kept_excl.is_empty() {
        return Err(Error::Gmm("no excluded instruments survive the rank screen".into()));
    }

    let coef_labels: Vec<String> = std::iter::once("lambda".to_string())
        .chain(kept_exog.iter().map(|&i| candidates[i].label.clone()))
        .collect();
    let excluded_labels: Vec<String> = kept_excl.iter().map(|&i| candidates[i].label.clone()).collect();

    let endog_idx = candidates
        .iter()
        .position(|c| c.kind == ColKind::Endog)
        .expect("endogenous column present");

    let mut schools = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let r_cols: Vec<DVector<f64>> = std::iter::once(candidates[endog_idx].proj[s].clone())
            .chain(kept_exog.iter().map(|&i| candidates[i].proj[s].clone()))
            .collect();
        let raw_cols: Vec<DVector<f64>> = std::iter::once(candidates[endog_idx].raw[s].clone())
            .chain(kept_exog.iter().map(|&i| candidates[i].raw[s].clone()))
            .collect();
        let z_cols: Vec<DVector<f64>> = kept_excl
            .iter()
            .map(|&i| candidates[i].proj[s].clone())
            .chain(kept_exog.iter().map(|&i| candidates[i].proj[s].clone()))
            .collect();
        schools.push(SchoolDesign {
            jy: &anns[s].j * &data[s].y,
            r: DMatrix::from_columns(&r_cols),
            z: DMatrix::from_columns(&z_cols),
            raw: DMatrix::from_columns(&raw_cols),
            ann: anns[s].clone(),
            g: gs[s].clone(),
            y: data[s].y.clone(),
        });
    }

    Ok(Design {
        spec: spec.clone(),
        coef_labels,
        excluded_labels,
        schools,
        warnings,
        n_total,
    })
}

/// A fitted model.
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub design: Design,
    pub coef: DVector<f64>,
    /// School-clustered heteroskedasticity-robust covariance of the
    /// coefficients.
    pub vcov_white: DMatrix<f64>,
    /// Covariance built from the QML error-component estimates, when
    /// available (filled in by the variance-component stage).
    pub vcov_qml: Option<DMatrix<f64>>,
    /// Per-school projected residuals `J y - R psi_hat`.
    pub residuals: Vec<DVector<f64>>,
    pub two_step: bool,
    /// `lambda_hat` inside the theory's (-1, 1) region.
    pub lambda_in_region: bool,
    pub warnings: Vec<String>,
}

impl GmmFit {
    pub fn coef_by_name(&self, name: &str) -> Option<f64> {
        self.design
            .coef_labels
            .iter()
            .position(|l| l == name)
            .map(|i| self.coef[i])
    }

    pub fn lambda(&self) -> f64 {
        self.coef[0]
    }

    pub fn se_by_name(&self, name: &str) -> Option<f64> {
        self.design
            .coef_labels
            .iter()
            .position(|l| l == name)
            .map(|i| self.vcov_white[(i, i)].max(0.0).sqrt())
    }
}

fn accumulate_moments(design: &Design) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let q = design.schools[0].z.ncols();
    let m = design.schools[0].r.ncols();
    let mut ztz = DMatrix::zeros(q, q);
    let mut ztr = DMatrix::zeros(q, m);
    let mut zty = DVector::zeros(q);
    for s in &design.schools {
        ztz += s.z.transpose() * &s.z;
        ztr += s.z.transpose() * &s.r;
        zty += s.z.transpose() * &s.jy;
    }
    (ztz, ztr, zty)
}

fn clustered_middle(design: &Design, residuals: &[DVector<f64>]) -> DMatrix<f64> {
    let q = design.schools[0].z.ncols();
    let mut d = DMatrix::zeros(q, q);
    for (s, v) in design.schools.iter().zip(residuals) {
        let zv = s.z.transpose() * v;
        d += &zv * zv.transpose();
    }
    d
}

/// Symmetric pseudo-inverse with relative eigenvalue clipping.
pub(crate) fn sym_pinv(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let tol = rel_tol * max_ev.max(f64::MIN_POSITIVE);
    let k = eig.eigenvalues.len();
    let mut inv = DMatrix::zeros(k, k);
    let mut rank = 0;
    for i in 0..k {
        if eig.eigenvalues[i] > tol {
            inv[(i, i)] = 1.0 / eig.eigenvalues[i];
            rank += 1;
        }
    }
    let v = &eig.eigenvectors;
    (v * inv * v.transpose(), rank)
}

fn solve_with_weight(
    ztr: &DMatrix<f64>,
    zty: &DVector<f64>,
    w: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let a = ztr.transpose() * w * ztr;
    let b = ztr.transpose() * w * zty;
    let lu = a.clone().lu();
    let coef = lu
        .solve(&b)
        .ok_or_else(|| Error::Gmm("normal equations singular".into()))?;
    Ok((coef, a))
}

/// Fit an already-built design.
pub fn fit_design(design: Design, two_step: bool) -> Result<GmmFit> {
    let (ztz, ztr, zty) = accumulate_moments(&design);
    let n = design.n_total as f64;
    let w1 = ztz
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Gmm("singular instrument Gram matrix Z'Z".into()))?
        .inverse();
    let (mut coef, mut a) = solve_with_weight(&ztr, &zty, &w1)?;
    let mut residuals: Vec<DVector<f64>> = design
        .schools
        .iter()
        .map(|s| &s.jy - &s.r * &coef)
        .collect();
    let mut weight = w1;
    if two_step {
        let d_mid = clustered_middle(&design, &residuals);
        let (w2, _) = sym_pinv(&d_mid, 1e-12);
        let (coef2, a2) = solve_with_weight(&ztr, &zty, &w2)?;
        coef = coef2;
        a = a2;
        weight = w2;
        residuals = design.schools.iter().map(|s| &s.jy - &s.r * &coef).collect();
    }
    let d_mid = clustered_middle(&design, &residuals);
    let m_inner = ztr.transpose() * &weight * &d_mid * &weight * &ztr;
    let a_inv = a
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Gmm("singular bread matrix".into()))?;
    let vcov = &a_inv * m_inner * &a_inv;
    let vcov = (&vcov + vcov.transpose()) * 0.5;
    let _ = n;
    let lambda_in_region = coef[0].abs() < 1.0;
    let mut warnings = design.warnings.clone();
    if !lambda_in_region {
        warnings.push(format!(
            "lambda_hat = {:.4} outside (-1, 1): outside the theory's region",
            coef[0]
        ));
    }
    Ok(GmmFit {
        design,
        coef,
        vcov_white: vcov,
        vcov_qml: None,
        residuals,
        two_step,
        lambda_in_region,
        warnings,
    })
}

/// Build the design and fit with default options (2SLS).
pub fn fit(spec: &ModelSpec, nets: &[SchoolNetwork], data: &[SchoolData]) -> Result<GmmFit> {
    fit_with(spec, nets, data, &FitOptions::default())
}

pub fn fit_with(
    spec: &ModelSpec,
    nets: &[SchoolNetwork],
    data: &[SchoolData],
    opts: &FitOptions,
) -> Result<GmmFit> {
    let design = build_design(spec, nets, data, opts)?;
    fit_design(design, opts.two_step)
}

/// School-clustered sandwich covariance of the fitted coefficients
/// (recomputed from the stored design and residuals).
pub fn white_vcov(fit: &GmmFit) -> Result<DMatrix<f64>> {
    let (ztz, ztr, _) = accumulate_moments(&fit.design);
    let w = ztz
        .cholesky()
        .ok_or_else(|| Error::Gmm("singular instrument Gram matrix Z'Z".into()))?
        .inverse();
    let a = ztr.transpose() * &w * &ztr;
    let d_mid = clustered_middle(&fit.design, &fit.residuals);
    let a_inv = a
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Gmm("singular bread matrix".into()))?;
    let v = &a_inv * ztr.transpose() * &w * d_mid * &w * &ztr * &a_inv;
    Ok((&v + v.transpose()) * 0.5)
}

/// Recovered intercepts.
#[derive(Clone, Debug)]
pub struct RecoveredEffects {
    /// Per-school intercept for isolated students (`kappa_I`); `None` when
    /// the group is empty or the model has no such intercept.
    pub kappa_iso: Vec<Option<f64>>,
    /// Per-school intercept for students with friends (`kappa_NI`).
    pub kappa_noniso: Vec<Option<f64>>,
    /// Pooled has-friends dummy coefficient (Model 3 only).
    pub dummy_coef: Option<f64>,
    /// Global intercept (Model 1 only).
    pub global_const: Option<f64>,
}

/// Recover the intercepts eliminated by the annihilator: group means of
/// `y - [Gy, X, GX] psi_hat` per school (and status group where applicable).
pub fn recover_fixed_effects(fit: &GmmFit, nets: &[SchoolNetwork]) -> Result<RecoveredEffects> {
    let design = &fit.design;
    if nets.len() != design.schools.len() {
        return Err(Error::Gmm("network list does not match fitted design".into()));
    }
    let s_count = nets.len();
    let mut kappa_iso = vec![None; s_count];
    let mut kappa_noniso = vec![None; s_count];
    let dummy_coef = fit.coef_by_name("noniso_dummy");
    let global_const = fit.coef_by_name("const");

    // Residual against the unprojected design: the group intercepts are
    // what's left. For Model 1 and Model 3 the extras (const / dummy) are
    // part of `raw`, so `u` holds only the remaining group structure.
    for (s, (net, sd)) in nets.iter().zip(&design.schools).enumerate() {
        let u = &sd.y - &sd.raw * &fit.coef;
        match design.spec.variant {
            ModelVariant::Model1 => {
                // No per-school structure; the global constant is the
                // recovered intercept everywhere.
                kappa_iso[s] = global_const;
                kappa_noniso[s] = global_const;
            }
            ModelVariant::Model2 => {
                let m = u.mean();
                kappa_iso[s] = Some(m);
                kappa_noniso[s] = Some(m);
            }
            ModelVariant::Model3 => {
                // `u` nets out the pooled dummy, leaving the per-school
                // isolated-group intercept.
                let m = u.mean();
                kappa_iso[s] = Some(m);
                kappa_noniso[s] = Some(m + dummy_coef.unwrap_or(0.0));
            }
            ModelVariant::Model4 => {
                let (mut si, mut ci) = (0.0, 0usize);
                let (mut sn, mut cn) = (0.0, 0usize);
                for i in 0..net.n {
                    if net.iso_mask[i] {
                        si += u[i];
                        ci += 1;
                    } else {
                        sn += u[i];
                        cn += 1;
                    }
                }
                if ci > 0 {
                    kappa_iso[s] = Some(si / ci as f64);
                }
                if cn > 0 {
                    kappa_noniso[s] = Some(sn / cn as f64);
                }
            }
        }
    }
    Ok(RecoveredEffects {
        kappa_iso,
        kappa_noniso,
        dummy_coef,
        global_const,
    })
}
