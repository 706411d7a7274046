//! Endogenous link formation: a dyadic logit first stage with per-node
//! sender/receiver heterogeneity, cubic B-spline control bases built from
//! the estimated heterogeneity, an endogeneity-corrected second stage, and
//! school-block bootstrap inference.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmm::{build_design, fit_design, FitOptions, GmmFit, ModelSpec};
use crate::netgraph::SchoolNetwork;
use crate::structsim::SchoolData;

/// Which covariate columns become dyad regressors and how.
#[derive(Clone, Debug)]
pub struct DyadSpec {
    /// Absolute difference `|x_i - x_j|`.
    pub numeric: Vec<usize>,
    /// Same-category indicator `1{x_i == x_j}`.
    pub categorical: Vec<usize>,
}

impl DyadSpec {
    pub fn all_numeric(k: usize) -> Self {
        Self {
            numeric: (0..k).collect(),
            categorical: vec![],
        }
    }
}

/// Ordered within-school dyads `(i, j)`, `i != j`, row-major.
pub fn dyads(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
}

#[derive(Clone, Debug)]
pub struct DyadCovariates {
    pub labels: Vec<String>,
    /// `n(n-1) x K` matrix, rows in `dyads(n)` order.
    pub x: DMatrix<f64>,
    pub n: usize,
}

/// Default dyad regressors: absolute differences for numeric covariates,
/// same-category indicators for categorical ones. No intercept — the level
/// is absorbed by the heterogeneity parameters.
pub fn build_dyad_covariates(
    xs: &[DMatrix<f64>],
    spec: &DyadSpec,
    x_names: Option<&[String]>,
) -> Result<Vec<DyadCovariates>> {
    let k_dyad = spec.numeric.len() + spec.categorical.len();
    if k_dyad == 0 {
        return Err(Error::NetForm("dyad covariate spec is empty".into()));
    }
    let name = |j: usize| {
        x_names
            .map(|ns| ns[j].clone())
            .unwrap_or_else(|| format!("x{}", j + 1))
    };
    let labels: Vec<String> = spec
        .numeric
        .iter()
        .map(|&j| format!("absdiff_{}", name(j)))
        .chain(spec.categorical.iter().map(|&j| format!("same_{}", name(j))))
        .collect();
    xs.iter()
        .map(|x| {
            let n = x.nrows();
            let k = x.ncols();
            if let Some(&bad) = spec
                .numeric
                .iter()
                .chain(spec.categorical.iter())
                .find(|&&j| j >= k)
            {
                return Err(Error::NetForm(format!("dyad spec column {bad} out of range")));
            }
            let mut m = DMatrix::zeros(n * (n - 1), k_dyad);
            for (row, (i, j)) in dyads(n).enumerate() {
                let mut col = 0;
                for &c in &spec.numeric {
                    m[(row, col)] = (x[(i, c)] - x[(j, c)]).abs();
                    col += 1;
                }
                for &c in &spec.categorical {
                    m[(row, col)] = if x[(i, c)] == x[(j, c)] { 1.0 } else { 0.0 };
                    col += 1;
                }
            }
            Ok(DyadCovariates {
                labels: labels.clone(),
                x: m,
                n,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FirstStageFit {
    pub beta: DVector<f64>,
    pub labels: Vec<String>,
    /// Per-school sender heterogeneity; `None` for excluded nodes.
    pub mu_out: Vec<Vec<Option<f64>>>,
    pub mu_in: Vec<Vec<Option<f64>>>,
    pub loglik: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct SchoolLogit {
    n: usize,
    adj: Vec<Vec<bool>>,
    /// Sender / receiver retained after iterative separation trimming.
    out_ok: Vec<bool>,
    in_ok: Vec<bool>,
}

impl SchoolLogit {
    fn retained_dyads(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        dyads(self.n).filter(|&(i, j)| self.out_ok[i] && self.in_ok[j])
    }
}

fn trim_separated(net: &SchoolNetwork) -> (SchoolLogit, Vec<usize>, Vec<usize>) {
    let n = net.n;
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for &j in net.neighbors(i) {
            adj[i][j] = true;
        }
    }
    let mut out_ok = vec![true; n];
    let mut in_ok = vec![true; n];
    loop {
        let mut changed = false;
        for i in 0..n {
            if !out_ok[i] {
                continue;
            }
            let candidates: Vec<usize> = (0..n).filter(|&j| j != i && in_ok[j]).collect();
            let deg = candidates.iter().filter(|&&j| adj[i][j]).count();
            if candidates.is_empty() || deg == 0 || deg == candidates.len() {
                out_ok[i] = false;
                changed = true;
            }
        }
        for j in 0..n {
            if !in_ok[j] {
                continue;
            }
            let candidates: Vec<usize> = (0..n).filter(|&i| i != j && out_ok[i]).collect();
            let deg = candidates.iter().filter(|&&i| adj[i][j]).count();
            if candidates.is_empty() || deg == 0 || deg == candidates.len() {
                in_ok[j] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let excl_out = (0..n).filter(|&i| !out_ok[i]).collect();
    let excl_in = (0..n).filter(|&j| !in_ok[j]).collect();
    (
        SchoolLogit {
            n,
            adj,
            out_ok,
            in_ok,
        },
        excl_out,
        excl_in,
    )
}

/// Joint dyadic-logit fit: shared coefficients on the dyad covariates plus
/// per-node sender/receiver effects, maximized by alternating Newton steps
/// (full step on the shared block, one-dimensional updates per node).
pub fn fit_dyadic_logit(
    nets: &[SchoolNetwork],
    covs: &[DyadCovariates],
    max_iter: usize,
) -> Result<FirstStageFit> {
    if nets.len() != covs.len() || nets.is_empty() {
        return Err(Error::NetForm("networks and dyad covariates must align".into()));
    }
    let k = covs[0].labels.len();
    let mut warnings = Vec::new();
    let mut schools = Vec::with_capacity(nets.len());
    for (net, cov) in nets.iter().zip(covs) {
        if cov.n != net.n {
            return Err(Error::NetForm(format!(
                "school {}: dyad covariates built for n = {}, network has n = {}",
                net.school_id, cov.n, net.n
            )));
        }
        let (sl, eo, ei) = trim_separated(net);
        if !eo.is_empty() || !ei.is_empty() {
            warnings.push(format!(
                "school {}: excluded {} sender(s), {} receiver(s) for separation",
                net.school_id,
                eo.len(),
                ei.len()
            ));
        }
        let mut has_link = false;
        let mut has_nonlink = false;
        for (i, j) in sl.retained_dyads() {
            if sl.adj[i][j] {
                has_link = true;
            } else {
                has_nonlink = true;
            }
        }
        if !has_link || !has_nonlink {
            return Err(Error::NetForm(format!(
                "school {}: no variation among retained dyads",
                net.school_id
            )));
        }
        schools.push(sl);
    }

    let mut beta = DVector::zeros(k);
    let mut mu_out: Vec<Vec<f64>> = schools.iter().map(|s| vec![0.0; s.n]).collect();
    let mut mu_in: Vec<Vec<f64>> = schools.iter().map(|s| vec![0.0; s.n]).collect();

    let loglik = |beta: &DVector<f64>, mo: &[Vec<f64>], mi: &[Vec<f64>]| -> f64 {
        let mut ll = 0.0;
        for (s, sl) in schools.iter().enumerate() {
            let xb = &covs[s].x * beta;
            for (row, (i, j)) in dyads(sl.n).enumerate() {
                if !(sl.out_ok[i] && sl.in_ok[j]) {
                    continue;
                }
                let lp = xb[row] + mo[s][i] + mi[s][j];
                let a = if sl.adj[i][j] { 1.0 } else { 0.0 };
                // a*lp - log(1 + exp(lp)), stably.
                ll += a * lp - if lp > 0.0 { lp + (-lp).exp().ln_1p() } else { lp.exp().ln_1p() };
            }
        }
        ll
    };

    let mut ll = loglik(&beta, &mu_out, &mu_in);
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;
    for _iter in 0..max_iter {
        // Shared-coefficient Newton step with halving.
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for (s, sl) in schools.iter().enumerate() {
            let xb = &covs[s].x * &beta;
            for (row, (i, j)) in dyads(sl.n).enumerate() {
                if !(sl.out_ok[i] && sl.in_ok[j]) {
                    continue;
                }
                let p = sigmoid(xb[row] + mu_out[s][i] + mu_in[s][j]);
                let a = if sl.adj[i][j] { 1.0 } else { 0.0 };
                let xrow = covs[s].x.row(row);
                for c in 0..k {
                    grad[c] += (a - p) * xrow[c];
                }
                let w = p * (1.0 - p);
                for c in 0..k {
                    for d in 0..k {
                        hess[(c, d)] += w * xrow[c] * xrow[d];
                    }
                }
            }
        }
        if let Some(step) = hess.clone().lu().solve(&grad) {
            let mut t = 1.0;
            for _ in 0..20 {
                let cand = &beta + &step * t;
                let cand_ll = loglik(&cand, &mu_out, &mu_in);
                if cand_ll >= ll - 1e-12 {
                    beta = cand;
                    break;
                }
                t *= 0.5;
            }
        }

        // Per-node one-dimensional updates.
        for (s, sl) in schools.iter().enumerate() {
            let xb = &covs[s].x * &beta;
            let lp_row = |row: usize, i: usize, j: usize, mo: &[f64], mi: &[f64]| {
                xb[row] + mo[i] + mi[j]
            };
            for i in 0..sl.n {
                if !sl.out_ok[i] {
                    continue;
                }
                let (mut g, mut h) = (0.0, 0.0);
                for (row, (a, b)) in dyads(sl.n).enumerate() {
                    if a != i || !sl.in_ok[b] {
                        continue;
                    }
                    let p = sigmoid(lp_row(row, a, b, &mu_out[s], &mu_in[s]));
                    g += (if sl.adj[a][b] { 1.0 } else { 0.0 }) - p;
                    h += p * (1.0 - p);
                }
                mu_out[s][i] += (g / h.max(1e-10)).clamp(-4.0, 4.0);
            }
            for j in 0..sl.n {
                if !sl.in_ok[j] {
                    continue;
                }
                let (mut g, mut h) = (0.0, 0.0);
                for (row, (a, b)) in dyads(sl.n).enumerate() {
                    if b != j || !sl.out_ok[a] {
                        continue;
                    }
                    let p = sigmoid(lp_row(row, a, b, &mu_out[s], &mu_in[s]));
                    g += (if sl.adj[a][b] { 1.0 } else { 0.0 }) - p;
                    h += p * (1.0 - p);
                }
                mu_in[s][j] += (g / h.max(1e-10)).clamp(-4.0, 4.0);
            }
            // Location normalization: retained sender effects have zero
            // mean per school; probabilities are unchanged.
            let retained: Vec<usize> = (0..sl.n).filter(|&i| sl.out_ok[i]).collect();
            if !retained.is_empty() {
                let m = retained.iter().map(|&i| mu_out[s][i]).sum::<f64>() / retained.len() as f64;
                for i in 0..sl.n {
                    if sl.out_ok[i] {
                        mu_out[s][i] -= m;
                    }
                    if sl.in_ok[i] {
                        mu_in[s][i] += m;
                    }
                }
            }
        }
        ll = loglik(&beta, &mu_out, &mu_in);

        // Gradient norm over the shared block and all retained node effects.
        let mut g2 = 0.0;
        let mut gb = DVector::<f64>::zeros(k);
        for (s, sl) in schools.iter().enumerate() {
            let xb = &covs[s].x * &beta;
            let mut go = vec![0.0; sl.n];
            let mut gi = vec![0.0; sl.n];
            for (row, (i, j)) in dyads(sl.n).enumerate() {
                if !(sl.out_ok[i] && sl.in_ok[j]) {
                    continue;
                }
                let p = sigmoid(xb[row] + mu_out[s][i] + mu_in[s][j]);
                let r = (if sl.adj[i][j] { 1.0 } else { 0.0 }) - p;
                go[i] += r;
                gi[j] += r;
                for c in 0..k {
                    gb[c] += r * covs[s].x[(row, c)];
                }
            }
            for i in 0..sl.n {
                if sl.out_ok[i] {
                    g2 += go[i] * go[i];
                }
                if sl.in_ok[i] {
                    g2 += gi[i] * gi[i];
                }
            }
        }
        g2 += gb.norm_squared();
        grad_norm = g2.sqrt();
        if grad_norm <= 1e-6 {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!(
            "dyadic logit stopped at gradient norm {grad_norm:.2e} after {max_iter} iterations"
        ));
    }
    Ok(FirstStageFit {
        beta,
        labels: covs[0].labels.clone(),
        mu_out: schools
            .iter()
            .enumerate()
            .map(|(s, sl)| {
                (0..sl.n)
                    .map(|i| if sl.out_ok[i] { Some(mu_out[s][i]) } else { None })
                    .collect()
            })
            .collect(),
        mu_in: schools
            .iter()
            .enumerate()
            .map(|(s, sl)| {
                (0..sl.n)
                    .map(|j| if sl.in_ok[j] { Some(mu_in[s][j]) } else { None })
                    .collect()
            })
            .collect(),
        loglik: ll,
        grad_norm,
        converged,
        warnings,
    })
}

/// Evaluate all cubic B-spline bases on a clamped knot vector at `x`
/// (iterative de Boor triangle).
pub fn bspline_eval(knots: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let n_bases = knots.len() - degree - 1;
    let lo = knots[degree];
    let hi = knots[knots.len() - degree - 1];
    let x = x.clamp(lo, hi);
    // Knot span: last index s with knots[s] <= x < knots[s+1] (right end
    // folded into the final span).
    let mut span = degree;
    while span < n_bases - 1 && x >= knots[span + 1] {
        span += 1;
    }
    let mut nvals = vec![0.0; degree + 1];
    nvals[0] = 1.0;
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    for d in 1..=degree {
        left[d] = x - knots[span + 1 - d];
        right[d] = knots[span + d] - x;
        let mut saved = 0.0;
        for r in 0..d {
            let denom = right[r + 1] + left[d - r];
            let temp = if denom != 0.0 { nvals[r] / denom } else { 0.0 };
            nvals[r] = saved + right[r + 1] * temp;
            saved = left[d - r] * temp;
        }
        nvals[d] = saved;
    }
    let mut out = vec![0.0; n_bases];
    for (r, &v) in nvals.iter().enumerate() {
        out[span - degree + r] = v;
    }
    out
}

#[derive(Clone, Debug)]
pub struct ControlBases {
    /// Per-school `n x (bases_out + bases_in)` evaluation matrix.
    pub bases: Vec<DMatrix<f64>>,
    pub labels: Vec<String>,
    pub knots_out: Vec<f64>,
    pub knots_in: Vec<f64>,
    /// Per-school node flags: evaluated at the nearest retained value
    /// because the node was excluded in the first stage.
    pub flagged: Vec<Vec<bool>>,
    pub warnings: Vec<String>,
}

const SPLINE_DEGREE: usize = 3;
const INTERIOR_KNOTS: usize = 9;

fn decile_knots(values: &mut Vec<f64>) -> Result<(Vec<f64>, usize, bool)> {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct = values.clone();
    distinct.dedup();
    if distinct.len() < 11 {
        return Err(Error::NetForm(format!(
            "only {} distinct heterogeneity values: cannot place {INTERIOR_KNOTS} interior knots",
            distinct.len()
        )));
    }
    let n = values.len();
    let lo = values[0];
    let hi = values[n - 1];
    let mut interior: Vec<f64> = (1..=INTERIOR_KNOTS)
        .map(|d| {
            let q = d as f64 / 10.0;
            let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
            values[rank - 1]
        })
        .collect();
    interior.dedup();
    interior.retain(|&v| v > lo && v < hi);
    let deduped = interior.len() < INTERIOR_KNOTS;
    let mut knots = vec![lo; SPLINE_DEGREE + 1];
    knots.extend(&interior);
    knots.extend(vec![hi; SPLINE_DEGREE + 1]);
    let n_bases = interior.len() + SPLINE_DEGREE + 1;
    Ok((knots, n_bases, deduped))
}

/// Build the control-function bases: cubic B-splines with interior knots
/// at the pooled empirical deciles of the estimated heterogeneity, one
/// block per dimension (sender, receiver).
pub fn build_control_bases(fit: &FirstStageFit) -> Result<ControlBases> {
    let mut pooled_out: Vec<f64> = fit.mu_out.iter().flatten().filter_map(|m| *m).collect();
    let mut pooled_in: Vec<f64> = fit.mu_in.iter().flatten().filter_map(|m| *m).collect();
    if pooled_out.is_empty() || pooled_in.is_empty() {
        return Err(Error::NetForm("no retained heterogeneity estimates".into()));
    }
    let (knots_out, nb_out, dedup_out) = decile_knots(&mut pooled_out)?;
    let (knots_in, nb_in, dedup_in) = decile_knots(&mut pooled_in)?;
    let mut warnings = Vec::new();
    if dedup_out || dedup_in {
        warnings.push(format!(
            "duplicate decile knots removed: {} sender bases, {} receiver bases",
            nb_out, nb_in
        ));
    }
    let nearest = |pool: &[f64], x: f64| {
        // pool is sorted.
        match pool.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => pool[i],
            Err(i) => {
                if i == 0 {
                    pool[0]
                } else if i == pool.len() {
                    pool[pool.len() - 1]
                } else if (x - pool[i - 1]).abs() <= (pool[i] - x).abs() {
                    pool[i - 1]
                } else {
                    pool[i]
                }
            }
        }
    };
    let mut bases = Vec::with_capacity(fit.mu_out.len());
    let mut flagged = Vec::with_capacity(fit.mu_out.len());
    for (mo, mi) in fit.mu_out.iter().zip(&fit.mu_in) {
        let n = mo.len();
        let mut m = DMatrix::zeros(n, nb_out + nb_in);
        let mut flags = vec![false; n];
        for i in 0..n {
            let vo = match mo[i] {
                Some(v) => v,
                None => {
                    flags[i] = true;
                    nearest(&pooled_out, 0.0)
                }
            };
            let vi = match mi[i] {
                Some(v) => v,
                None => {
                    flags[i] = true;
                    nearest(&pooled_in, 0.0)
                }
            };
            for (c, b) in bspline_eval(&knots_out, SPLINE_DEGREE, vo).into_iter().enumerate() {
                m[(i, c)] = b;
            }
            for (c, b) in bspline_eval(&knots_in, SPLINE_DEGREE, vi).into_iter().enumerate() {
                m[(i, nb_out + c)] = b;
            }
        }
        bases.push(m);
        flagged.push(flags);
    }
    let labels: Vec<String> = (0..nb_out)
        .map(|c| format!("h_out_{}", c + 1))
        .chain((0..nb_in).map(|c| format!("h_in_{}", c + 1)))
        .collect();
    Ok(ControlBases {
        bases,
        labels,
        knots_out,
        knots_in,
        flagged,
        warnings,
    })
}

#[derive(Clone, Debug)]
pub struct BasisTest {
    pub stat: f64,
    pub df: usize,
    pub p: f64,
}

/// Second stage: the chosen model with the control bases appended as
/// projected exogenous regressors (and instruments). Also reports the
/// joint Wald test of the basis coefficients.
pub fn fit_second_stage(
    spec: &ModelSpec,
    nets: &[SchoolNetwork],
    data: &[SchoolData],
    bases: &ControlBases,
) -> Result<(GmmFit, BasisTest)> {
    let opts = FitOptions {
        extra_exog: Some(bases.bases.clone()),
        extra_exog_labels: bases.labels.clone(),
        ..Default::default()
    };
    let design = build_design(spec, nets, data, &opts)?;
    let fit = fit_design(design, false)?;
    let idx: Vec<usize> = fit
        .design
        .coef_labels
        .iter()
        .enumerate()
        .filter(|(_, l)| bases.labels.contains(l))
        .map(|(i, _)| i)
        .collect();
    let test = if idx.is_empty() {
        BasisTest {
            stat: 0.0,
            df: 0,
            p: 1.0,
        }
    } else {
        let kk = idx.len();
        let c = DVector::from_iterator(kk, idx.iter().map(|&i| fit.coef[i]));
        let mut v = DMatrix::zeros(kk, kk);
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                v[(a, b)] = fit.vcov_white[(ia, ib)];
            }
        }
        let (pinv, rank) = crate::gmm::sym_pinv(&v, 1e-10);
        let stat = (c.transpose() * pinv * &c)[(0, 0)].max(0.0);
        let p = {
            use statrs::distribution::{ChiSquared, ContinuousCDF};
            if rank == 0 {
                1.0
            } else {
                (1.0 - ChiSquared::new(rank as f64).unwrap().cdf(stat)).clamp(0.0, 1.0)
            }
        };
        BasisTest {
            stat,
            df: rank,
            p,
        }
    };
    Ok((fit, test))
}

#[derive(Clone, Debug)]
pub struct BootstrapOut {
    pub labels: Vec<String>,
    pub vcov: DMatrix<f64>,
    /// Percentile interval bounds per coefficient at the requested level.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n_success: usize,
    pub n_total: usize,
}

/// School-block bootstrap of the full two-stage pipeline: resample schools
/// with replacement, re-run first stage, bases and second stage, and report
/// the empirical covariance and percentile intervals of the coefficients.
pub fn bootstrap_vcov(
    nets: &[SchoolNetwork],
    data: &[SchoolData],
    dyad_spec: &DyadSpec,
    model_spec: &ModelSpec,
    b: usize,
    seed: u64,
    level: f64,
) -> Result<BootstrapOut> {
    if b < 2 {
        return Err(Error::NetForm("need at least 2 bootstrap replicates".into()));
    }
    let s_count = nets.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Option<Vec<String>> = None;
    let mut draws: Vec<DVector<f64>> = Vec::new();
    for _ in 0..b {
        let picks: Vec<usize> = (0..s_count).map(|_| rng.random_range(0..s_count)).collect();
        let rnets: Vec<SchoolNetwork> = picks.iter().map(|&s| nets[s].clone()).collect();
        let rdata: Vec<SchoolData> = picks.iter().map(|&s| data[s].clone()).collect();
        let rxs: Vec<DMatrix<f64>> = rdata.iter().map(|d| d.x.clone()).collect();
        let run = (|| -> Result<(Vec<String>, DVector<f64>)> {
            let covs = build_dyad_covariates(&rxs, dyad_spec, None)?;
            let fs = fit_dyadic_logit(&rnets, &covs, 300)?;
            let bases = build_control_bases(&fs)?;
            let (fit, _) = fit_second_stage(model_spec, &rnets, &rdata, &bases)?;
            Ok((fit.design.coef_labels.clone(), fit.coef.clone()))
        })();
        match run {
            Ok((l, c)) => {
                match &labels {
                    None => {
                        labels = Some(l);
                        draws.push(c);
                    }
                    Some(base) if *base == l => draws.push(c),
                    Some(_) => { /* differing kept columns: count as failure */ }
                }
            }
            Err(_) => {}
        }
    }
    let n_success = draws.len();
    if (n_success as f64) < 0.8 * b as f64 {
        return Err(Error::NetForm(format!(
            "only {n_success}/{b} bootstrap replicates succeeded (need 80%)"
        )));
    }
    let labels = labels.expect("successful replicates exist");
    let m = labels.len();
    let mean = draws.iter().fold(DVector::zeros(m), |acc, d| acc + d) / n_success as f64;
    let mut vcov = DMatrix::zeros(m, m);
    for d in &draws {
        let c = d - &mean;
        vcov += &c * c.transpose();
    }
    vcov /= (n_success - 1).max(1) as f64;
    let a = (1.0 - level) / 2.0;
    let quantile = |vals: &mut Vec<f64>, q: f64| {
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = ((q * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
        vals[rank - 1]
    };
    let mut lo = Vec::with_capacity(m);
    let mut hi = Vec::with_capacity(m);
    for c in 0..m {
        let mut vals: Vec<f64> = draws.iter().map(|d| d[c]).collect();
        lo.push(quantile(&mut vals, a));
        hi.push(quantile(&mut vals, 1.0 - a));
    }
    Ok(BootstrapOut {
        labels,
        vcov,
        lo,
        hi,
        n_success,
        n_total: b,
    })
}
