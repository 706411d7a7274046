//! Counterfactual shock propagation through the social multiplier.
//!
//! An output shock (`alpha`) shifts every student's GPA one-for-one and
//! leaves effort unchanged; a preference shock (`c`, in `delta^2 dc` units)
//! propagates through the resolvent `(I - lambda G)^{-1}` and is amplified
//! for connected students.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::SchoolNetwork;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShockKind {
    /// School-level output shifter: GPA moves one-for-one, no multiplier.
    Alpha,
    /// School-level preference shifter, in `delta^2 * dc` units.
    Preference,
    /// Intercept bump as a restricted school-FE model would read it
    /// (uniform within the school). Confounds the two structural shocks.
    FixedEffectUniform,
    /// Intercept bump through the pooled has-friends dummy structure
    /// (hits non-isolated students only). Confounds the two structural
    /// shocks.
    FixedEffectNonIsolated,
}

impl ShockKind {
    pub fn confounded(&self) -> bool {
        matches!(self, ShockKind::FixedEffectUniform | ShockKind::FixedEffectNonIsolated)
    }
}

#[derive(Clone, Debug)]
pub struct ShockScenario {
    pub kind: ShockKind,
    pub magnitude: f64,
    /// Schools (by index) receiving the shock; `None` means all.
    pub target_schools: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct ShockResult {
    pub kind: ShockKind,
    pub magnitude: f64,
    /// Per-school GPA changes.
    pub delta_y: Vec<DVector<f64>>,
    /// Per-school change per unit magnitude.
    pub multiplier: Vec<DVector<f64>>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Propagate a shock scenario through the estimated (or true) `lambda`.
pub fn apply_shock(
    scenario: &ShockScenario,
    lambda: f64,
    nets: &[SchoolNetwork],
) -> Result<ShockResult> {
    if lambda.abs() >= 1.0 {
        return Err(Error::Counterfactual(format!(
            "|lambda| = {} >= 1: resolvent undefined",
            lambda.abs()
        )));
    }
    if !scenario.magnitude.is_finite() {
        return Err(Error::Counterfactual("magnitude must be finite".into()));
    }
    if let Some(targets) = &scenario.target_schools {
        if let Some(&bad) = targets.iter().find(|&&t| t >= nets.len()) {
            return Err(Error::Counterfactual(format!(
                "target school index {bad} out of range"
            )));
        }
    }
    let targeted = |s: usize| {
        scenario
            .target_schools
            .as_ref()
            .map(|t| t.contains(&s))
            .unwrap_or(true)
    };
    let mut delta_y = Vec::with_capacity(nets.len());
    let mut multiplier = Vec::with_capacity(nets.len());
    for (s, net) in nets.iter().enumerate() {
        if !targeted(s) {
            delta_y.push(DVector::zeros(net.n));
            multiplier.push(DVector::zeros(net.n));
            continue;
        }
        let dy = match scenario.kind {
            ShockKind::Alpha => DVector::from_element(net.n, scenario.magnitude),
            ShockKind::Preference | ShockKind::FixedEffectUniform | ShockKind::FixedEffectNonIsolated => {
                let pattern = if scenario.kind == ShockKind::FixedEffectNonIsolated {
                    net.noniso_indicator()
                } else {
                    DVector::from_element(net.n, 1.0)
                };
                let w = DMatrix::identity(net.n, net.n) - net.interaction().to_dense() * lambda;
                let sol = w
                    .lu()
                    .solve(&pattern)
                    .ok_or_else(|| Error::Counterfactual("resolvent solve failed".into()))?;
                sol * scenario.magnitude
            }
        };
        multiplier.push(&dy / scenario.magnitude);
        delta_y.push(dy);
    }
    let all: Vec<f64> = nets
        .iter()
        .enumerate()
        .filter(|(s, _)| targeted(*s))
        .flat_map(|(s, _)| delta_y[s].iter().copied().collect::<Vec<_>>())
        .collect();
    let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &v in &all {
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    Ok(ShockResult {
        kind: scenario.kind,
        magnitude: scenario.magnitude,
        delta_y,
        multiplier,
        min,
        max,
        mean: if all.is_empty() { f64::NAN } else { sum / all.len() as f64 },
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// Left edge of the first bin.
    pub origin: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bin_left(&self, i: usize) -> f64 {
        self.origin + i as f64 * self.bin_width
    }
}

/// Bin the per-student GPA changes of targeted schools.
pub fn multiplier_distribution(result: &ShockResult, bin_width: f64) -> Histogram {
    let values: Vec<f64> = result
        .delta_y
        .iter()
        .zip(&result.multiplier)
        .filter(|(_, m)| m.iter().any(|&v| v != 0.0) || result.magnitude == 0.0)
        .flat_map(|(dy, _)| dy.iter().copied().collect::<Vec<_>>())
        .collect();
    if values.is_empty() {
        return Histogram {
            bin_width,
            origin: 0.0,
            counts: vec![],
        };
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let origin = (lo / bin_width).floor() * bin_width;
    let nbins = (((hi - origin) / bin_width).floor() as usize) + 1;
    let mut counts = vec![0usize; nbins];
    for v in values {
        let mut b = ((v - origin) / bin_width).floor() as usize;
        if b >= nbins {
            b = nbins - 1;
        }
        counts[b] += 1;
    }
    Histogram {
        bin_width,
        origin,
        counts,
    }
}
