//! Statistical checks of the geometric properties a directed distance field
//! should satisfy, usable on learned fields, analytic oracles, and scenes.
//!
//! Derivative checks skip near-silhouette samples (`|n . v|` below
//! `silhouette`), where normals and direction derivatives are
//! ill-conditioned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluator::{DifferentiableField, DirectedField, JetQuery};
use crate::field::surface_normal_estimate;
use crate::geometry::{random_unit, BoundingBox, OrientedPoint, Vec3};

/// Sampling settings and pass tolerances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidatorConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub xi_threshold: f64,
    pub silhouette: f64,
    /// Maximum mean `|grad d . v + 1|`.
    pub eikonal_tolerance: f64,
    /// Gradient norms below `1 - grad_norm_margin` count as violations.
    pub grad_norm_margin: f64,
    pub grad_norm_max_violations: f64,
    /// Maximum median relative residual.
    pub consistency_tolerance: f64,
    pub view_slack: f64,
    pub view_max_violations: f64,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: 0,
            xi_threshold: 0.5,
            silhouette: 0.05,
            eikonal_tolerance: 0.1,
            grad_norm_margin: 0.05,
            grad_norm_max_violations: 0.05,
            consistency_tolerance: 0.1,
            view_slack: 0.02,
            view_max_violations: 0.05,
        }
    }
}

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub property: String,
    pub samples: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    /// Fraction of samples violating the property, for checks that count.
    pub violation_fraction: Option<f64>,
    /// What `pass` compares against `tolerance`.
    pub statistic: String,
    pub tolerance: f64,
    pub pass: bool,
    pub note: String,
}

fn summarize(residuals: &mut [f64]) -> (f64, f64, f64) {
    if residuals.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    residuals.sort_by(f64::total_cmp);
    let n = residuals.len();
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let quantile = |q: f64| residuals[((q * (n - 1) as f64).round() as usize).min(n - 1)];
    (mean, quantile(0.5), quantile(0.95))
}

fn report(
    property: &str,
    mut residuals: Vec<f64>,
    violations: Option<usize>,
    statistic: &str,
    tolerance: f64,
    note: String,
) -> PropertyReport {
    let samples = residuals.len();
    let (mean, median, p95) = summarize(&mut residuals);
    let violation_fraction = violations.map(|v| {
        if samples > 0 {
            v as f64 / samples as f64
        } else {
            f64::NAN
        }
    });
    let value = match statistic {
        "mean" => mean,
        "median" => median,
        _ => violation_fraction.unwrap_or(f64::NAN),
    };
    PropertyReport {
        property: property.to_string(),
        samples,
        mean,
        median,
        p95,
        violation_fraction,
        statistic: statistic.to_string(),
        tolerance,
        pass: samples > 0 && value < tolerance,
        note,
    }
}

/// Up to `n` uniform oriented points in the domain with `xi >= threshold`,
/// with their samples. Gives up after a bounded number of rounds.
fn visible_samples<F: DirectedField + ?Sized>(
    field: &F,
    n: usize,
    threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(OrientedPoint, f64)>> {
    let domain = BoundingBox::default();
    let mut out = Vec::with_capacity(n);
    for _ in 0..32 {
        if out.len() >= n {
            break;
        }
        let ops: Vec<OrientedPoint> = (0..2 * n.max(16))
            .map(|_| OrientedPoint {
                p: domain.sample_interior(rng),
                v: random_unit(rng),
            })
            .collect();
        let samples = field.query_batch(&ops)?;
        out.extend(
            ops.iter()
                .zip(&samples)
                .filter(|(_, s)| s.xi >= threshold)
                .map(|(op, s)| (*op, s.depth)),
        );
    }
    out.truncate(n);
    Ok(out)
}

fn well_conditioned(grad: &Vec3, v: &Vec3, silhouette: f64) -> bool {
    surface_normal_estimate(grad, v).is_some_and(|n| n.dot(v).abs() >= silhouette)
}

/// `|grad_p d . v + 1|` on visible samples; the note carries the mean
/// `|grad_p xi . v|` over all samples.
pub fn check_directed_eikonal<F: DifferentiableField + ?Sized>(
    field: &F,
    config: &ValidatorConfig,
) -> Result<PropertyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let domain = BoundingBox::default();
    let all: Vec<JetQuery> = (0..config.n_samples)
        .map(|_| {
            JetQuery::new(OrientedPoint {
                p: domain.sample_interior(&mut rng),
                v: random_unit(&mut rng),
            })
        })
        .collect();
    let jets = field.jet_batch(&all)?;
    let xi_residual = jets
        .iter()
        .zip(&all)
        .map(|(j, q)| j.grad_p_xi.dot(&q.op.v).abs())
        .sum::<f64>()
        / jets.len().max(1) as f64;
    let visible = visible_samples(field, config.n_samples, config.xi_threshold, &mut rng)?;
    let queries: Vec<JetQuery> = visible.iter().map(|(op, _)| JetQuery::new(*op)).collect();
    let jets = field.jet_batch(&queries)?;
    let residuals = jets
        .iter()
        .zip(&queries)
        .filter(|(j, q)| well_conditioned(&j.grad_p_depth, &q.op.v, config.silhouette))
        .map(|(j, q)| (j.grad_p_depth.dot(&q.op.v) + 1.0).abs())
        .collect();
    Ok(report(
        "directed_eikonal",
        residuals,
        None,
        "mean",
        config.eikonal_tolerance,
        format!("mean |grad xi . v| over all samples: {xi_residual:.3e}"),
    ))
}

/// Fraction of visible samples with `|grad_p d| < 1 - margin`; residuals
/// are `max(0, 1 - |grad_p d|)`.
pub fn check_grad_norm_bound<F: DifferentiableField + ?Sized>(
    field: &F,
    config: &ValidatorConfig,
) -> Result<PropertyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let visible = visible_samples(field, config.n_samples, config.xi_threshold, &mut rng)?;
    let queries: Vec<JetQuery> = visible.iter().map(|(op, _)| JetQuery::new(*op)).collect();
    let jets = field.jet_batch(&queries)?;
    let norms: Vec<f64> = jets
        .iter()
        .zip(&queries)
        .filter(|(j, q)| well_conditioned(&j.grad_p_depth, &q.op.v, config.silhouette))
        .map(|(j, _)| j.grad_p_depth.norm())
        .collect();
    let violations = norms.iter().filter(|&&g| g < 1.0 - config.grad_norm_margin).count();
    Ok(report(
        "grad_norm_bound",
        norms.iter().map(|g| (1.0 - g).max(0.0)).collect(),
        Some(violations),
        "violation_fraction",
        config.grad_norm_max_violations,
        format!("violation when |grad d| < {}", 1.0 - config.grad_norm_margin),
    ))
}

/// Relative residual of `grad_v d . dv = d grad_p d . dv` for `dv = w x v`
/// with random `w`.
pub fn check_gradient_consistency<F: DifferentiableField + ?Sized>(
    field: &F,
    config: &ValidatorConfig,
) -> Result<PropertyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let visible = visible_samples(field, config.n_samples, config.xi_threshold, &mut rng)?;
    let queries: Vec<JetQuery> = visible
        .iter()
        .map(|(op, _)| JetQuery::new(*op).with_v_grads())
        .collect();
    let jets = field.jet_batch(&queries)?;
    let mut residuals = Vec::with_capacity(jets.len());
    for (j, q) in jets.iter().zip(&queries) {
        let omega = random_unit(&mut rng);
        let Some(grad_v) = j.grad_v_depth else { continue };
        if !well_conditioned(&j.grad_p_depth, &q.op.v, config.silhouette) {
            continue;
        }
        let dv = omega.cross(&q.op.v);
        let lhs = grad_v.dot(&dv);
        let rhs = j.sample.depth * j.grad_p_depth.dot(&dv);
        residuals.push((lhs - rhs).abs() / (rhs.abs() + 1e-6));
    }
    Ok(report(
        "gradient_consistency",
        residuals,
        None,
        "median",
        config.consistency_tolerance,
        "relative residual |grad_v d . dv - d grad_p d . dv| / (|d grad_p d . dv| + 1e-6)".to_string(),
    ))
}

/// For visible `(p1, v1)` with hit `q1`, looks at `q1` from a random `p2`:
/// the surface must be visible and no farther than `|p2 - q1| + slack`.
/// Residuals are `max(0, d2 - |p2 - q1|)`.
pub fn check_view_consistency<F: DirectedField + ?Sized>(
    field: &F,
    config: &ValidatorConfig,
) -> Result<PropertyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));
    let domain = BoundingBox::default();
    let visible = visible_samples(field, config.n_samples, config.xi_threshold, &mut rng)?;
    let mut targets = Vec::with_capacity(visible.len());
    let mut second = Vec::with_capacity(visible.len());
    for (op, depth) in &visible {
        let q1 = op.p + op.v * *depth;
        let p2 = loop {
            let p = domain.sample_interior(&mut rng);
            if (p - q1).norm() > 1e-3 {
                break p;
            }
        };
        targets.push((p2 - q1).norm());
        second.push(OrientedPoint {
            p: p2,
            v: (q1 - p2).normalize(),
        });
    }
    let samples = field.query_batch(&second)?;
    let mut violations = 0;
    let residuals = samples
        .iter()
        .zip(&targets)
        .map(|(s, dist)| {
            let excess = s.depth - dist;
            if s.xi < config.xi_threshold || excess > config.view_slack {
                violations += 1;
            }
            if s.xi < config.xi_threshold {
                *dist
            } else {
                excess.max(0.0)
            }
        })
        .collect();
    Ok(report(
        "view_consistency",
        residuals,
        Some(violations),
        "violation_fraction",
        config.view_max_violations,
        format!(
            "violation when xi < {} or depth exceeds the distance by more than {}",
            config.xi_threshold, config.view_slack
        ),
    ))
}

/// Names accepted by [`run_checks`].
pub const CHECK_NAMES: [&str; 4] = ["eikonal", "gradnorm", "consistency", "view"];

/// Runs the named checks in order.
pub fn run_checks<F: DifferentiableField + ?Sized>(
    field: &F,
    names: &[String],
    config: &ValidatorConfig,
) -> Result<Vec<PropertyReport>> {
    names
        .iter()
        .map(|name| match name.as_str() {
            "eikonal" => check_directed_eikonal(field, config),
            "gradnorm" => check_grad_norm_bound(field, config),
            "consistency" => check_gradient_consistency(field, config),
            "view" => check_view_consistency(field, config),
            other => Err(crate::error::Error::invalid(format!(
                "unknown check {other:?}; expected one of {}",
                CHECK_NAMES.join(", ")
            ))),
        })
        .collect()
}
