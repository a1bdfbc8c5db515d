//! Shape-fitting objective and its exact parameter gradient.
//!
//! Terms and the sample types they apply to:
//!
//! | term | per sample | applies to |
//! |------|------------|------------|
//! | `l_d` | `xi (d_hat_{i*} - d)^2` | all labelled (`gamma_d` doubled on A, U) |
//! | `l_xi` | `BCE(xi, xi_hat)` | all labelled |
//! | `l_n` | `-xi |n . n_hat|` | U, A, B |
//! | `l_de` | `gamma_Ed sum_i xi (grad d_i . v + 1)^2 + gamma_Exi (grad xi_hat . v)^2` | U, A, B, regularization-only (second part) |
//! | `l_v` | `w1 (1 - w1)` | U, A, B, regularization-only |
//! | `l_t` | `max(0, eps_T - |grad w1 . n|)^2` | S, T with a normal |
//! | `l_v_xi` | `xi_hat (1 - xi_hat)` | everything |
//!
//! Each term is the mean over the samples it applies to (zero if none).

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{head_column, sigmoid, PddfModel, CHUNK, DEGENERATE_GRADIENT};
use crate::geometry::{OrientedPoint, Vec3};
use crate::sampler::{SampleType, TrainingSample};

/// BCE probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma_d: f64,
    pub gamma_xi: f64,
    pub gamma_n: f64,
    pub gamma_v: f64,
    pub gamma_e_d: f64,
    pub gamma_e_xi: f64,
    pub gamma_t: f64,
    /// Target magnitude of `grad w1 . n` on transition samples.
    pub eps_t: f64,
    pub gamma_v_xi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_d: 5.0,
            gamma_xi: 1.0,
            gamma_n: 10.0,
            gamma_v: 1.0,
            gamma_e_d: 0.05,
            gamma_e_xi: 0.01,
            gamma_t: 0.25,
            eps_t: 2.0,
            gamma_v_xi: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gamma_d,
            self.gamma_xi,
            self.gamma_n,
            self.gamma_v,
            self.gamma_e_d,
            self.gamma_e_xi,
            self.gamma_t,
            self.eps_t,
            self.gamma_v_xi,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("loss weights must be finite and non-negative"))
        }
    }
}

/// Per-term means; `l_de` already carries its internal weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f64,
    /// Depth loss restricted to A and U samples (the doubled share of `gamma_d`),
    /// normalized by the same count as `l_d`.
    pub l_d_au: f64,
    pub l_xi: f64,
    pub l_n: f64,
    pub l_de: f64,
    pub l_v: f64,
    pub l_t: f64,
    pub l_v_xi: f64,
    pub total: f64,
}

/// Weighted sum of the terms.
pub fn total_loss(b: &LossBreakdown, w: &LossWeights) -> f64 {
    w.gamma_d * (b.l_d + b.l_d_au)
        + w.gamma_xi * b.l_xi
        + w.gamma_n * b.l_n
        + b.l_de
        + w.gamma_v * b.l_v
        + w.gamma_t * b.l_t
        + w.gamma_v_xi * b.l_v_xi
}

/// A minibatch: labelled samples plus positions that only feed the
/// regularizers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub labelled: Vec<TrainingSample>,
    pub reg_only: Vec<OrientedPoint>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labelled.len() + self.reg_only.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn regularized(kind: SampleType) -> bool {
    matches!(kind, SampleType::U | SampleType::A | SampleType::B)
}

fn transitions(kind: SampleType) -> bool {
    matches!(kind, SampleType::S | SampleType::T)
}

/// Sizes of each term's active set.
#[derive(Clone, Copy, Debug)]
struct Counts {
    labelled: usize,
    uab: usize,
    reg: usize,
    transition: usize,
}

impl Counts {
    fn of(batch: &Batch) -> Result<Self> {
        let mut c = Counts {
            labelled: batch.labelled.len(),
            uab: 0,
            reg: batch.reg_only.len(),
            transition: 0,
        };
        for s in &batch.labelled {
            if s.visible && s.normal.is_none() && (regularized(s.kind) || transitions(s.kind)) {
                return Err(Error::invalid(format!("visible {} sample without a normal", s.kind)));
            }
            if regularized(s.kind) {
                c.uab += 1;
            }
            if transitions(s.kind) && s.normal.is_some() {
                c.transition += 1;
            }
        }
        Ok(c)
    }
}

fn inv(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        1.0 / n as f64
    }
}

/// Evaluates every term.
pub fn loss_terms(model: &PddfModel, batch: &Batch, weights: &LossWeights) -> Result<LossBreakdown> {
    Ok(evaluate(model, batch, weights, false)?.0)
}

/// Evaluates every term and the gradient of the total with respect to the
/// flattened parameters (checkpoint order).
pub fn loss_and_gradient(model: &PddfModel, batch: &Batch, weights: &LossWeights) -> Result<(LossBreakdown, Vec<f64>)> {
    let (b, g) = evaluate(model, batch, weights, true)?;
    Ok((b, g.expect("gradient requested")))
}

/// One query column with its (optional) label.
#[derive(Clone, Copy)]
struct Item<'a> {
    op: OrientedPoint,
    label: Option<&'a TrainingSample>,
}

fn evaluate(
    model: &PddfModel,
    batch: &Batch,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    weights.validate()?;
    let counts = Counts::of(batch)?;
    let items: Vec<Item> = batch
        .labelled
        .iter()
        .map(|s| Item {
            op: s.op,
            label: Some(s),
        })
        .chain(batch.reg_only.iter().map(|op| Item { op: *op, label: None }))
        .collect();
    for item in &items {
        if !(item.op.p.iter().chain(item.op.v.iter()).all(|x| x.is_finite())) || item.op.v.norm() == 0.0 {
            return Err(Error::invalid("non-finite or zero-direction sample in batch"));
        }
    }
    let parts: Vec<(LossBreakdown, Option<Vec<f64>>)> = items
        .par_chunks(CHUNK)
        .map(|chunk| chunk_terms(model, chunk, weights, &counts, want_grad))
        .collect();
    let mut total = LossBreakdown::default();
    let mut grad = want_grad.then(|| vec![0.0; model.param_count()]);
    for (b, g) in parts {
        total.l_d += b.l_d;
        total.l_d_au += b.l_d_au;
        total.l_xi += b.l_xi;
        total.l_n += b.l_n;
        total.l_de += b.l_de;
        total.l_v += b.l_v;
        total.l_t += b.l_t;
        total.l_v_xi += b.l_v_xi;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
    }
    total.total = total_loss(&total, weights);
    Ok((total, grad))
}

/// Term contributions (already divided by their active counts) and the
/// parameter gradient for one chunk of columns.
fn chunk_terms(
    model: &PddfModel,
    chunk: &[Item],
    w: &LossWeights,
    counts: &Counts,
    want_grad: bool,
) -> (LossBreakdown, Option<Vec<f64>>) {
    let ops: Vec<OrientedPoint> = chunk.iter().map(|i| i.op).collect();
    let (y, tape) = model.forward_with_position_tangents(&ops);
    let n = ops.len();
    let mut up = Array2::zeros(y.data.raw_dim());
    let mut b = LossBreakdown::default();
    let inv_lab = inv(counts.labelled);
    let inv_reg = inv(counts.uab + counts.reg);
    let inv_uab = inv(counts.uab);
    let inv_t = inv(counts.transition);
    let inv_all = inv(counts.labelled + counts.reg);
    for (c, item) in chunk.iter().enumerate() {
        let v = item.op.v / item.op.v.norm();
        let head = head_column(&y.data, c);
        // tangent[k][r]: derivative of head row r along position axis k
        let tangent: [[f64; 5]; 3] = std::array::from_fn(|k| head_column(&y.data, (1 + k) * n + c));
        let row = |r: usize| Vec3::new(tangent[0][r], tangent[1][r], tangent[2][r]);
        let active = [head[0] > 0.0, head[1] > 0.0].map(|a| if a { 1.0 } else { 0.0 });
        let d_hat = [head[0].max(0.0), head[1].max(0.0)];
        let w1 = sigmoid(head[2] - head[3]);
        let sw = w1 * (1.0 - w1);
        let xi_hat = sigmoid(head[4]);
        let sx = xi_hat * (1.0 - xi_hat);
        let i_star = if w1 >= 0.5 { 0 } else { 1 };
        let grad_d = [row(0) * active[0], row(1) * active[1]];
        let dxi_dir = row(4);
        let grad_xi = dxi_dir * sx;

        // gradient seeds, scaled by each term's weight and normalizer
        let mut gy = [0.0; 5];
        let mut gt = [[0.0; 5]; 3];
        let add_t = |r: usize, g: Vec3, gt: &mut [[f64; 5]; 3]| {
            for k in 0..3 {
                gt[k][r] += g[k];
            }
        };

        if let Some(s) = item.label {
            let xi = if s.visible { 1.0 } else { 0.0 };
            // depth
            let err = d_hat[i_star] - s.depth;
            let l = xi * err * err;
            b.l_d += l * inv_lab;
            let au = matches!(s.kind, SampleType::A | SampleType::U);
            if au {
                b.l_d_au += l * inv_lab;
            }
            let scale = w.gamma_d * if au { 2.0 } else { 1.0 } * inv_lab;
            gy[i_star] += scale * 2.0 * xi * err * active[i_star];

            // visibility
            let p = xi_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
            b.l_xi += -(xi * p.ln() + (1.0 - xi) * (1.0 - p).ln()) * inv_lab;
            if xi_hat > BCE_EPS && xi_hat < 1.0 - BCE_EPS {
                gy[4] += w.gamma_xi * inv_lab * (xi_hat - xi);
            }

            if regularized(s.kind) {
                // normals
                if let Some(normal) = s.normal.filter(|_| s.visible) {
                    let g = grad_d[i_star];
                    let norm = g.norm();
                    if norm >= DEGENERATE_GRADIENT {
                        let ng = normal.dot(&g);
                        b.l_n += -ng.abs() / norm * inv_uab;
                        let dg = -(normal * (ng.signum() / norm) - g * (ng.abs() / norm.powi(3)));
                        add_t(i_star, dg * (w.gamma_n * inv_uab * active[i_star]), &mut gt);
                    }
                }
                // directed eikonal on depths
                for i in 0..2 {
                    let r = grad_d[i].dot(&v) + 1.0;
                    b.l_de += w.gamma_e_d * xi * r * r * inv_reg;
                    add_t(i, v * (w.gamma_e_d * xi * 2.0 * r * active[i] * inv_reg), &mut gt);
                }
            }

            if transitions(s.kind) {
                if let Some(normal) = s.normal {
                    let dir = row(2) - row(3);
                    let proj = normal.dot(&dir);
                    let slope = sw * proj;
                    let gap = w.eps_t - slope.abs();
                    if gap > 0.0 {
                        b.l_t += gap * gap * inv_t;
                        let dl = -2.0 * gap * slope.signum() * w.gamma_t * inv_t;
                        add_t(2, normal * (dl * sw), &mut gt);
                        add_t(3, -normal * (dl * sw), &mut gt);
                        let dsw = sw * (1.0 - 2.0 * w1) * proj * dl;
                        gy[2] += dsw;
                        gy[3] -= dsw;
                    }
                }
            }
        }

        if item.label.map_or(true, |s| regularized(s.kind)) {
            // directed eikonal on visibility
            let r = grad_xi.dot(&v);
            b.l_de += w.gamma_e_xi * r * r * inv_reg;
            let scale = w.gamma_e_xi * 2.0 * r * inv_reg;
            add_t(4, v * (scale * sx), &mut gt);
            gy[4] += scale * dxi_dir.dot(&v) * sx * (1.0 - 2.0 * xi_hat);
            // weight variance
            b.l_v += sw * inv_reg;
            let g = w.gamma_v * inv_reg * (1.0 - 2.0 * w1) * sw;
            gy[2] += g;
            gy[3] -= g;
        }

        // visibility variance
        b.l_v_xi += sx * inv_all;
        gy[4] += w.gamma_v_xi * inv_all * sx * (1.0 - 2.0 * xi_hat);

        for r in 0..5 {
            up[[r, c]] = gy[r];
            for k in 0..3 {
                up[[r, (1 + k) * n + c]] = gt[k][r];
            }
        }
    }
    let grad = want_grad.then(|| model.backward(&tape, &up, false).0);
    (b, grad)
}
