//! The probabilistic directed distance field: a sinusoidal MLP mapping an
//! oriented point to two candidate depths, a mixture weight and a
//! visibility, plus exact input derivatives of those outputs.

mod checkpoint;
pub mod siren;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{
    DepthJet, DifferentiableField, DirectedField, DirectionGradient, DirectionTerms, FieldSample, JetQuery,
};
use crate::geometry::{perpendicular_pair, OrientedPoint, Vec3};
use siren::{Blocks, Siren, Tape};

/// Network input width: position and direction.
pub const INPUT_DIM: usize = 6;
/// Number of depth components in the mixture.
pub const K: usize = 2;
/// Head width: `K` depths, `K` weight logits, one visibility logit.
pub const OUTPUT_DIM: usize = 2 * K + 1;

/// Columns per parallel work item.
pub const CHUNK: usize = 256;

/// Below this gradient norm the surface normal is undefined.
pub const DEGENERATE_GRADIENT: f64 = 1e-8;

/// Network architecture and initialization seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SirenConfig {
    pub hidden_sizes: Vec<usize>,
    pub omega_0: f64,
    pub seed: u64,
}

impl Default for SirenConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![512; 7],
            omega_0: 1.0,
            seed: 0,
        }
    }
}

impl SirenConfig {
    pub fn new(hidden_sizes: Vec<usize>) -> Self {
        Self {
            hidden_sizes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden_sizes must be non-empty and positive"));
        }
        if !(self.omega_0.is_finite() && self.omega_0 > 0.0) {
            return Err(Error::invalid("omega_0 must be positive"));
        }
        Ok(())
    }

    /// Layer sizes from input to head.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![INPUT_DIM];
        sizes.extend(&self.hidden_sizes);
        sizes.push(OUTPUT_DIM);
        sizes
    }

    /// `(out, in)` weight shape per layer.
    pub fn weight_shapes(&self) -> Vec<[usize; 2]> {
        self.layer_sizes().windows(2).map(|w| [w[1], w[0]]).collect()
    }
}

/// Mapped field outputs at one oriented point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldOutput {
    /// Rectified component depths.
    pub d: [f64; K],
    /// Weight of the first component; the second has `1 - w1`.
    pub w1: f64,
    pub xi: f64,
    /// Index of the max-weight component (0 on ties).
    pub i_star: usize,
}

impl FieldOutput {
    /// Depth of the active component.
    pub fn depth(&self) -> f64 {
        self.d[self.i_star]
    }

    fn from_head(y: [f64; OUTPUT_DIM]) -> Self {
        let w1 = sigmoid(y[2] - y[3]);
        Self {
            d: [y[0].max(0.0), y[1].max(0.0)],
            w1,
            xi: sigmoid(y[4]),
            i_star: if w1 >= 0.5 { 0 } else { 1 },
        }
    }
}

/// Field outputs with their input derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldJet {
    pub output: FieldOutput,
    pub grad_p_d: [Vec3; K],
    pub grad_p_w1: Vec3,
    pub grad_p_xi: Vec3,
    /// Direction gradients of each depth, projected orthogonally to `v`.
    pub grad_v_d: Option<[Vec3; K]>,
    /// Requested `t_j^T H_p[d_{i*}] t_i` values, in query order.
    pub second: Vec<f64>,
}

impl FieldJet {
    /// Position gradient of the active depth.
    pub fn grad_p_depth(&self) -> Vec3 {
        self.grad_p_d[self.output.i_star]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A PDDF: configuration plus network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PddfModel {
    pub config: SirenConfig,
    pub net: Siren,
}

/// Builds a model from `config`, drawing parameters from `rng`.
pub fn init_siren<R: Rng + ?Sized>(config: &SirenConfig, rng: &mut R) -> Result<PddfModel> {
    config.validate()?;
    Ok(PddfModel {
        config: config.clone(),
        net: Siren::init(&config.layer_sizes(), config.omega_0, rng),
    })
}

impl PddfModel {
    /// Builds a model seeded from `config.seed`.
    pub fn new(config: &SirenConfig) -> Result<Self> {
        init_siren(config, &mut ChaCha8Rng::seed_from_u64(config.seed))
    }

    /// Zeroes the output layer, giving `d = 0`, `w1 = 0.5`, `xi = 0.5` everywhere.
    pub fn zero_head(&mut self) {
        let head = self.net.layers.last_mut().expect("at least one layer");
        head.weight.fill(0.0);
        head.bias.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn field_eval(&self, op: &OrientedPoint) -> Result<FieldOutput> {
        Ok(self.eval_batch(std::slice::from_ref(op))?[0])
    }

    pub fn eval_batch(&self, ops: &[OrientedPoint]) -> Result<Vec<FieldOutput>> {
        check_finite(ops)?;
        let out = ops
            .par_chunks(CHUNK)
            .map(|chunk| {
                let input = encode(chunk, 1, |_, _| [0.0; INPUT_DIM]);
                let y = self.net.forward(&input, &[], false).0;
                (0..chunk.len())
                    .map(|c| FieldOutput::from_head(head_column(&y.data, c)))
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>();
        Ok(out.into_iter().flatten().collect())
    }

    pub fn field_eval_jet(&self, query: &JetQuery) -> Result<FieldJet> {
        Ok(self.jets(std::slice::from_ref(query))?.remove(0))
    }

    /// Jets for a batch of queries; queries sharing a request shape are
    /// evaluated together.
    pub fn jets(&self, queries: &[JetQuery]) -> Result<Vec<FieldJet>> {
        check_finite(&queries.iter().map(|q| q.op).collect::<Vec<_>>())?;
        let mut groups: Vec<(&JetQuery, Vec<usize>)> = Vec::new();
        for (i, q) in queries.iter().enumerate() {
            match groups
                .iter_mut()
                .find(|(g, _)| g.v_grads == q.v_grads && g.tangents.len() == q.tangents.len() && g.pairs == q.pairs)
            {
                Some((_, members)) => members.push(i),
                None => groups.push((q, vec![i])),
            }
        }
        let mut out: Vec<Option<FieldJet>> = vec![None; queries.len()];
        for (_, members) in groups {
            let jets: Vec<FieldJet> = members
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let group: Vec<&JetQuery> = chunk.iter().map(|&i| &queries[i]).collect();
                    self.jet_group(&group)
                })
                .collect::<Vec<_>>()
                .into_iter()
                .flatten()
                .collect();
            for (i, jet) in members.into_iter().zip(jets) {
                out[i] = Some(jet);
            }
        }
        Ok(out.into_iter().map(|j| j.expect("every query is grouped")).collect())
    }

    /// Evaluates queries that share `v_grads`, tangent count and pairs.
    fn jet_group(&self, queries: &[&JetQuery]) -> Vec<FieldJet> {
        let first = queries[0];
        let v_channels = if first.v_grads { 2 } else { 0 };
        let t_base = 1 + 3 + v_channels;
        let n_t = first.tangents.len();
        let pairs: Vec<(usize, usize)> = first.pairs.iter().map(|&(i, j)| (t_base + i, t_base + j)).collect();
        let channels = t_base + n_t + pairs.len();
        let frames: Vec<(Vec3, Vec3)> = queries.iter().map(|q| perpendicular_pair(&q.op.v)).collect();
        let ops: Vec<OrientedPoint> = queries.iter().map(|q| q.op).collect();
        let input = encode(&ops, channels, |k, c| {
            let mut x = [0.0; INPUT_DIM];
            if k <= 3 {
                x[k - 1] = 1.0;
            } else if k < t_base {
                let t = if k == 4 { frames[c].0 } else { frames[c].1 };
                x[3..].copy_from_slice(t.as_slice());
            } else if k < t_base + n_t {
                x[..3].copy_from_slice(queries[c].tangents[k - t_base].as_slice());
            }
            x
        });
        let y = self.net.forward(&input, &pairs, false).0;
        (0..queries.len())
            .map(|c| {
                let head = head_column(&y.data, c);
                let output = FieldOutput::from_head(head);
                let tangent = |k: usize| head_column(&y.data, k * y.n + c);
                let active = |i: usize| if head[i] > 0.0 { 1.0 } else { 0.0 };
                let (sw, sx) = (output.w1 * (1.0 - output.w1), output.xi * (1.0 - output.xi));
                let mut grad_p_d = [Vec3::zeros(); K];
                let mut grad_p_w1 = Vec3::zeros();
                let mut grad_p_xi = Vec3::zeros();
                for k in 0..3 {
                    let t = tangent(1 + k);
                    for i in 0..K {
                        grad_p_d[i][k] = active(i) * t[i];
                    }
                    grad_p_w1[k] = sw * (t[2] - t[3]);
                    grad_p_xi[k] = sx * t[4];
                }
                let grad_v_d = first.v_grads.then(|| {
                    let (t1, t2) = frames[c];
                    let (a, b) = (tangent(4), tangent(5));
                    [0, 1].map(|i| (t1 * a[i] + t2 * b[i]) * active(i))
                });
                let second = (0..pairs.len())
                    .map(|q| active(output.i_star) * tangent(t_base + n_t + q)[output.i_star])
                    .collect();
                FieldJet {
                    output,
                    grad_p_d,
                    grad_p_w1,
                    grad_p_xi,
                    grad_v_d,
                    second,
                }
            })
            .collect()
    }

    /// Forward pass with three position-basis tangent channels, recording a
    /// tape for [`PddfModel::backward`]. The output holds the raw head
    /// (pre-activation) values in block 0 and their position derivatives in
    /// blocks 1..=3.
    pub fn forward_with_position_tangents(&self, ops: &[OrientedPoint]) -> (Blocks, Tape) {
        let input = encode(ops, 4, |k, _| {
            let mut x = [0.0; INPUT_DIM];
            x[k - 1] = 1.0;
            x
        });
        let (out, tape) = self.net.forward(&input, &[], true);
        (out, tape.expect("recorded"))
    }

    /// Parameter gradients (flattened in checkpoint order) and the input
    /// gradient from upstream gradients on every output block.
    pub fn backward(&self, tape: &Tape, upstream: &Array2<f64>, want_input: bool) -> (Vec<f64>, Option<Array2<f64>>) {
        let (grads, input) = self.net.backward(tape, upstream, want_input);
        (siren::flatten(&grads), input)
    }
}

fn check_finite(ops: &[OrientedPoint]) -> Result<()> {
    for op in ops {
        if !(op.p.iter().all(|x| x.is_finite()) && op.v.iter().all(|x| x.is_finite())) || op.v.norm() == 0.0 {
            return Err(Error::invalid(format!("non-finite or zero-direction query {:?}", op)));
        }
    }
    Ok(())
}

/// Builds input blocks: block 0 holds `(p, v/|v|)`, block `k >= 1` the
/// tangent returned by `tangent(k, column)`.
pub(crate) fn encode<F>(ops: &[OrientedPoint], channels: usize, tangent: F) -> Blocks
where
    F: Fn(usize, usize) -> [f64; INPUT_DIM],
{
    let n = ops.len();
    let mut data = Array2::zeros((INPUT_DIM, channels * n));
    for (c, op) in ops.iter().enumerate() {
        let v = op.v / op.v.norm();
        for k in 0..3 {
            data[[k, c]] = op.p[k];
            data[[3 + k, c]] = v[k];
        }
        for ch in 1..channels {
            let x = tangent(ch, c);
            for (r, value) in x.iter().enumerate() {
                data[[r, ch * n + c]] = *value;
            }
        }
    }
    Blocks { data, n }
}

pub fn head_column(data: &Array2<f64>, col: usize) -> [f64; OUTPUT_DIM] {
    let column = data.slice(s![.., col]);
    std::array::from_fn(|r| column[r])
}

/// Property II: the unit normal `±grad / |grad|` oriented so `n · v < 0`,
/// or `None` when the gradient is degenerate.
pub fn surface_normal_estimate(grad_p_d: &Vec3, v: &Vec3) -> Option<Vec3> {
    let norm = grad_p_d.norm();
    if !(norm >= DEGENERATE_GRADIENT) {
        return None;
    }
    let n = grad_p_d / norm;
    Some(if n.dot(v) > 0.0 { -n } else { n })
}

/// Mean and Gaussian curvature (trace and determinant of the shape tensor).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    pub mean: f64,
    pub gaussian: f64,
}

/// Curvatures from `h[i][j] = t_j^T H_p[d] t_i` over an orthonormal tangent
/// basis of the surface at the hit, taking the metric as the identity.
///
/// The shape tensor is `II_ij = -h_ij (n · v)`, which makes convex
/// surfaces seen from outside positively curved (`2/r` for a sphere).
pub fn curvature_at(h: [[f64; 2]; 2], n: &Vec3, v: &Vec3) -> Option<Curvature> {
    let nv = n.dot(v);
    if !nv.is_finite() || nv.abs() < 1e-12 || h.iter().flatten().any(|x| !x.is_finite()) {
        return None;
    }
    let ii = h.map(|row| row.map(|x| -x * nv));
    Some(Curvature {
        mean: ii[0][0] + ii[1][1],
        gaussian: ii[0][0] * ii[1][1] - ii[0][1] * ii[1][0],
    })
}

impl DirectedField for PddfModel {
    fn query_batch(&self, ops: &[OrientedPoint]) -> Result<Vec<FieldSample>> {
        Ok(self
            .eval_batch(ops)?
            .into_iter()
            .map(|o| FieldSample {
                xi: o.xi,
                depth: o.depth(),
            })
            .collect())
    }
}

impl DifferentiableField for PddfModel {
    fn jet_batch(&self, queries: &[JetQuery]) -> Result<Vec<DepthJet>> {
        Ok(self
            .jets(queries)?
            .into_iter()
            .map(|j| DepthJet {
                sample: FieldSample {
                    xi: j.output.xi,
                    depth: j.output.depth(),
                },
                grad_p_depth: j.grad_p_depth(),
                grad_p_xi: j.grad_p_xi,
                grad_v_depth: j.grad_v_d.map(|g| g[j.output.i_star]),
                second: j.second,
            })
            .collect())
    }
}

impl DirectionGradient for PddfModel {
    fn direction_vjp(
        &self,
        ops: &[OrientedPoint],
        upstream: &mut dyn FnMut(&[DirectionTerms]) -> Vec<[f64; 3]>,
    ) -> Result<(Vec<DirectionTerms>, Vec<Vec3>)> {
        check_finite(ops)?;
        let (y, tape) = self.forward_with_position_tangents(ops);
        let n = ops.len();
        let mut terms = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        for c in 0..n {
            let head = head_column(&y.data, c);
            let out = FieldOutput::from_head(head);
            let i = out.i_star;
            let g = Vec3::from_fn(|k, _| {
                if head[i] > 0.0 {
                    y.data[[i, (1 + k) * n + c]]
                } else {
                    0.0
                }
            });
            let v = ops[c].v;
            let norm = g.norm();
            let alignment = if norm >= DEGENERATE_GRADIENT {
                -v.dot(&g).abs() / norm
            } else {
                0.0
            };
            terms.push(DirectionTerms {
                depth: out.depth(),
                xi: out.xi,
                alignment,
            });
            grads.push((g, norm));
        }
        let up = upstream(&terms);
        let mut seed = Array2::zeros(y.data.raw_dim());
        let mut direct = vec![Vec3::zeros(); n];
        for c in 0..n {
            let head = head_column(&y.data, c);
            let out = FieldOutput::from_head(head);
            let i = out.i_star;
            let [ud, ux, uc] = up[c];
            if head[i] > 0.0 {
                seed[[i, c]] += ud;
            }
            seed[[4, c]] += ux * out.xi * (1.0 - out.xi);
            let (g, norm) = grads[c];
            if norm >= DEGENERATE_GRADIENT && head[i] > 0.0 {
                let v = ops[c].v;
                let vg = v.dot(&g);
                let sign = vg.signum();
                let dc_dg = -v * (sign / norm) + g * (vg.abs() / norm.powi(3));
                for k in 0..3 {
                    seed[[i, (1 + k) * n + c]] += uc * dc_dg[k];
                }
                direct[c] = -g * (sign * uc / norm);
            }
        }
        let (_, input) = self.backward(&tape, &seed, true);
        let input = input.expect("input gradient requested");
        let out = (0..n)
            .map(|c| {
                let v = ops[c].v;
                let total = Vec3::new(input[[3, c]], input[[4, c]], input[[5, c]]) + direct[c];
                total - v * v.dot(&total)
            })
            .collect();
        Ok((terms, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> PddfModel {
        let mut config = SirenConfig::new(vec![16, 16]);
        config.seed = seed;
        config.omega_0 = 2.0;
        PddfModel::new(&config).unwrap()
    }

    #[test]
    fn zero_head_outputs_neutral_values() {
        let mut m = model(1);
        m.zero_head();
        let out = m
            .field_eval(&OrientedPoint::new(Vec3::new(0.1, 0.2, 0.3), Vec3::x()))
            .unwrap();
        assert_eq!(out.d, [0.0, 0.0]);
        assert_eq!(out.w1, 0.5);
        assert_eq!(out.xi, 0.5);
        assert_eq!(out.i_star, 0);
    }

    #[test]
    fn direction_is_normalized_on_input() {
        let m = model(2);
        let p = Vec3::new(0.3, -0.2, 0.1);
        let v = Vec3::new(0.2, 0.5, -0.7);
        let a = m.field_eval(&OrientedPoint { p, v }).unwrap();
        let b = m.field_eval(&OrientedPoint { p, v: v * 2.0 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_finite_queries() {
        let m = model(3);
        let op = OrientedPoint {
            p: Vec3::new(f64::NAN, 0.0, 0.0),
            v: Vec3::x(),
        };
        assert!(m.field_eval(&op).is_err());
    }

    #[test]
    fn normal_estimate_faces_viewer() {
        let v = -Vec3::z();
        assert_eq!(surface_normal_estimate(&Vec3::new(0.0, 0.0, 2.0), &v), Some(Vec3::z()));
        assert_eq!(surface_normal_estimate(&Vec3::new(0.0, 0.0, -2.0), &v), Some(Vec3::z()));
        assert_eq!(surface_normal_estimate(&Vec3::new(0.0, 0.0, 1e-9), &v), None);
    }

    #[test]
    fn batched_jets_match_single_queries() {
        let m = model(4);
        let q = |x: f64| {
            JetQuery::new(OrientedPoint::new(Vec3::new(x, 0.1, -0.2), Vec3::new(0.3, -0.4, 0.8)))
                .with_second_order(Vec3::x(), Vec3::y())
        };
        let mixed = vec![q(0.1), JetQuery::new(q(0.2).op).with_v_grads(), q(0.3)];
        let batch = m.jets(&mixed).unwrap();
        for (query, jet) in mixed.iter().zip(&batch) {
            assert_eq!(&m.field_eval_jet(query).unwrap(), jet);
        }
        assert!(batch[1].grad_v_d.is_some() && batch[1].second.is_empty());
    }
}
