//! The "field-like" abstraction shared by learned fields, analytic oracles,
//! meshes, and composed scenes.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;
use crate::geometry::{perpendicular_pair, AnalyticShape, BoundingBox, OrientedPoint, TriangleMesh, Vec3};

/// Visibility and (selected) depth at one oriented point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub xi: f64,
    pub depth: f64,
}

impl FieldSample {
    pub const INVISIBLE: FieldSample = FieldSample { xi: 0.0, depth: 0.0 };
}

/// Anything that answers directed distance queries.
pub trait DirectedField: Send + Sync {
    fn query_batch(&self, ops: &[OrientedPoint]) -> Result<Vec<FieldSample>>;

    fn query(&self, op: &OrientedPoint) -> Result<FieldSample> {
        Ok(self.query_batch(std::slice::from_ref(op))?[0])
    }
}

/// Derivative request for one oriented point.
///
/// Position gradients of depth and visibility are always returned.
/// `v_grads` asks for the direction gradient of depth restricted to the
/// plane orthogonal to `v`; `pairs` asks for `t_j^T H_p[d] t_i` with
/// `(i, j)` indexing into `tangents`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JetQuery {
    pub op: OrientedPoint,
    pub v_grads: bool,
    pub tangents: Vec<Vec3>,
    pub pairs: Vec<(usize, usize)>,
}

impl JetQuery {
    pub fn new(op: OrientedPoint) -> Self {
        Self {
            op,
            ..Default::default()
        }
    }

    /// Requests `t_j^T H_p[d] t_i` for all four ordered pairs of `(t_x, t_y)`.
    pub fn with_second_order(mut self, t_x: Vec3, t_y: Vec3) -> Self {
        self.tangents = vec![t_x, t_y];
        self.pairs = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
        self
    }

    pub fn with_v_grads(mut self) -> Self {
        self.v_grads = true;
        self
    }
}

impl Default for OrientedPoint {
    fn default() -> Self {
        OrientedPoint {
            p: Vec3::zeros(),
            v: Vec3::z(),
        }
    }
}

/// Selected-depth derivatives at one oriented point.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthJet {
    pub sample: FieldSample,
    pub grad_p_depth: Vec3,
    pub grad_p_xi: Vec3,
    /// Direction gradient of depth projected orthogonally to `v`.
    pub grad_v_depth: Option<Vec3>,
    /// `t_j^T H_p[d] t_i` per requested pair.
    pub second: Vec<f64>,
}

/// Fields with position (and direction) derivatives.
pub trait DifferentiableField: DirectedField {
    fn jet_batch(&self, queries: &[JetQuery]) -> Result<Vec<DepthJet>>;
}

/// Per-query terms used when optimizing over the viewing direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionTerms {
    pub depth: f64,
    pub xi: f64,
    /// `v · n(p, v)`, in `[-1, 0]`; zero where the normal is undefined.
    pub alignment: f64,
}

/// Fields that can back-propagate a loss on [`DirectionTerms`] to the
/// viewing direction.
pub trait DirectionGradient: DirectedField {
    /// Evaluates the terms, asks `upstream` for `(dL/d depth, dL/d xi,
    /// dL/d alignment)` per query, and returns the terms with `dL/dv`.
    fn direction_vjp(
        &self,
        ops: &[OrientedPoint],
        upstream: &mut dyn FnMut(&[DirectionTerms]) -> Vec<[f64; 3]>,
    ) -> Result<(Vec<DirectionTerms>, Vec<Vec3>)>;
}

impl DirectedField for AnalyticShape {
    fn query_batch(&self, ops: &[OrientedPoint]) -> Result<Vec<FieldSample>> {
        Ok(ops
            .iter()
            .map(|op| {
                let hit = self.cast(op);
                if hit.visible {
                    FieldSample {
                        xi: 1.0,
                        depth: hit.depth,
                    }
                } else {
                    FieldSample::INVISIBLE
                }
            })
            .collect())
    }
}

impl DifferentiableField for AnalyticShape {
    fn jet_batch(&self, queries: &[JetQuery]) -> Result<Vec<DepthJet>> {
        let zero = Vec3::zeros();
        Ok(queries
            .iter()
            .map(|q| {
                let op = &q.op;
                let Some(base) = self.depth_hyper(op, (zero, zero), (zero, zero)) else {
                    return DepthJet {
                        sample: FieldSample::INVISIBLE,
                        grad_p_depth: zero,
                        grad_p_xi: zero,
                        grad_v_depth: q.v_grads.then(Vec3::zeros),
                        second: vec![0.0; q.pairs.len()],
                    };
                };
                let grad = Vec3::from_fn(|k, _| {
                    let e = Vec3::ith(k, 1.0);
                    self.depth_hyper(op, (e, zero), (zero, zero)).map_or(0.0, |d| d.eps1)
                });
                let grad_v_depth = q.v_grads.then(|| {
                    let (t1, t2) = perpendicular_pair(&op.v);
                    let along = |t: Vec3| self.depth_hyper(op, (zero, t), (zero, zero)).map_or(0.0, |d| d.eps1);
                    t1 * along(t1) + t2 * along(t2)
                });
                let second = q
                    .pairs
                    .iter()
                    .map(|&(i, j)| {
                        self.depth_hyper(op, (q.tangents[i], zero), (q.tangents[j], zero))
                            .map_or(0.0, |d| d.eps1eps2)
                    })
                    .collect();
                DepthJet {
                    sample: FieldSample {
                        xi: 1.0,
                        depth: base.re,
                    },
                    grad_p_depth: grad,
                    grad_p_xi: zero,
                    grad_v_depth,
                    second,
                }
            })
            .collect())
    }
}

impl DirectionGradient for AnalyticShape {
    fn direction_vjp(
        &self,
        ops: &[OrientedPoint],
        upstream: &mut dyn FnMut(&[DirectionTerms]) -> Vec<[f64; 3]>,
    ) -> Result<(Vec<DirectionTerms>, Vec<Vec3>)> {
        let mut terms = Vec::with_capacity(ops.len());
        let mut partials = Vec::with_capacity(ops.len());
        for op in ops {
            let mut grad_d = Vec3::zeros();
            let mut grad_c = Vec3::zeros();
            let mut term = DirectionTerms {
                depth: 0.0,
                xi: 0.0,
                alignment: 0.0,
            };
            for k in 0..3 {
                if let Some((d, c)) = self.alignment_hyper(op, Vec3::ith(k, 1.0)) {
                    term = DirectionTerms {
                        depth: d.re,
                        xi: 1.0,
                        alignment: c.re,
                    };
                    grad_d[k] = d.eps1;
                    grad_c[k] = c.eps1;
                }
            }
            terms.push(term);
            partials.push((grad_d, grad_c));
        }
        let up = upstream(&terms);
        let grads = partials
            .iter()
            .zip(&up)
            .map(|((gd, gc), u)| gd * u[0] + gc * u[2])
            .collect();
        Ok((terms, grads))
    }
}

impl DirectedField for TriangleMesh {
    fn query_batch(&self, ops: &[OrientedPoint]) -> Result<Vec<FieldSample>> {
        Ok(ops
            .iter()
            .map(|op| {
                let hit = self.raycast(op);
                if hit.visible {
                    FieldSample {
                        xi: 1.0,
                        depth: hit.depth,
                    }
                } else {
                    FieldSample::INVISIBLE
                }
            })
            .collect())
    }
}

impl<F: DirectedField + ?Sized> DirectedField for &F {
    fn query_batch(&self, ops: &[OrientedPoint]) -> Result<Vec<FieldSample>> {
        (**self).query_batch(ops)
    }
}

impl<F: DirectedField + ?Sized> DirectedField for Box<F> {
    fn query_batch(&self, ops: &[OrientedPoint]) -> Result<Vec<FieldSample>> {
        (**self).query_batch(ops)
    }
}

impl<F: DifferentiableField + ?Sized> DifferentiableField for &F {
    fn jet_batch(&self, queries: &[JetQuery]) -> Result<Vec<DepthJet>> {
        (**self).jet_batch(queries)
    }
}

/// Wraps a field and counts the oriented points it is asked about.
pub struct CountingField<F> {
    inner: F,
    count: AtomicUsize,
}

impl<F> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

impl<F: DirectedField> DirectedField for CountingField<F> {
    fn query_batch(&self, ops: &[OrientedPoint]) -> Result<Vec<FieldSample>> {
        self.count.fetch_add(ops.len(), Ordering::SeqCst);
        self.inner.query_batch(ops)
    }
}

/// Applies the outside-domain rule to a field defined on a box: queries from
/// outside are moved to the ray's entry point `p_r` and the travelled
/// distance `|p - p_r|` is added to the depth; rays that miss the box are
/// invisible and never reach the inner field.
pub struct Bounded<F> {
    pub inner: F,
    pub domain: BoundingBox,
}

impl<F> Bounded<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            domain: BoundingBox::default(),
        }
    }
}

/// Moves each query to its box entry; returns the moved queries, the index
/// of each original query among them (or `None`), and the offsets.
pub(crate) fn enter_domain(
    domain: &BoundingBox,
    ops: &[OrientedPoint],
) -> (Vec<OrientedPoint>, Vec<Option<(usize, f64)>>) {
    let mut moved = Vec::with_capacity(ops.len());
    let slots = ops
        .iter()
        .map(|op| {
            domain.ray_entry(&op.p, &op.v).map(|p_r| {
                moved.push(OrientedPoint { p: p_r, v: op.v });
                (moved.len() - 1, (op.p - p_r).norm())
            })
        })
        .collect();
    (moved, slots)
}

impl<F: DirectedField> DirectedField for Bounded<F> {
    fn query_batch(&self, ops: &[OrientedPoint]) -> Result<Vec<FieldSample>> {
        let (moved, slots) = enter_domain(&self.domain, ops);
        let samples = self.inner.query_batch(&moved)?;
        Ok(slots
            .iter()
            .map(|slot| match slot {
                Some((i, offset)) => FieldSample {
                    xi: samples[*i].xi,
                    depth: samples[*i].depth + offset,
                },
                None => FieldSample::INVISIBLE,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_jet_satisfies_directed_eikonal() {
        let s = AnalyticShape::sphere(1.0);
        let op = OrientedPoint::new(Vec3::new(0.2, -0.1, 2.0), Vec3::new(0.05, 0.1, -1.0));
        let jet = &s.jet_batch(&[JetQuery::new(op)]).unwrap()[0];
        assert!((jet.grad_p_depth.dot(&op.v) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_sphere_curvature_is_two_over_radius() {
        use crate::field::curvature_at;
        use crate::geometry::tangent_basis;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let s = AnalyticShape::sphere(0.8);
        let op = OrientedPoint::new(Vec3::new(0.1, 0.3, 1.5), Vec3::new(-0.1, -0.2, -1.0));
        let n = s.cast(&op).normal;
        let (tx, ty) = tangent_basis(&n, &mut rng);
        let jet = &s.jet_batch(&[JetQuery::new(op).with_second_order(tx, ty)]).unwrap()[0];
        let h = [[jet.second[0], jet.second[1]], [jet.second[2], jet.second[3]]];
        let c = curvature_at(h, &n, &op.v).unwrap();
        assert!((c.mean - 2.0 / 0.8).abs() < 1e-9, "{c:?}");
        assert!((c.gaussian - 1.0 / 0.64).abs() < 1e-9, "{c:?}");
    }

    #[test]
    fn analytic_direction_gradient_matches_projected_hyperdual() {
        let s = AnalyticShape::sphere(1.0);
        let op = OrientedPoint::new(Vec3::new(0.2, -0.1, 2.0), Vec3::new(0.05, 0.1, -1.0));
        let jet = &s.jet_batch(&[JetQuery::new(op).with_v_grads()]).unwrap()[0];
        let g = jet.grad_v_depth.unwrap();
        assert!(g.dot(&op.v).abs() < 1e-12);
        let t = perpendicular_pair(&op.v).0;
        let h = 1e-6;
        let fd = (s.cast(&OrientedPoint::new(op.p, op.v + t * h)).depth
            - s.cast(&OrientedPoint::new(op.p, op.v - t * h)).depth)
            / (2.0 * h);
        assert!((g.dot(&t) - fd).abs() < 1e-7);
    }

    #[test]
    fn bounded_adds_travelled_distance() {
        let s = AnalyticShape::sphere(0.5);
        let op = OrientedPoint::new(Vec3::new(0.0, 0.0, 3.0), -Vec3::z());
        let direct = s.query(&op).unwrap();
        let bounded = Bounded::new(s).query(&op).unwrap();
        assert!((direct.depth - bounded.depth).abs() < 1e-12);
        assert_eq!(bounded.xi, 1.0);
        let away = OrientedPoint::new(Vec3::new(0.0, 0.0, 3.0), Vec3::z());
        assert_eq!(Bounded::new(s).query(&away).unwrap(), FieldSample::INVISIBLE);
    }

    #[test]
    fn counting_field_counts_points() {
        let f = CountingField::new(AnalyticShape::sphere(1.0));
        let ops = vec![OrientedPoint::default(); 7];
        f.query_batch(&ops).unwrap();
        f.query(&ops[0]).unwrap();
        assert_eq!(f.count(), 8);
    }
}
