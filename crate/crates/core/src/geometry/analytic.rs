//! Closed-form directed distance fields for simple shapes.
//!
//! The intersection formulas are written once, generically over
//! [`DualNum`], so the same code yields exact values (`f64`) and exact
//! first and second directional derivatives (hyper-dual numbers).

use num_dual::{DualNum, HyperDual64};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{random_unit, HitRecord, OrientedPoint, Vec3};
use crate::error::{Error, Result};

/// Hits with `t` in `[-T_EPS, 0)` are treated as `t = 0` (origin on the surface).
const T_EPS: f64 = 1e-9;
/// Discriminants this close below zero count as tangent contact.
const DISC_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum AnalyticShape {
    Sphere { center: Vec3, radius: f64 },
    Plane { point: Vec3, normal: Vec3 },
    Box { min: Vec3, max: Vec3 },
}

type V3<D> = [D; 3];

fn dot<D: DualNum<f64> + Copy>(a: &V3<D>, b: &V3<D>) -> D {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn lift<D: DualNum<f64> + Copy>(a: &Vec3) -> V3<D> {
    [D::from(a.x), D::from(a.y), D::from(a.z)]
}

impl AnalyticShape {
    pub fn sphere(radius: f64) -> Self {
        AnalyticShape::Sphere {
            center: Vec3::zeros(),
            radius,
        }
    }

    pub fn plane(point: Vec3, normal: Vec3) -> Self {
        AnalyticShape::Plane {
            point,
            normal: normal.normalize(),
        }
    }

    pub fn cuboid(min: Vec3, max: Vec3) -> Self {
        AnalyticShape::Box { min, max }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AnalyticShape::Sphere { radius, .. } if *radius <= 0.0 => {
                Err(Error::invalid("sphere radius must be positive"))
            }
            AnalyticShape::Plane { normal, .. } if (normal.norm() - 1.0).abs() > 1e-9 => {
                Err(Error::invalid("plane normal must be unit"))
            }
            AnalyticShape::Box { min, max } if (0..3).any(|k| min[k] >= max[k]) => {
                Err(Error::invalid("box min must be below max"))
            }
            _ => Ok(()),
        }
    }

    /// First intersection of the ray `p + t v` (`v` is normalized here) as
    /// `(t, outward normal at the hit)`.
    pub fn trace<D: DualNum<f64> + Copy>(&self, p: V3<D>, v: V3<D>) -> Option<(D, V3<D>)> {
        let len = dot(&v, &v).sqrt();
        let v = [v[0] / len, v[1] / len, v[2] / len];
        match *self {
            AnalyticShape::Sphere { center, radius } => {
                let c = lift::<D>(&center);
                let oc = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                let b = dot(&oc, &v);
                let cc = dot(&oc, &oc) - radius * radius;
                let mut disc = b * b - cc;
                if disc.re() < 0.0 {
                    if disc.re() < -DISC_EPS * radius * radius {
                        return None;
                    }
                    disc = D::zero();
                }
                let root = disc.sqrt();
                let near = -b - root;
                let far = -b + root;
                let t = if near.re() >= -T_EPS {
                    near
                } else if far.re() >= -T_EPS {
                    far
                } else {
                    return None;
                };
                let t = if t.re() < 0.0 { D::zero() } else { t };
                let n = [
                    (oc[0] + v[0] * t) / radius,
                    (oc[1] + v[1] * t) / radius,
                    (oc[2] + v[2] * t) / radius,
                ];
                Some((t, n))
            }
            AnalyticShape::Plane { point, normal } => {
                let n = lift::<D>(&normal);
                let denom = dot(&n, &v);
                if denom.re().abs() < 1e-12 {
                    return None;
                }
                let q = lift::<D>(&point);
                let diff = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
                let t = dot(&n, &diff) / denom;
                if t.re() < -T_EPS {
                    return None;
                }
                let t = if t.re() < 0.0 { D::zero() } else { t };
                Some((t, n))
            }
            AnalyticShape::Box { min, max } => {
                let mut enter: Option<(D, usize)> = None;
                let mut exit: Option<(D, usize)> = None;
                for k in 0..3 {
                    if v[k].re() == 0.0 {
                        if p[k].re() < min[k] || p[k].re() > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (D::from(min[k]) - p[k]) / v[k];
                    let mut t1 = (D::from(max[k]) - p[k]) / v[k];
                    if t0.re() > t1.re() {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if enter.map_or(true, |(t, _)| t0.re() > t.re()) {
                        enter = Some((t0, k));
                    }
                    if exit.map_or(true, |(t, _)| t1.re() < t.re()) {
                        exit = Some((t1, k));
                    }
                }
                let (t_in, k_in) = enter?;
                let (t_out, k_out) = exit?;
                if t_in.re() > t_out.re() {
                    return None;
                }
                let (t, axis) = if t_in.re() >= -T_EPS {
                    (t_in, k_in)
                } else if t_out.re() >= -T_EPS {
                    (t_out, k_out)
                } else {
                    return None;
                };
                let t = if t.re() < 0.0 { D::zero() } else { t };
                let mut n = [D::zero(); 3];
                n[axis] = D::one();
                Some((t, n))
            }
        }
    }

    /// Exact visibility, depth and viewer-facing normal.
    pub fn cast(&self, op: &OrientedPoint) -> HitRecord {
        match self.trace::<f64>(op.p.into(), op.v.into()) {
            Some((t, n)) => HitRecord::hit(t, Vec3::from(n).normalize(), &op.v, None),
            None => HitRecord::miss(),
        }
    }

    /// Depth with one or two seeded perturbations: `eps1` along `(dp1, dv1)`
    /// and `eps2` along `(dp2, dv2)`. Returns the hyper-dual depth, or `None`
    /// when the ray misses.
    pub fn depth_hyper(
        &self,
        op: &OrientedPoint,
        (dp1, dv1): (Vec3, Vec3),
        (dp2, dv2): (Vec3, Vec3),
    ) -> Option<HyperDual64> {
        let seed = |k: usize| {
            (
                HyperDual64::new(op.p[k], dp1[k], dp2[k], 0.0),
                HyperDual64::new(op.v[k], dv1[k], dv2[k], 0.0),
            )
        };
        let (p0, v0) = seed(0);
        let (p1, v1) = seed(1);
        let (p2, v2) = seed(2);
        self.trace([p0, p1, p2], [v0, v1, v2]).map(|(t, _)| t)
    }

    /// `v · n(p, v)` (the alignment of the view direction with the hit's
    /// viewer-facing normal) together with the depth, both seeded along a
    /// direction perturbation `dv`.
    pub fn alignment_hyper(&self, op: &OrientedPoint, dv: Vec3) -> Option<(HyperDual64, HyperDual64)> {
        let p = [0, 1, 2].map(|k| HyperDual64::from(op.p[k]));
        let v = [0, 1, 2].map(|k| HyperDual64::new(op.v[k], dv[k], 0.0, 0.0));
        let (t, n) = self.trace(p, v)?;
        let len = dot(&v, &v).sqrt();
        let vn = [v[0] / len, v[1] / len, v[2] / len];
        let c = dot(&vn, &n);
        // orientation flip is locally constant
        let c = if c.re() > 0.0 { -c } else { c };
        Some((t, c))
    }

    /// Uniform surface sample as `(point, outward normal)`.
    pub fn surface_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec3, Vec3)> {
        match *self {
            AnalyticShape::Sphere { center, radius } => {
                let n = random_unit(rng);
                Ok((center + n * radius, n))
            }
            AnalyticShape::Box { min, max } => {
                let bbox = super::BoundingBox::new(min, max);
                let (p, inward) = bbox.sample_boundary(rng);
                Ok((p, -inward))
            }
            AnalyticShape::Plane { .. } => {
                Err(Error::invalid("an unbounded plane has no uniform surface distribution"))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            AnalyticShape::Sphere { center, radius } => {
                format!("analytic sphere r={radius} c=({},{},{})", center.x, center.y, center.z)
            }
            AnalyticShape::Plane { point, normal } => format!(
                "analytic plane p=({},{},{}) n=({},{},{})",
                point.x, point.y, point.z, normal.x, normal.y, normal.z
            ),
            AnalyticShape::Box { min, max } => format!(
                "analytic box ({},{},{})-({},{},{})",
                min.x, min.y, min.z, max.x, max.y, max.z
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(p: [f64; 3], v: [f64; 3]) -> OrientedPoint {
        OrientedPoint::new(Vec3::from(p), Vec3::from(v))
    }

    #[test]
    fn sphere_head_on() {
        let hit = AnalyticShape::sphere(1.0).cast(&op([0., 0., 2.], [0., 0., -1.]));
        assert!(hit.visible);
        assert_eq!(hit.depth, 1.0);
        assert_eq!(hit.normal, Vec3::z());
    }

    #[test]
    fn sphere_grazing_tangent_point() {
        let hit = AnalyticShape::sphere(1.0).cast(&op([1., 0., 2.], [0., 0., -1.]));
        assert!(hit.visible);
        assert_eq!(hit.depth, 2.0);
        assert!((hit.normal - Vec3::x()).norm() < 1e-12);
    }

    #[test]
    fn sphere_from_inside_hits_far_wall() {
        let hit = AnalyticShape::sphere(1.0).cast(&op([0., 0., 0.], [1., 0., 0.]));
        assert!(hit.visible);
        assert!((hit.depth - 1.0).abs() < 1e-15);
        assert!((hit.normal + Vec3::x()).norm() < 1e-12);
    }

    #[test]
    fn sphere_surface_origin_is_zero_depth() {
        let s = AnalyticShape::sphere(1.0);
        for v in [[0., 0., 1.], [0., 0., -1.], [1., 0., 0.]] {
            let hit = s.cast(&op([0., 0., 1.], v));
            assert!(hit.visible);
            assert_eq!(hit.depth, 0.0);
        }
    }

    #[test]
    fn plane_oblique() {
        let s = AnalyticShape::plane(Vec3::zeros(), Vec3::z());
        let a = std::f64::consts::FRAC_PI_4;
        let hit = s.cast(&op([0., 0., 1.], [a.sin(), 0., -a.cos()]));
        assert!(hit.visible);
        assert!((hit.depth - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(hit.normal, Vec3::z());
        assert!(!s.cast(&op([0., 0., 1.], [0., 0., 1.])).visible);
    }

    #[test]
    fn box_outside_and_inside() {
        let s = AnalyticShape::cuboid(Vec3::repeat(-0.5), Vec3::repeat(0.5));
        let hit = s.cast(&op([0., 0., 2.], [0., 0., -1.]));
        assert!((hit.depth - 1.5).abs() < 1e-12);
        assert_eq!(hit.normal, Vec3::z());
        let hit = s.cast(&op([0., 0., 0.], [1., 0., 0.]));
        assert!((hit.depth - 0.5).abs() < 1e-12);
        assert_eq!(hit.normal, -Vec3::x());
        assert!(!s.cast(&op([0., 2., 2.], [0., 0., -1.])).visible);
    }

    #[test]
    fn hyperdual_gives_exact_directional_derivatives() {
        // d(p, v) = z - sqrt(1 - x^2 - y^2) for v = -z
        let s = AnalyticShape::sphere(1.0);
        let o = op([0.3, 0.2, 2.0], [0., 0., -1.]);
        let zero = Vec3::zeros();
        let d = s.depth_hyper(&o, (Vec3::x(), zero), (Vec3::x(), zero)).unwrap();
        let h = (1.0f64 - 0.09 - 0.04).sqrt();
        assert!((d.re - (2.0 - h)).abs() < 1e-14);
        assert!((d.eps1 - 0.3 / h).abs() < 1e-14);
        // d2/dx2 = 1/h + x^2/h^3
        assert!((d.eps1eps2 - (1.0 / h + 0.09 / h.powi(3))).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        assert!(AnalyticShape::sphere(0.0).validate().is_err());
        assert!(AnalyticShape::Plane {
            point: Vec3::zeros(),
            normal: Vec3::new(0., 0., 2.)
        }
        .validate()
        .is_err());
        assert!(AnalyticShape::sphere(0.9).validate().is_ok());
    }
}
