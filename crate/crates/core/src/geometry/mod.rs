//! Exact geometric primitives: rays against boxes, triangles, meshes, and
//! closed-form shapes. These are the ground truth every learned field is
//! trained and checked against.

mod analytic;
mod bvh;
pub(crate) mod mesh;
mod obj;

pub use analytic::AnalyticShape;
pub use mesh::{ray_triangle_intersect, TriangleHit, TriangleMesh};
pub use obj::{load_obj, parse_obj};

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

/// Tolerance on unit-vector norms.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// A field query: a position together with a unit viewing direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedPoint {
    pub p: Vec3,
    pub v: Vec3,
}

impl OrientedPoint {
    /// Builds an oriented point, normalizing `v`.
    pub fn new(p: Vec3, v: Vec3) -> Self {
        Self { p, v: v.normalize() }
    }

    /// Point reached after travelling `t` along the ray.
    pub fn at(&self, t: f64) -> Vec3 {
        self.p + self.v * t
    }
}

/// Axis-aligned box; the field domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for BoundingBox {
    fn default() -> Self {
        Self {
            min: Vec3::repeat(-1.0),
            max: Vec3::repeat(1.0),
        }
    }
}

impl BoundingBox {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        debug_assert!((0..3).all(|k| min[k] < max[k]));
        Self { min, max }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    /// Parametric interval `[t_enter, t_exit]` where the line `p + t v`
    /// is inside the box, if the line meets it at all.
    fn slab_interval(&self, p: &Vec3, v: &Vec3) -> Option<(f64, f64, usize, usize)> {
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        let (mut enter_axis, mut exit_axis) = (0, 0);
        for k in 0..3 {
            if v[k] == 0.0 {
                if p[k] < self.min[k] || p[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / v[k];
            let mut t0 = (self.min[k] - p[k]) * inv;
            let mut t1 = (self.max[k] - p[k]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            if t0 > t_enter {
                t_enter = t0;
                enter_axis = k;
            }
            if t1 < t_exit {
                t_exit = t1;
                exit_axis = k;
            }
        }
        (t_enter <= t_exit).then_some((t_enter, t_exit, enter_axis, exit_axis))
    }

    /// Entry point of the ray `p + t v, t >= 0` into the box. Interior
    /// points are returned unchanged.
    pub fn ray_entry(&self, p: &Vec3, v: &Vec3) -> Option<Vec3> {
        if self.contains(p) {
            return Some(*p);
        }
        let (t_enter, t_exit, axis, _) = self.slab_interval(p, v)?;
        if t_exit < 0.0 || t_enter < 0.0 {
            return None;
        }
        let mut q = p + v * t_enter;
        q[axis] = if v[axis] > 0.0 { self.min[axis] } else { self.max[axis] };
        Some(self.clamp(q))
    }

    /// Exit point of the ray `p + t v` from an interior point, snapped so the
    /// exit coordinate lies exactly on the boundary.
    pub fn ray_exit(&self, p: &Vec3, v: &Vec3) -> Option<Vec3> {
        let (_, t_exit, _, axis) = self.slab_interval(p, v)?;
        if t_exit < 0.0 || !t_exit.is_finite() {
            return None;
        }
        let mut q = p + v * t_exit;
        q[axis] = if v[axis] > 0.0 { self.max[axis] } else { self.min[axis] };
        Some(self.clamp(q))
    }

    fn clamp(&self, q: Vec3) -> Vec3 {
        Vec3::from_fn(|k, _| q[k].clamp(self.min[k], self.max[k]))
    }

    /// Uniform point in the box volume.
    pub fn sample_interior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        Vec3::from_fn(|k, _| rng.gen_range(self.min[k]..=self.max[k]))
    }

    /// Uniform point on the box surface, with the inward face normal.
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec3, Vec3) {
        let e = self.extent();
        let areas = [e.y * e.z, e.y * e.z, e.x * e.z, e.x * e.z, e.x * e.y, e.x * e.y];
        let total: f64 = areas.iter().sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut face = 5;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                face = i;
                break;
            }
            pick -= a;
        }
        let axis = face / 2;
        let mut p = self.sample_interior(rng);
        let mut inward = Vec3::zeros();
        if face % 2 == 0 {
            p[axis] = self.min[axis];
            inward[axis] = 1.0;
        } else {
            p[axis] = self.max[axis];
            inward[axis] = -1.0;
        }
        (p, inward)
    }
}

/// Entry point `p_r` of a ray into `bbox`; `p` itself when already inside.
pub fn ray_box_entry(p: &Vec3, v: &Vec3, bbox: &BoundingBox) -> Option<Vec3> {
    bbox.ray_entry(p, v)
}

/// Ground-truth ray query result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitRecord {
    pub visible: bool,
    /// Distance to the first hit; zero when not visible.
    pub depth: f64,
    /// Unit surface normal facing the viewer (`normal · v < 0`); zero when not visible.
    pub normal: Vec3,
    pub triangle: Option<usize>,
}

impl HitRecord {
    pub fn miss() -> Self {
        Self {
            visible: false,
            depth: 0.0,
            normal: Vec3::zeros(),
            triangle: None,
        }
    }

    pub(crate) fn hit(depth: f64, normal: Vec3, v: &Vec3, triangle: Option<usize>) -> Self {
        Self {
            visible: true,
            depth,
            normal: face_against(normal, v),
            triangle,
        }
    }
}

/// Flips `n` so it points back along the ray (`n · v <= 0`).
pub fn face_against(n: Vec3, v: &Vec3) -> Vec3 {
    if n.dot(v) > 0.0 {
        -n
    } else {
        n
    }
}

/// Uniform direction on the unit sphere.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let g = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let norm = g.norm();
        if norm > 1e-6 {
            return g / norm;
        }
    }
}

/// Orthonormal tangent pair `(t_x, t_y)` spanning the plane orthogonal to `n`,
/// by Gram-Schmidt on Gaussian vectors.
pub fn tangent_basis<R: Rng + ?Sized>(n: &Vec3, rng: &mut R) -> (Vec3, Vec3) {
    let n = n.normalize();
    let t_x = loop {
        let g = random_unit(rng);
        let t = g - n * n.dot(&g);
        if t.norm() > 0.1 {
            break t.normalize();
        }
    };
    let t_y = loop {
        let g = random_unit(rng);
        let t = g - n * n.dot(&g) - t_x * t_x.dot(&g);
        if t.norm() > 0.1 {
            let t = t.normalize();
            // one more pass keeps orthogonality at round-off level
            let t = t - n * n.dot(&t) - t_x * t_x.dot(&t);
            break t.normalize();
        }
    };
    (t_x, t_y)
}

/// Deterministic orthonormal pair orthogonal to the unit vector `v`, with
/// `t_1 x t_2 = v`.
pub fn perpendicular_pair(v: &Vec3) -> (Vec3, Vec3) {
    let axis = v.iamin();
    let e = Vec3::ith(axis, 1.0);
    let t1 = (e - v * v[axis]).normalize();
    (t1, v.cross(&t1))
}
