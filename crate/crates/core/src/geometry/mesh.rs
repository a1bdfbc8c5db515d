use rand::Rng;

use super::bvh::Bvh;
use super::{HitRecord, OrientedPoint, Vec3};
use crate::error::{Error, Result};

/// Determinant cutoff below which a ray counts as parallel to a triangle.
const DET_EPS: f64 = 1e-9;
/// Hits this far behind the origin still count, at depth zero.
pub(crate) const MIN_T: f64 = -1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleHit {
    pub t: f64,
    /// Barycentric weights of the second and third vertex.
    pub u: f64,
    pub v: f64,
}

/// Moller-Trumbore intersection against a closed triangle.
///
/// Returns hits with `t >= 0`; a hit within `1e-7` behind the origin is
/// reported at `t = 0` so that origins lying on the surface see it.
pub fn ray_triangle_intersect(origin: &Vec3, dir: &Vec3, tri: [&Vec3; 3]) -> Option<TriangleHit> {
    raw_intersect(origin, dir, tri).map(|h| TriangleHit { t: h.t.max(0.0), ..h })
}

#[inline]
pub(crate) fn raw_intersect(origin: &Vec3, dir: &Vec3, [a, b, c]: [&Vec3; 3]) -> Option<TriangleHit> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < DET_EPS {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv;
    (t >= MIN_T).then_some(TriangleHit { t, u, v })
}

/// Indexed triangle mesh with per-face normals, areas, and a BVH.
#[derive(Clone, Debug)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    normals: Vec<Vec3>,
    areas: Vec<f64>,
    bvh: Bvh,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(bad) = triangles.iter().flatten().find(|&&i| i >= vertices.len()) {
            return Err(Error::invalid(format!(
                "triangle index {bad} out of range for {} vertices",
                vertices.len()
            )));
        }
        let (normals, areas) = triangles
            .iter()
            .map(|&[a, b, c]| {
                let cross = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
                let len = cross.norm();
                let n = if len > 0.0 { cross / len } else { Vec3::zeros() };
                (n, 0.5 * len)
            })
            .unzip();
        let bvh = Bvh::build(&vertices, &triangles);
        Ok(Self {
            vertices,
            triangles,
            normals,
            areas,
            bvh,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub(crate) fn corners(&self, tri: usize) -> [&Vec3; 3] {
        let [a, b, c] = self.triangles[tri];
        [&self.vertices[a], &self.vertices[b], &self.vertices[c]]
    }

    /// Axis-aligned bounds of the vertices.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(
            self.vertices
                .iter()
                .fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))),
        )
    }

    /// Centres the bounding box at the origin and scales its longest side to 2.
    pub fn normalized(&self) -> Result<Self> {
        let (lo, hi) = self.bounds().ok_or_else(|| Error::invalid("mesh has no vertices"))?;
        let longest = (hi - lo).max();
        if longest <= 0.0 {
            return Err(Error::invalid("mesh has zero extent"));
        }
        let center = (lo + hi) * 0.5;
        let scale = 2.0 / longest;
        let vertices = self.vertices.iter().map(|v| (v - center) * scale).collect();
        Self::new(vertices, self.triangles.clone())
    }

    /// First hit by exhaustive search over all triangles (lowest index wins ties).
    pub fn raycast_brute_force(&self, op: &OrientedPoint) -> HitRecord {
        let mut best: Option<(f64, usize)> = None;
        for tri in 0..self.triangles.len() {
            if let Some(hit) = raw_intersect(&op.p, &op.v, self.corners(tri)) {
                if best.map_or(true, |(t, _)| hit.t < t) {
                    best = Some((hit.t, tri));
                }
            }
        }
        self.record(best, op)
    }

    /// First hit, accelerated by the BVH. Bit-identical to
    /// [`raycast_brute_force`](Self::raycast_brute_force).
    pub fn raycast(&self, op: &OrientedPoint) -> HitRecord {
        let best = self
            .bvh
            .closest_hit(op, |tri| raw_intersect(&op.p, &op.v, self.corners(tri)).map(|h| h.t));
        self.record(best, op)
    }

    fn record(&self, best: Option<(f64, usize)>, op: &OrientedPoint) -> HitRecord {
        match best {
            Some((t, tri)) => HitRecord::hit(t.max(0.0), self.normals[tri], &op.v, Some(tri)),
            None => HitRecord::miss(),
        }
    }

    /// Area-weighted uniform surface samples as `(point, face normal)`.
    pub fn surface_sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<(Vec3, Vec3)>> {
        let sampler = AreaSampler::new(self)?;
        Ok((0..count).map(|_| sampler.sample(self, rng)).collect())
    }

    /// Icosahedron subdivided `levels` times and projected onto a sphere.
    pub fn icosphere(radius: f64, levels: usize) -> Self {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Vec3> = [
            (-1.0, phi, 0.0),
            (1.0, phi, 0.0),
            (-1.0, -phi, 0.0),
            (1.0, -phi, 0.0),
            (0.0, -1.0, phi),
            (0.0, 1.0, phi),
            (0.0, -1.0, -phi),
            (0.0, 1.0, -phi),
            (phi, 0.0, -1.0),
            (phi, 0.0, 1.0),
            (-phi, 0.0, -1.0),
            (-phi, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..levels {
            let mut midpoints = std::collections::HashMap::new();
            let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3>| {
                *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    vertices.push(((vertices[a] + vertices[b]) * 0.5).normalize());
                    vertices.len() - 1
                })
            };
            faces = faces
                .iter()
                .flat_map(|&[a, b, c]| {
                    let ab = midpoint(a, b, &mut vertices);
                    let bc = midpoint(b, c, &mut vertices);
                    let ca = midpoint(c, a, &mut vertices);
                    [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
                })
                .collect();
        }
        let vertices = vertices.into_iter().map(|v| v * radius).collect();
        Self::new(vertices, faces).expect("icosphere indices are valid")
    }
}

/// Cumulative-area table for area-weighted triangle picking.
pub(crate) struct AreaSampler {
    cumulative: Vec<f64>,
}

impl AreaSampler {
    pub(crate) fn new(mesh: &TriangleMesh) -> Result<Self> {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = mesh
            .areas
            .iter()
            .map(|a| {
                acc += a;
                acc
            })
            .collect();
        if acc <= 0.0 {
            return Err(Error::EmptySurface);
        }
        Ok(Self { cumulative })
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, mesh: &TriangleMesh, rng: &mut R) -> (Vec3, Vec3) {
        let total = *self.cumulative.last().unwrap();
        let x = rng.gen::<f64>() * total;
        let tri = self
            .cumulative
            .partition_point(|&c| c <= x)
            .min(self.cumulative.len() - 1);
        let [a, b, c] = mesh.corners(tri);
        let r1 = rng.gen::<f64>().sqrt();
        let r2 = rng.gen::<f64>();
        let q = a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2);
        (q, mesh.normals[tri])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_unit, AnalyticShape, BoundingBox};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_tri() -> [Vec3; 3] {
        [Vec3::zeros(), Vec3::x(), Vec3::y()]
    }

    #[test]
    fn triangle_hit_from_above() {
        let [a, b, c] = unit_tri();
        let hit = ray_triangle_intersect(&Vec3::new(0.25, 0.25, 1.0), &-Vec3::z(), [&a, &b, &c]).unwrap();
        assert_eq!(hit.t, 1.0);
    }

    #[test]
    fn triangle_miss_outside() {
        let [a, b, c] = unit_tri();
        assert!(ray_triangle_intersect(&Vec3::new(2.0, 2.0, 1.0), &-Vec3::z(), [&a, &b, &c]).is_none());
    }

    #[test]
    fn triangle_parallel_ray_misses() {
        let [a, b, c] = unit_tri();
        assert!(ray_triangle_intersect(&Vec3::new(0.0, 0.0, 1.0), &Vec3::x(), [&a, &b, &c]).is_none());
    }

    #[test]
    fn degenerate_triangle_misses() {
        let (a, b, c) = (Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0);
        assert!(ray_triangle_intersect(&Vec3::new(0.5, 0.0, 1.0), &-Vec3::z(), [&a, &b, &c]).is_none());
    }

    #[test]
    fn icosphere_matches_sphere() {
        let mesh = TriangleMesh::icosphere(1.0, 3);
        let hit = mesh.raycast(&OrientedPoint::new(Vec3::new(0., 0., 2.), -Vec3::z()));
        assert!(hit.visible && (hit.depth - 1.0).abs() < 5e-3);
        assert!(hit.normal.dot(&-Vec3::z()) < 0.0);
        assert!(
            !mesh
                .raycast(&OrientedPoint::new(Vec3::new(0., 0., 2.), Vec3::z()))
                .visible
        );
        let hit = mesh.raycast(&OrientedPoint::new(Vec3::zeros(), Vec3::x()));
        assert!(hit.visible && (hit.depth - 1.0).abs() < 5e-3);
        assert!(hit.normal.x < 0.0);
    }

    #[test]
    fn empty_mesh_never_visible() {
        let mesh = TriangleMesh::new(vec![], vec![]).unwrap();
        assert!(!mesh.raycast(&OrientedPoint::new(Vec3::zeros(), Vec3::x())).visible);
        assert!(matches!(
            mesh.surface_sample(3, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::EmptySurface)
        ));
    }

    #[test]
    fn bvh_matches_brute_force_bitwise() {
        let mesh = TriangleMesh::icosphere(0.8, 3);
        let bbox = BoundingBox::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let op = OrientedPoint::new(bbox.sample_interior(&mut rng), random_unit(&mut rng));
            let a = mesh.raycast(&op);
            let b = mesh.raycast_brute_force(&op);
            assert_eq!(a.visible, b.visible);
            assert_eq!(a.depth.to_bits(), b.depth.to_bits());
            assert_eq!(a.triangle, b.triangle);
        }
    }

    #[test]
    fn normalization_fits_longest_side() {
        let mesh = TriangleMesh::new(
            vec![
                Vec3::new(1.0, 1.0, 1.0),
                Vec3::new(5.0, 1.0, 1.0),
                Vec3::new(1.0, 3.0, 2.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
        .normalized()
        .unwrap();
        let (lo, hi) = mesh.bounds().unwrap();
        assert!(((hi - lo).max() - 2.0).abs() < 1e-12);
        assert!(((lo + hi) * 0.5).norm() < 1e-12);
    }

    #[test]
    fn surface_samples_on_plane_of_triangle() {
        let mesh = TriangleMesh::new(
            vec![
                Vec3::new(0.1, 0.2, 0.3),
                Vec3::new(0.9, -0.3, 0.5),
                Vec3::new(-0.2, 0.7, -0.4),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let n = mesh.normals()[0];
        let offset = n.dot(&mesh.vertices()[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (q, qn) in mesh.surface_sample(1000, &mut rng).unwrap() {
            assert!((n.dot(&q) - offset).abs() < 1e-9);
            assert_eq!(qn, n);
        }
    }

    #[test]
    fn surface_sampling_unit_square_mean() {
        let mesh = TriangleMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::new(1.0, 1.0, 0.0), Vec3::y()],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = mesh.surface_sample(100_000, &mut rng).unwrap();
        let mean = samples.iter().map(|(q, _)| q).sum::<Vec3>() / samples.len() as f64;
        assert!((mean - Vec3::new(0.5, 0.5, 0.0)).norm() < 0.01, "{mean:?}");
    }

    #[test]
    fn surface_sampling_is_area_weighted() {
        // areas 1 and 3
        let mesh = TriangleMesh::new(
            vec![
                Vec3::zeros(),
                Vec3::new(2.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(5.0, 0.0, 0.0),
                Vec3::new(8.0, 0.0, 0.0),
                Vec3::new(5.0, 2.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        assert_eq!(mesh.areas(), &[1.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = mesh.surface_sample(100_000, &mut rng).unwrap();
        let large = samples.iter().filter(|(q, _)| q.x >= 5.0).count() as f64 / 1e5;
        assert!((large - 0.75).abs() < 0.01, "{large}");
    }

    #[test]
    fn icosphere_agrees_with_closed_form_sphere() {
        let mesh = TriangleMesh::icosphere(1.0, 4);
        let sphere = AnalyticShape::sphere(1.0);
        let bbox = BoundingBox::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 300 {
            let op = OrientedPoint::new(bbox.sample_interior(&mut rng), random_unit(&mut rng));
            let exact = sphere.cast(&op);
            if !exact.visible || exact.normal.dot(&op.v).abs() < 0.2 || (op.p.norm() - 1.0).abs() < 0.01 {
                continue;
            }
            let hit = mesh.raycast(&op);
            assert!(hit.visible);
            assert!((hit.depth - exact.depth).abs() < 5e-3);
            checked += 1;
        }
    }
}
