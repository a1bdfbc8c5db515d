//! Training data: the six oriented-point sample types, labelled by an exact
//! geometric oracle, and the dataset file that stores them.

mod dataset;

pub use dataset::{build_dataset, generate, load_dataset, read_dataset, write_dataset, Dataset, DatasetHeader};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::mesh::AreaSampler;
use crate::geometry::{random_unit, AnalyticShape, BoundingBox, HitRecord, OrientedPoint, TriangleMesh, Vec3};

/// Oriented-point sampling recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleType {
    /// Uniform position and direction.
    U,
    /// Looking back at a surface point from along a random ray.
    A,
    /// On the domain boundary, looking inward.
    B,
    /// On the surface, random direction.
    S,
    /// Like `A` with the ray in the surface's tangent plane.
    T,
    /// Surface point pushed off along its normal, tangent direction.
    O,
}

impl SampleType {
    pub const ALL: [SampleType; 6] = [
        SampleType::U,
        SampleType::A,
        SampleType::B,
        SampleType::S,
        SampleType::T,
        SampleType::O,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for SampleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for SampleType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown sample type {s:?}; expected one of U, A, B, S, T, O")))
    }
}

/// One labelled oriented point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSample {
    pub op: OrientedPoint,
    pub visible: bool,
    /// First-hit distance; zero when not visible.
    pub depth: f64,
    /// Viewer-facing surface normal at the hit, when visible.
    pub normal: Option<Vec3>,
    pub kind: SampleType,
}

impl TrainingSample {
    pub fn labelled(op: OrientedPoint, hit: HitRecord, kind: SampleType) -> Self {
        Self {
            op,
            visible: hit.visible,
            depth: if hit.visible { hit.depth } else { 0.0 },
            normal: hit.visible.then_some(hit.normal),
            kind,
        }
    }
}

/// Per-type sample counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeCounts {
    #[serde(rename = "U")]
    pub u: usize,
    #[serde(rename = "A")]
    pub a: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "O")]
    pub o: usize,
}

impl TypeCounts {
    pub const fn new(u: usize, a: usize, b: usize, s: usize, t: usize, o: usize) -> Self {
        Self { u, a, b, s, t, o }
    }

    pub fn get(&self, kind: SampleType) -> usize {
        match kind {
            SampleType::U => self.u,
            SampleType::A => self.a,
            SampleType::B => self.b,
            SampleType::S => self.s,
            SampleType::T => self.t,
            SampleType::O => self.o,
        }
    }

    pub fn set(&mut self, kind: SampleType, count: usize) {
        match kind {
            SampleType::U => self.u = count,
            SampleType::A => self.a = count,
            SampleType::B => self.b = count,
            SampleType::S => self.s = count,
            SampleType::T => self.t = count,
            SampleType::O => self.o = count,
        }
    }

    pub fn total(&self) -> Option<usize> {
        SampleType::ALL
            .iter()
            .try_fold(0usize, |acc, &k| acc.checked_add(self.get(k)))
    }

    /// Multiplies every count by `factor`, rounding to the nearest integer.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = *self;
        for k in SampleType::ALL {
            out.set(k, (self.get(k) as f64 * factor).round() as usize);
        }
        out
    }
}

/// What to sample and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub counts: TypeCounts,
    /// Fraction of A, T and O positions moved back to the domain boundary.
    pub boundary_bias: f64,
    /// Offset distance for O samples.
    pub offset_epsilon: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            counts: TypeCounts::new(250_000, 250_000, 125_000, 125_000, 125_000, 125_000),
            boundary_bias: 0.10,
            offset_epsilon: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.boundary_bias) {
            return Err(Error::invalid("boundary_bias must lie in [0, 1]"));
        }
        if !(self.offset_epsilon > 0.0 && self.offset_epsilon.is_finite()) {
            return Err(Error::invalid("offset_epsilon must be positive"));
        }
        self.counts
            .total()
            .ok_or_else(|| Error::invalid("sample counts overflow"))?;
        Ok(())
    }
}

/// Exact ground truth for labelling samples.
pub enum Oracle {
    Analytic(AnalyticShape),
    Mesh(MeshOracle),
}

/// A mesh with its area table for surface sampling.
pub struct MeshOracle {
    mesh: TriangleMesh,
    areas: Option<AreaSampler>,
}

impl MeshOracle {
    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }
}

impl Oracle {
    pub fn analytic(shape: AnalyticShape) -> Self {
        Oracle::Analytic(shape)
    }

    pub fn mesh(mesh: TriangleMesh) -> Self {
        let areas = AreaSampler::new(&mesh).ok();
        Oracle::Mesh(MeshOracle { mesh, areas })
    }

    pub fn cast(&self, op: &OrientedPoint) -> HitRecord {
        match self {
            Oracle::Analytic(shape) => shape.cast(op),
            Oracle::Mesh(m) => m.mesh.raycast(op),
        }
    }

    /// Area-uniform surface point with its (unoriented) unit normal.
    pub fn surface_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec3, Vec3)> {
        match self {
            Oracle::Analytic(shape) => shape.surface_sample(rng),
            Oracle::Mesh(m) => match &m.areas {
                Some(sampler) => Ok(sampler.sample(&m.mesh, rng)),
                None => Err(Error::EmptySurface),
            },
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Oracle::Analytic(shape) => shape.describe(),
            Oracle::Mesh(m) => format!(
                "triangle mesh: {} vertices, {} triangles",
                m.mesh.vertices().len(),
                m.mesh.triangles().len()
            ),
        }
    }
}

/// Samples drawn per independent random stream.
const STREAM_CHUNK: usize = 4096;

/// Draws `n` labelled samples of one type.
///
/// Work is split into fixed-size chunks with their own random streams, so
/// the result does not depend on the number of worker threads.
pub fn draw_samples(
    oracle: &Oracle,
    kind: SampleType,
    n: usize,
    spec: &DatasetSpec,
    seed: u64,
) -> Result<Vec<TrainingSample>> {
    spec.validate()?;
    let domain = BoundingBox::default();
    let chunks: Vec<usize> = (0..n.div_ceil(STREAM_CHUNK)).collect();
    let parts = chunks
        .par_iter()
        .map(|&chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64);
            let count = STREAM_CHUNK.min(n - chunk * STREAM_CHUNK);
            (0..count)
                .map(|_| {
                    let op = construct(oracle, kind, spec, &domain, &mut rng)?;
                    Ok(TrainingSample::labelled(op, oracle.cast(&op), kind))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Builds one oriented point by the recipe for `kind`.
fn construct<R: Rng + ?Sized>(
    oracle: &Oracle,
    kind: SampleType,
    spec: &DatasetSpec,
    domain: &BoundingBox,
    rng: &mut R,
) -> Result<OrientedPoint> {
    let op = match kind {
        SampleType::U => OrientedPoint {
            p: domain.sample_interior(rng),
            v: random_unit(rng),
        },
        SampleType::B => {
            let (p, inward) = domain.sample_boundary(rng);
            let v = loop {
                let v = random_unit(rng);
                let c = v.dot(&inward);
                if c != 0.0 {
                    break if c > 0.0 { v } else { -v };
                }
            };
            OrientedPoint { p, v }
        }
        SampleType::S => {
            let (q, _) = oracle.surface_point(rng)?;
            OrientedPoint {
                p: q,
                v: random_unit(rng),
            }
        }
        SampleType::A | SampleType::T => loop {
            let (q0, n0) = oracle.surface_point(rng)?;
            let v0 = if kind == SampleType::T {
                tangent_direction(&n0, rng)
            } else {
                random_unit(rng)
            };
            // q0 may sit on or outside the domain for shapes touching the box
            if let Some(exit) = domain.contains(&q0).then(|| domain.ray_exit(&q0, &v0)).flatten() {
                let s: f64 = rng.gen();
                let p = q0 + (exit - q0) * s;
                break OrientedPoint { p, v: -v0 };
            }
        },
        SampleType::O => loop {
            let (q0, n0) = oracle.surface_point(rng)?;
            let v0 = tangent_direction(&n0, rng);
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let p = q0 + n0 * (sign * spec.offset_epsilon);
            if domain.contains(&p) {
                break OrientedPoint { p, v: -v0 };
            }
        },
    };
    if matches!(kind, SampleType::A | SampleType::T | SampleType::O) && rng.gen::<f64>() < spec.boundary_bias {
        if let Some(p) = domain.ray_exit(&op.p, &(-op.v)) {
            return Ok(OrientedPoint { p, v: op.v });
        }
    }
    Ok(op)
}

/// Uniform unit direction in the plane orthogonal to `n`.
fn tangent_direction<R: Rng + ?Sized>(n: &Vec3, rng: &mut R) -> Vec3 {
    loop {
        let g = random_unit(rng);
        let t = g - n * n.dot(&g);
        if t.norm() > 1e-3 {
            let t = t.normalize();
            return (t - n * n.dot(&t)).normalize();
        }
    }
}
