//! Scenes built from independently defined fields under similarity
//! transforms, combined by soft visibility and depth.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{Bounded, DirectedField, FieldSample};
use crate::field::load_checkpoint;
use crate::geometry::{AnalyticShape, OrientedPoint, Vec3};

/// World-to-object map `p' = R^T (p - t) / s`, `v' = R^T v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let t = Self {
            scale,
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    /// Rotation from a quaternion `(w, x, y, z)`, normalized first.
    pub fn from_quaternion(scale: f64, wxyz: [f64; 4], translation: Vec3) -> Result<Self> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        if !(q.norm() > 1e-12) || !q.norm().is_finite() {
            return Err(Error::invalid("rotation quaternion must be non-zero and finite"));
        }
        let rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        Self::new(scale, rotation, translation)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid("transform scale must be positive"));
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("transform translation must be finite"));
        }
        let r = &self.rotation;
        if (r.transpose() * r - Matrix3::identity()).amax() > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "transform rotation must be orthonormal with determinant +1",
            ));
        }
        Ok(())
    }

    pub fn transform_oriented_point(&self, op: &OrientedPoint) -> OrientedPoint {
        let rt = self.rotation.transpose();
        OrientedPoint {
            p: rt * (op.p - self.translation) / self.scale,
            v: rt * op.v,
        }
    }

    pub fn depth_to_world(&self, depth: f64) -> f64 {
        self.scale * depth
    }
}

/// Softmax temperature and inverse-depth floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposeParams {
    pub eta_t: f64,
    pub eps_s: f64,
}

impl Default for ComposeParams {
    fn default() -> Self {
        Self {
            eta_t: 0.1,
            eps_s: 0.01,
        }
    }
}

impl ComposeParams {
    pub fn validate(&self) -> Result<()> {
        if self.eta_t > 0.0 && self.eps_s > 0.0 && self.eta_t.is_finite() && self.eps_s.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid("eta_t and eps_s must be positive"))
        }
    }
}

/// Combines per-part world-space samples: visibility is the probability
/// that any part is visible, depth a softmax-weighted average favouring
/// visible, near parts. Returns the sample and the weights.
pub fn combine(samples: &[FieldSample], params: &ComposeParams) -> (FieldSample, Vec<f64>) {
    let logits: Vec<f64> = samples
        .iter()
        .map(|s| s.xi / (params.eta_t * (params.eps_s + s.depth)))
        .collect();
    let weights = softmax(&logits);
    let xi = 1.0 - samples.iter().map(|s| 1.0 - s.xi).product::<f64>();
    let depth = samples.iter().zip(&weights).map(|(s, w)| w * s.depth).sum();
    (FieldSample { xi, depth }, weights)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// One placed part; queries outside the part's domain use its outside-box
/// rule.
pub struct ScenePart {
    pub transform: SimilarityTransform,
    pub field: Bounded<Box<dyn DirectedField>>,
}

impl ScenePart {
    pub fn new(transform: SimilarityTransform, field: Box<dyn DirectedField>) -> Self {
        Self {
            transform,
            field: Bounded::new(field),
        }
    }
}

pub struct Scene {
    pub parts: Vec<ScenePart>,
    pub params: ComposeParams,
}

impl Scene {
    pub fn new(parts: Vec<ScenePart>, params: ComposeParams) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::invalid("a scene needs at least one part"));
        }
        params.validate()?;
        Ok(Self { parts, params })
    }

    /// Per-part world-space samples, `[part][query]`.
    pub fn part_samples(&self, ops: &[OrientedPoint]) -> Result<Vec<Vec<FieldSample>>> {
        self.parts
            .iter()
            .map(|part| {
                let local: Vec<OrientedPoint> = ops
                    .iter()
                    .map(|op| part.transform.transform_oriented_point(op))
                    .collect();
                Ok(part
                    .field
                    .query_batch(&local)?
                    .into_iter()
                    .map(|s| FieldSample {
                        xi: s.xi,
                        depth: part.transform.depth_to_world(s.depth),
                    })
                    .collect())
            })
            .collect()
    }
}

impl DirectedField for Scene {
    fn query_batch(&self, ops: &[OrientedPoint]) -> Result<Vec<FieldSample>> {
        let per_part = self.part_samples(ops)?;
        let mut column = Vec::with_capacity(self.parts.len());
        Ok((0..ops.len())
            .map(|q| {
                column.clear();
                column.extend(per_part.iter().map(|s| s[q]));
                combine(&column, &self.params).0
            })
            .collect())
    }
}

/// Evaluates a composed scene at one world-space oriented point.
pub fn compose_eval(parts: &[ScenePart], params: &ComposeParams, op: &OrientedPoint) -> Result<FieldSample> {
    if parts.is_empty() {
        return Err(Error::invalid("a scene needs at least one part"));
    }
    params.validate()?;
    let samples = parts
        .iter()
        .map(|part| {
            let s = part.field.query(&part.transform.transform_oriented_point(op))?;
            Ok(FieldSample {
                xi: s.xi,
                depth: part.transform.depth_to_world(s.depth),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(&samples, params).0)
}

/// Where a part's field comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartSource {
    /// Path to a field checkpoint, relative to the scene file.
    Checkpoint(PathBuf),
    Analytic(AnalyticShape),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub source: PartSource,
    #[serde(default = "one")]
    pub scale: f64,
    /// Quaternion `(w, x, y, z)`.
    #[serde(default = "identity_quaternion")]
    pub rotation: [f64; 4],
    #[serde(default)]
    pub translation: [f64; 3],
}

fn one() -> f64 {
    1.0
}

fn identity_quaternion() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

/// Scene file contents: a JSON list of parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SceneSpec {
    pub parts: Vec<PartSpec>,
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("scene", e.to_string()))
    }

    /// Loads every part; checkpoint paths resolve against `base`.
    pub fn build(&self, base: &Path, params: ComposeParams) -> Result<Scene> {
        let parts = self
            .parts
            .iter()
            .map(|spec| {
                let transform =
                    SimilarityTransform::from_quaternion(spec.scale, spec.rotation, Vec3::from(spec.translation))?;
                let field: Box<dyn DirectedField> = match &spec.source {
                    PartSource::Checkpoint(path) => Box::new(load_checkpoint(base.join(path))?.0),
                    PartSource::Analytic(shape) => {
                        if let AnalyticShape::Sphere { radius, .. } = shape {
                            if *radius <= 0.0 {
                                return Err(Error::invalid("sphere radius must be positive"));
                            }
                        }
                        Box::new(*shape)
                    }
                };
                Ok(ScenePart::new(transform, field))
            })
            .collect::<Result<Vec<_>>>()?;
        Scene::new(parts, params)
    }
}

pub fn load_scene(path: impl AsRef<Path>, params: ComposeParams) -> Result<Scene> {
    let path = path.as_ref();
    let spec = SceneSpec::from_json(&std::fs::read_to_string(path)?)?;
    spec.build(path.parent().unwrap_or(Path::new(".")), params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(xi: f64, depth: f64) -> FieldSample {
        FieldSample { xi, depth }
    }

    #[test]
    fn hand_computed_softmax() {
        let (out, w) = combine(&[sample(1.0, 1.0), sample(1.0, 2.0)], &ComposeParams::default());
        let l1: f64 = 1.0 / (0.1 * 1.01);
        let l2 = 1.0 / (0.1 * 2.01);
        let a1 = 1.0 / (1.0 + (l2 - l1).exp());
        assert!((w[0] - a1).abs() < 1e-15);
        assert!((out.depth - (a1 + 2.0 * (1.0 - a1))).abs() < 1e-12);
        assert!((out.depth - 1.0072).abs() < 1e-4, "{}", out.depth);
        assert_eq!(out.xi, 1.0);
    }

    #[test]
    fn invisible_part_loses_the_softmax() {
        let (out, w) = combine(&[sample(1.0, 1.5), sample(0.0, 0.3)], &ComposeParams::default());
        assert_eq!(out.xi, 1.0);
        assert!(w[0] > 0.998 && (out.depth - 1.5).abs() < 2e-3);
        let (none, _) = combine(&[sample(0.0, 0.0), sample(0.0, 0.0)], &ComposeParams::default());
        assert_eq!(none.xi, 0.0);
    }

    #[test]
    fn equal_parts_keep_their_depth() {
        let (out, _) = combine(&[sample(0.7, 0.83), sample(0.7, 0.83)], &ComposeParams::default());
        assert_eq!(out.depth, 0.83);
    }

    #[test]
    fn transforms_map_points_and_depths() {
        let op = OrientedPoint::new(Vec3::new(0.3, -0.2, 0.5), Vec3::new(0.0, 0.6, 0.8));
        let id = SimilarityTransform::default();
        assert_eq!(id.transform_oriented_point(&op), op);
        let shift = SimilarityTransform::new(1.0, Matrix3::identity(), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let moved = shift.transform_oriented_point(&op);
        assert_eq!(moved.p, op.p - Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(moved.v, op.v);
    }

    #[test]
    fn scaled_part_reports_world_depth() {
        let part = ScenePart::new(
            SimilarityTransform::from_quaternion(2.0, [1.0, 0.0, 0.0, 0.0], Vec3::zeros()).unwrap(),
            Box::new(AnalyticShape::sphere(0.5)),
        );
        let op = OrientedPoint::new(Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.0, 0.0, -1.0));
        let s = compose_eval(&[part], &ComposeParams::default(), &op).unwrap();
        let reference = AnalyticShape::sphere(1.0).cast(&op);
        assert!((s.depth - 1.0).abs() < 1e-12 && (s.depth - reference.depth).abs() < 1e-12);
        assert_eq!(s.xi, 1.0);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(compose_eval(&[], &ComposeParams::default(), &OrientedPoint::default()).is_err());
        assert!(SimilarityTransform::from_quaternion(0.0, [1.0, 0.0, 0.0, 0.0], Vec3::zeros()).is_err());
        assert!(SimilarityTransform::new(1.0, Matrix3::identity() * 2.0, Vec3::zeros()).is_err());
        assert!(ComposeParams {
            eta_t: 0.0,
            eps_s: 0.01
        }
        .validate()
        .is_err());
    }

    #[test]
    fn scene_file_parses() {
        let text = r#"[
            {"source": {"analytic": {"shape": "sphere", "center": [0, 0, 0], "radius": 0.4}},
             "translation": [0.5, 0, 0]},
            {"source": {"analytic": {"shape": "sphere", "center": [0, 0, 0], "radius": 0.4}},
             "scale": 1.0, "rotation": [0, 0, 0, 1], "translation": [-0.5, 0, 0]}
        ]"#;
        let spec = SceneSpec::from_json(text).unwrap();
        let scene = spec.build(Path::new("."), ComposeParams::default()).unwrap();
        assert_eq!(scene.parts.len(), 2);
        let hit = scene
            .query(&OrientedPoint::new(Vec3::new(0.5, 0.0, 2.0), Vec3::new(0.0, 0.0, -1.0)))
            .unwrap();
        assert!(hit.xi == 1.0 && (hit.depth - 1.6).abs() < 5e-3, "{hit:?}");
        assert!(SceneSpec::from_json(r#"[{"source": {"analytic": {"shape": "sphere"}}}]"#).is_err());
    }
}
