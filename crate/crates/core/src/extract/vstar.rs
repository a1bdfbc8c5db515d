//! Closest-surface direction field `v*(p)` and the unsigned distance it
//! implies.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compose::{softmax, ComposeParams};
use crate::error::{Error, Result};
use crate::evaluator::{DirectedField, DirectionGradient, DirectionTerms};
use crate::field::siren::{flatten, Blocks, Siren};
use crate::geometry::{BoundingBox, OrientedPoint, Vec3};
use crate::trainer::{adam_step, AdamState};

const MAGIC: &[u8] = b"DDFV1\n";

/// Direction-field queries per `direction_vjp` call, bounding tape memory.
const VJP_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VStarConfig {
    /// Candidate directions per position.
    pub k_c: usize,
    pub hidden_sizes: Vec<usize>,
    pub omega_0: f64,
    /// Weight of the candidate-spreading term.
    pub tau_n: f64,
    /// Weight of the normal-alignment term.
    pub tau_d: f64,
    pub iterations: usize,
    pub lr: f64,
    pub points_per_step: usize,
    pub compose: ComposeParams,
    pub seed: u64,
}

impl Default for VStarConfig {
    fn default() -> Self {
        Self {
            k_c: 5,
            hidden_sizes: vec![128; 5],
            omega_0: 1.0,
            tau_n: 5e-3,
            tau_d: 0.1,
            iterations: 10_000,
            lr: 1e-4,
            points_per_step: 4096,
            compose: ComposeParams::default(),
            seed: 0,
        }
    }
}

impl VStarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_c < 2 {
            return Err(Error::invalid("k_c must be at least 2"));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden_sizes must be non-empty and positive"));
        }
        let positive = [self.omega_0, self.tau_n, self.tau_d, self.lr];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) || self.points_per_step == 0 {
            return Err(Error::invalid(
                "omega_0, tau_n, tau_d, lr and points_per_step must be positive",
            ));
        }
        self.compose.validate()
    }

    fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![3];
        sizes.extend(&self.hidden_sizes);
        sizes.push(3 * self.k_c);
        sizes
    }
}

/// Sinusoidal network mapping a position to `k_c` unit directions.
#[derive(Clone, Debug, PartialEq)]
pub struct VStarModel {
    pub config: VStarConfig,
    pub net: Siren,
}

impl VStarModel {
    pub fn new(config: &VStarConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config: config.clone(),
            net: Siren::init(&config.layer_sizes(), config.omega_0, &mut rng),
        })
    }

    fn raw(&self, points: &[Vec3], record: bool) -> (Array2<f64>, Option<crate::field::siren::Tape>) {
        let input = Array2::from_shape_fn((3, points.len()), |(r, c)| points[c][r]);
        let (out, tape) = self.net.forward(&Blocks::stack(input.view(), &[]), &[], record);
        (out.data, tape)
    }

    /// Unit candidate directions per point.
    pub fn candidates(&self, points: &[Vec3]) -> Vec<Vec<Vec3>> {
        let (raw, _) = self.raw(points, false);
        (0..points.len())
            .map(|c| {
                (0..self.config.k_c)
                    .map(|i| unit_or_axis(raw_vec(&raw, i, c)))
                    .collect()
            })
            .collect()
    }
}

fn raw_vec(raw: &Array2<f64>, i: usize, c: usize) -> Vec3 {
    Vec3::new(raw[[3 * i, c]], raw[[3 * i + 1, c]], raw[[3 * i + 2, c]])
}

fn unit_or_axis(u: Vec3) -> Vec3 {
    let n = u.norm();
    if n > 1e-12 {
        u / n
    } else {
        Vec3::z()
    }
}

/// Per-step mean loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VStarLoss {
    pub depth_minus_visibility: f64,
    pub spread: f64,
    pub alignment: f64,
    pub total: f64,
}

/// Fits candidate directions that see the nearest visible surface.
pub fn fit_vstar<F: DirectionGradient + ?Sized>(
    field: &F,
    config: &VStarConfig,
) -> Result<(VStarModel, Vec<VStarLoss>)> {
    let mut model = VStarModel::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let domain = BoundingBox::default();
    let mut params = model.net.flat_params();
    let mut adam = AdamState::new(params.len());
    let k = config.k_c;
    let n = config.points_per_step;
    let scale = 1.0 / (k * n) as f64;
    let pair_scale = 2.0 * config.tau_n / (k * k - k) as f64 / n as f64;
    let mut history = Vec::with_capacity(config.iterations);
    for iter in 1..=config.iterations {
        let points: Vec<Vec3> = (0..n).map(|_| domain.sample_interior(&mut rng)).collect();
        let (raw, tape) = model.raw(&points, true);
        let tape = tape.expect("tape recorded");
        let dirs: Vec<Vec3> = (0..n)
            .flat_map(|c| (0..k).map(move |i| (i, c)))
            .map(|(i, c)| unit_or_axis(raw_vec(&raw, i, c)))
            .collect();
        let ops: Vec<OrientedPoint> = dirs
            .iter()
            .enumerate()
            .map(|(q, v)| OrientedPoint {
                p: points[q / k],
                v: *v,
            })
            .collect();
        let mut loss = VStarLoss::default();
        let mut grad_v = Vec::with_capacity(ops.len());
        for chunk in ops.chunks(VJP_CHUNK) {
            let mut upstream = |terms: &[DirectionTerms]| -> Vec<[f64; 3]> {
                terms
                    .iter()
                    .map(|t| {
                        loss.depth_minus_visibility += (t.depth - t.xi) * scale;
                        loss.alignment += config.tau_d * (t.alignment + 1.0).powi(2) * scale;
                        [scale, -scale, 2.0 * config.tau_d * (t.alignment + 1.0) * scale]
                    })
                    .collect()
            };
            let (_, g) = field.direction_vjp(chunk, &mut upstream)?;
            grad_v.extend(g);
        }
        let mut seed = Array2::zeros(raw.raw_dim());
        for c in 0..n {
            let cand = &dirs[c * k..(c + 1) * k];
            let sum: Vec3 = cand.iter().sum();
            for i in 0..k {
                let v = cand[i];
                let others = sum - v;
                loss.spread += pair_scale * v.dot(&others);
                let g = grad_v[c * k + i] + others * (2.0 * pair_scale);
                let u = raw_vec(&raw, i, c);
                let norm = u.norm().max(1e-12);
                let gu = (g - v * v.dot(&g)) / norm;
                for r in 0..3 {
                    seed[[3 * i + r, c]] = gu[r];
                }
            }
        }
        loss.total = loss.depth_minus_visibility + loss.spread + loss.alignment;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: iter,
                detail: format!("v* loss terms {loss:?}"),
            });
        }
        let (grads, _) = model.net.backward(&tape, &seed, false);
        adam_step(&mut params, &flatten(&grads), &mut adam, config.lr, (0.9, 0.999), 1e-8).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite {
                iteration: iter,
                detail,
            },
            other => other,
        })?;
        model.net.set_flat_params(&params);
        history.push(loss);
    }
    Ok((model, history))
}

/// Unsigned distance estimate at one position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdfEstimate {
    pub udf: f64,
    pub v_star: Vec3,
    /// False when no candidate is visible (`xi < 0.5` for all).
    pub confident: bool,
}

/// Softmax-weighted depth and direction over `(direction, sample)` pairs.
/// Returns `None` when the weighted direction cancels out.
pub fn weighted_direction(
    dirs: &[Vec3],
    samples: &[crate::evaluator::FieldSample],
    params: &ComposeParams,
) -> Option<(f64, Vec3)> {
    let logits: Vec<f64> = samples
        .iter()
        .map(|s| s.xi / (params.eta_t * (params.eps_s + s.depth)))
        .collect();
    let w = softmax(&logits);
    let depth = samples.iter().zip(&w).map(|(s, w)| w * s.depth).sum();
    let v: Vec3 = dirs.iter().zip(&w).map(|(d, w)| d * *w).sum();
    let norm = v.norm();
    (norm > 1e-12).then(|| (depth, v / norm))
}

/// UDF and `v*` at each point from the fitted candidates.
pub fn udf_query<F: DirectedField + ?Sized>(
    field: &F,
    vstar: &VStarModel,
    points: &[Vec3],
) -> Result<Vec<UdfEstimate>> {
    let k = vstar.config.k_c;
    let candidates = vstar.candidates(points);
    let ops: Vec<OrientedPoint> = points
        .iter()
        .zip(&candidates)
        .flat_map(|(p, cand)| cand.iter().map(move |v| OrientedPoint { p: *p, v: *v }))
        .collect();
    let samples = field.query_batch(&ops)?;
    Ok(candidates
        .iter()
        .enumerate()
        .map(|(c, cand)| {
            let s = &samples[c * k..(c + 1) * k];
            let confident = s.iter().any(|s| s.xi >= 0.5);
            match weighted_direction(cand, s, &vstar.config.compose) {
                Some((udf, v_star)) => UdfEstimate { udf, v_star, confident },
                None => UdfEstimate {
                    udf: s.iter().map(|s| s.depth).sum::<f64>() / k as f64,
                    v_star: cand[0],
                    confident: false,
                },
            }
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct VStarHeader {
    config: VStarConfig,
    params: usize,
}

/// `DDFV1\n`, a JSON header line, then little-endian f64 parameters.
pub fn save_vstar(model: &VStarModel, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    let params = model.net.flat_params();
    serde_json::to_writer(
        &mut out,
        &VStarHeader {
            config: model.config.clone(),
            params: params.len(),
        },
    )?;
    out.write_all(b"\n")?;
    for x in params {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_vstar(path: impl AsRef<Path>) -> Result<VStarModel> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::format("v* model", "file too short for magic"))?;
    if magic != MAGIC {
        return Err(Error::format("v* model", "bad magic, expected DDFV1"));
    }
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line)?;
    let header: VStarHeader = serde_json::from_slice(&line)?;
    let mut model = VStarModel::new(&header.config)?;
    if model.net.param_count() != header.params {
        return Err(Error::format(
            "v* model",
            "parameter count disagrees with the configuration",
        ));
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != header.params * 8 {
        return Err(Error::format("v* model", "truncated parameters"));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    model.net.set_flat_params(&params);
    Ok(model)
}
