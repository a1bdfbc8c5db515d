//! Surface point clouds by projecting random positions along a
//! visibility-weighted direction.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vstar::weighted_direction;
use crate::compose::ComposeParams;
use crate::error::{Error, Result};
use crate::evaluator::DirectedField;
use crate::geometry::{random_unit, BoundingBox, OrientedPoint, Vec3};

/// Points processed per batch of field queries.
const POINT_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointCloudConfig {
    pub n_p: usize,
    /// Random directions per projection step.
    pub n_v: usize,
    /// Projection steps, each starting from the previous surface point.
    pub n_h: usize,
    /// Oversampling fraction; the least visible extras are dropped.
    pub eps_p: f64,
    pub compose: ComposeParams,
    pub seed: u64,
}

impl Default for PointCloudConfig {
    fn default() -> Self {
        Self {
            n_p: 2048,
            n_v: 128,
            n_h: 3,
            eps_p: 0.1,
            compose: ComposeParams::default(),
            seed: 0,
        }
    }
}

impl PointCloudConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 || self.n_v == 0 || self.n_h == 0 {
            return Err(Error::invalid("n_p, n_v and n_h must be positive"));
        }
        if !(self.eps_p >= 0.0 && self.eps_p.is_finite()) {
            return Err(Error::invalid("eps_p must be non-negative"));
        }
        self.compose.validate()
    }

    /// Positions drawn before keeping the `n_p` most visible.
    pub fn oversampled(&self) -> usize {
        ((1.0 + self.eps_p) * self.n_p as f64).ceil() as usize
    }
}

/// Fixed-size random direction sets; sets whose weighted average cancels
/// are redrawn.
fn project<F: DirectedField + ?Sized>(
    field: &F,
    config: &PointCloudConfig,
    start: &[Vec3],
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<(Vec3, f64)>> {
    let mut current: Vec<Vec3> = start.to_vec();
    let mut xi = vec![0.0; start.len()];
    for _ in 0..config.n_h {
        let mut pending: Vec<usize> = (0..current.len()).collect();
        let mut directions = vec![Vec3::zeros(); current.len()];
        while !pending.is_empty() {
            let dirs: Vec<Vec<Vec3>> = pending
                .iter()
                .map(|&i| (0..config.n_v).map(|_| random_unit(&mut rngs[i])).collect())
                .collect();
            let ops: Vec<OrientedPoint> = pending
                .iter()
                .zip(&dirs)
                .flat_map(|(&i, ds)| ds.iter().map(move |v| (i, *v)))
                .map(|(i, v)| OrientedPoint { p: current[i], v })
                .collect();
            let samples = field.query_batch(&ops)?;
            let mut retry = Vec::new();
            for (slot, &i) in pending.iter().enumerate() {
                let s = &samples[slot * config.n_v..(slot + 1) * config.n_v];
                match weighted_direction(&dirs[slot], s, &config.compose) {
                    Some((_, v)) => directions[i] = v,
                    None => retry.push(i),
                }
            }
            pending = retry;
        }
        let ops: Vec<OrientedPoint> = current
            .iter()
            .zip(&directions)
            .map(|(p, v)| OrientedPoint { p: *p, v: *v })
            .collect();
        let hits = field.query_batch(&ops)?;
        for (i, hit) in hits.iter().enumerate() {
            current[i] += directions[i] * hit.depth;
            xi[i] = hit.xi;
        }
    }
    Ok(current.into_iter().zip(xi).collect())
}

/// Exactly `n_p` surface points, the most visible of the oversampled set.
/// Every position has its own random stream, so results do not depend on
/// the thread count.
pub fn sample_point_cloud<F: DirectedField + ?Sized>(field: &F, config: &PointCloudConfig) -> Result<Vec<Vec3>> {
    config.validate()?;
    let m = config.oversampled();
    let domain = BoundingBox::default();
    let mut rngs: Vec<ChaCha8Rng> = (0..m)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            rng
        })
        .collect();
    let start: Vec<Vec3> = rngs.iter_mut().map(|rng| domain.sample_interior(rng)).collect();
    let projected: Vec<(Vec3, f64)> = start
        .par_chunks(POINT_CHUNK)
        .zip(rngs.par_chunks_mut(POINT_CHUNK))
        .map(|(points, rngs)| project(field, config, points, rngs))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    // stable, so ties keep sampling order
    order.sort_by(|&a, &b| projected[b].1.total_cmp(&projected[a].1));
    Ok(order[..config.n_p].iter().map(|&i| projected[i].0).collect())
}

/// One `x y z` line per point, shortest round-trip formatting.
pub fn write_xyz(points: &[Vec3], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in points {
        writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    let input = BufReader::new(File::open(path)?);
    let mut points = Vec::new();
    for (line_no, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("xyz", format!("line {}: {e}", line_no + 1)))?;
        if values.len() != 3 {
            return Err(Error::format(
                "xyz",
                format!("line {}: expected 3 values, found {}", line_no + 1, values.len()),
            ));
        }
        points.push(Vec3::new(values[0], values[1], values[2]));
    }
    Ok(points)
}
