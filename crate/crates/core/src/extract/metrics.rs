//! Chamfer distance and F-score between point sets.
//!
//! Both the brute-force and the grid-indexed paths compute every squared
//! distance with the same expression and sum in point order, so they agree
//! bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Default F-score threshold on squared distance.
pub const DEFAULT_TAU: f64 = 1e-4;

/// `D_C` (x1000) and F-scores (x100) at `tau` and `2 tau`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChamferScores {
    pub chamfer: f64,
    pub f_tau: f64,
    pub f_2tau: f64,
}

#[inline]
fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    dx * dx + dy * dy + dz * dz
}

/// Squared distance from each query to its nearest target, by exhaustive
/// search.
pub fn nearest_brute(queries: &[Vec3], targets: &[Vec3]) -> Vec<f64> {
    queries
        .iter()
        .map(|q| targets.iter().map(|t| dist2(q, t)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Uniform grid over the target points.
pub struct GridIndex<'a> {
    points: &'a [Vec3],
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// Start offset of each cell in `order`; length `cells + 1`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let extent = (max - min).max().max(1e-12);
        // about two points per occupied cell for surface-like sets
        let per_axis = ((points.len() as f64 / 2.0).sqrt().ceil() as usize).clamp(1, 256);
        let cell = extent / per_axis as f64;
        let dims = [0, 1, 2].map(|k| (((max[k] - min[k]) / cell).floor() as usize + 1).min(per_axis + 1));
        let mut index = Self {
            points,
            origin: min,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; cells + 1];
        let keys: Vec<usize> = points.iter().map(|p| index.flat(index.cell_of(p))).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        index.starts = counts;
        index.order = order;
        index
    }

    fn cell_of(&self, p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|k| {
            let c = ((p[k] - self.origin[k]) / self.cell).floor();
            (c as i64).clamp(0, self.dims[k] as i64 - 1)
        })
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        (c[0] as usize * self.dims[1] + c[1] as usize) * self.dims[2] + c[2] as usize
    }

    /// Squared distance to the nearest indexed point.
    pub fn nearest(&self, q: &Vec3) -> f64 {
        let center = self.cell_of(q);
        let mut best = f64::INFINITY;
        let max_ring = *self.dims.iter().max().expect("three axes") as i64;
        for ring in 0..=max_ring {
            self.visit_ring(center, ring, |i| {
                let d = dist2(q, &self.points[i]);
                if d < best {
                    best = d;
                }
            });
            // every unvisited point lies at least `reach` away from q
            let reach = (0..3)
                .map(|k| {
                    let lo = self.origin[k] + (center[k] - ring) as f64 * self.cell;
                    let hi = self.origin[k] + (center[k] + ring + 1) as f64 * self.cell;
                    let below = if center[k] - ring > 0 { q[k] - lo } else { f64::INFINITY };
                    let above = if center[k] + ring + 1 < self.dims[k] as i64 {
                        hi - q[k]
                    } else {
                        f64::INFINITY
                    };
                    below.min(above)
                })
                .fold(f64::INFINITY, f64::min);
            if reach.is_infinite() || (reach > 0.0 && reach * reach >= best) {
                break;
            }
        }
        best
    }

    fn visit_ring(&self, center: [i64; 3], ring: i64, mut f: impl FnMut(usize)) {
        let range = |k: usize| (center[k] - ring).max(0)..=(center[k] + ring).min(self.dims[k] as i64 - 1);
        for x in range(0) {
            for y in range(1) {
                for z in range(2) {
                    let on_shell =
                        (x - center[0]).abs() == ring || (y - center[1]).abs() == ring || (z - center[2]).abs() == ring;
                    if !on_shell {
                        continue;
                    }
                    let c = self.flat([x, y, z]);
                    for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
                        f(i);
                    }
                }
            }
        }
    }
}

/// Squared nearest-neighbour distances through a [`GridIndex`].
pub fn nearest_indexed(queries: &[Vec3], targets: &[Vec3]) -> Vec<f64> {
    let index = GridIndex::new(targets);
    queries.iter().map(|q| index.nearest(q)).collect()
}

fn scores(a_to_b: &[f64], b_to_a: &[f64], tau: f64) -> ChamferScores {
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let f = |t: f64| {
        let precision = a_to_b.iter().filter(|&&d| d <= t).count() as f64 / a_to_b.len() as f64;
        let recall = b_to_a.iter().filter(|&&d| d <= t).count() as f64 / b_to_a.len() as f64;
        if precision + recall > 0.0 {
            100.0 * 2.0 * (precision * recall) / (precision + recall)
        } else {
            0.0
        }
    };
    ChamferScores {
        chamfer: 1000.0 * (mean(a_to_b) + mean(b_to_a)),
        f_tau: f(tau),
        f_2tau: f(2.0 * tau),
    }
}

fn check(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs two non-empty point sets"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau must be positive"));
    }
    Ok(())
}

/// Chamfer distance and F-scores of prediction `a` against reference `b`;
/// thresholds apply to squared distance and are inclusive.
pub fn chamfer_f_score(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<ChamferScores> {
    check(a, b, tau)?;
    Ok(scores(&nearest_indexed(a, b), &nearest_indexed(b, a), tau))
}

/// Exhaustive-search reference for [`chamfer_f_score`].
pub fn chamfer_f_score_brute(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<ChamferScores> {
    check(a, b, tau)?;
    Ok(scores(&nearest_brute(a, b), &nearest_brute(b, a), tau))
}
