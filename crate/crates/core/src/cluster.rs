//! k-means++ seeding and Lloyd iterations.

use crate::error::{Error, Result};
use crate::math::sq_dist;
use crate::rng::StreamRng;
use crate::types::FeatureMatrix;

pub const LLOYD_MAX_ITER: usize = 100;
pub const LLOYD_TOL: f64 = 1e-6;

/// Picks `k` seed rows by D^2 sampling. Returns row indices.
pub fn kmeans_pp_seeds(x: &FeatureMatrix, k: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    let n = x.n_rows();
    if n < k {
        return Err(Error::InsufficientSamples { needed: k, got: n });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut seeds = vec![rng.below(n)];
    let mut d2: Vec<f64> = x.rows().map(|r| sq_dist(r, x.row(seeds[0]))).collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && *w > 0.0 {
                    chosen = Some(i);
                    break;
                }
            }
            // round-off can leave `target` just above the final partial sum
            chosen.unwrap_or_else(|| d2.iter().rposition(|w| *w > 0.0).unwrap_or(0))
        } else {
            rng.below(n)
        };
        seeds.push(pick);
        for (i, r) in x.rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, x.row(pick)));
        }
    }
    Ok(seeds)
}

/// Index of the nearest center by squared Euclidean distance, lowest index on ties.
pub fn nearest(centers: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm from k-means++ seeds. A cluster that loses all its
/// points keeps its previous center.
pub fn kmeans(x: &FeatureMatrix, k: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k-means needs at least one center".into()));
    }
    let seeds = kmeans_pp_seeds(x, k, rng)?;
    let mut centers: Vec<Vec<f64>> = seeds.iter().map(|&i| x.row(i).to_vec()).collect();
    let d = x.dim();
    for _ in 0..LLOYD_MAX_ITER {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for r in x.rows() {
            let (j, _) = nearest(&centers, r);
            counts[j] += 1;
            sums[j].iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        let mut moved = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let c = counts[j] as f64;
            let next: Vec<f64> = sums[j].iter().map(|s| s / c).collect();
            moved = moved.max(sq_dist(&next, &centers[j]).sqrt());
            centers[j] = next;
        }
        if moved < LLOYD_TOL {
            break;
        }
    }
    Ok(centers)
}
