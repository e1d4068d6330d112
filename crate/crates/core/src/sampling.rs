//! Stage-1 target construction: furthest point sampling, noised query
//! initialization, the denoising loss, and the combined pretraining
//! objective.

use nalgebra::Vector3;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index-paired clean targets and noised initial positions.
#[derive(Debug, Clone)]
pub struct DenoiseBatch {
    pub clean_targets: Vec<Vector3<f64>>,
    pub noised_init: Vec<Vector3<f64>>,
    /// Componentwise noise bound, meters.
    pub noise_bound: f64,
}

impl DenoiseBatch {
    /// FPS the points down to `k` targets and perturb each component by
    /// U(-noise_bound, noise_bound).
    pub fn build(
        points: &[Vector3<f64>],
        k: usize,
        noise_bound: f64,
        seed: u64,
    ) -> Result<Self> {
        let clean_targets = fps(points, k)?;
        let noised_init = noise_init(&clean_targets, noise_bound, seed);
        Ok(Self {
            clean_targets,
            noised_init,
            noise_bound,
        })
    }
}

/// Weights of the pretraining objective terms.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub denoise: f64,
    pub depth: f64,
    pub rgb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            denoise: 1.0,
            depth: 1.0,
            rgb: 1.0,
        }
    }
}

/// Greedy max-min furthest point sampling starting from `start`; ties break
/// to the lowest index. Returns the selected indices in selection order.
pub fn fps_indices_from(points: &[Vector3<f64>], k: usize, start: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidSampleCount {
            requested: k,
            available: points.len(),
        });
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_dist2 = vec![f64::INFINITY; points.len()];
    let mut current = start;
    selected.push(current);
    for _ in 1..k {
        let anchor = points[current];
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d2 = (p - anchor).norm_squared();
            if d2 < min_dist2[i] {
                min_dist2[i] = d2;
            }
            if min_dist2[i] > best_d {
                best_d = min_dist2[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
        min_dist2[current] = f64::NEG_INFINITY;
    }
    Ok(selected)
}

/// FPS with the deterministic start (index 0).
pub fn fps_indices(points: &[Vector3<f64>], k: usize) -> Result<Vec<usize>> {
    fps_indices_from(points, k, 0)
}

/// FPS returning the selected points in selection order.
pub fn fps(points: &[Vector3<f64>], k: usize) -> Result<Vec<Vector3<f64>>> {
    Ok(fps_indices(points, k)?
        .into_iter()
        .map(|i| points[i])
        .collect())
}

/// Targets plus per-component uniform noise in [-e, e], seeded.
pub fn noise_init(targets: &[Vector3<f64>], e: f64, seed: u64) -> Vec<Vector3<f64>> {
    assert!(e >= 0.0, "noise bound must be nonnegative");
    if e == 0.0 {
        return targets.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-e, e);
    targets
        .iter()
        .map(|t| {
            Vector3::new(
                t.x + dist.sample(&mut rng),
                t.y + dist.sample(&mut rng),
                t.z + dist.sample(&mut rng),
            )
        })
        .collect()
}

/// `sum_i ||target_i - (init_i + offset_i)||` with index-aligned pairing;
/// returns the loss and its gradient w.r.t. the offsets (zero subgradient at
/// exact coincidence).
pub fn denoise_loss(batch: &DenoiseBatch, offsets: &[Vector3<f64>]) -> (f64, Vec<Vector3<f64>>) {
    assert_eq!(batch.clean_targets.len(), offsets.len());
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(offsets.len());
    for i in 0..offsets.len() {
        let residual = batch.clean_targets[i] - (batch.noised_init[i] + offsets[i]);
        let norm = residual.norm();
        loss += norm;
        grads.push(if norm > 0.0 {
            -residual / norm
        } else {
            Vector3::zeros()
        });
    }
    (loss, grads)
}

/// Weighted pretraining objective; rejects non-finite components.
pub fn pretrain_loss(weights: &LossWeights, denoise: f64, depth: f64, rgb: f64) -> Result<f64> {
    for (value, which) in [(denoise, "denoise"), (depth, "depth"), (rgb, "rgb")] {
        if !value.is_finite() {
            return Err(Error::InvalidLoss { which });
        }
    }
    Ok(weights.denoise * denoise + weights.depth * depth + weights.rgb * rgb)
}
