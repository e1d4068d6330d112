//! Unconstrained (raw) parameterizations of Gaussians and queries.
//!
//! Gradient descent runs on raw values: positions and offsets as-is,
//! rotations as unnormalized 4-vectors (normalized on use), scales as
//! log-scales (exp on use), opacities as logits (sigmoid on use), and class
//! distributions as logits (softmax on use). Constrained values are produced
//! on decode; no projection is needed inside a gradient step.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::quat;
use crate::types::{QueryChild, SceneQuery, SemanticGaussian};

/// Opacities are kept in `[OPACITY_EPS, 1 - OPACITY_EPS]` in optimizable form.
pub const OPACITY_EPS: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (p / (1.0 - p)).ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Gradient of a scalar w.r.t. softmax logits given the softmax output `p`
/// and the gradient `g` w.r.t. the probabilities.
pub fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(pi, gi)| pi * gi).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// Distribution -> logits, up to an additive constant.
pub fn distribution_to_logits(p: &[f64]) -> Vec<f64> {
    p.iter().map(|&x| x.max(1e-12).ln()).collect()
}

/// Raw form of a single free-standing Gaussian.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawGaussian {
    pub position: [f64; 3],
    /// Unnormalized quaternion, scalar first.
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub class_logits: Vec<f64>,
    pub velocity: [f64; 3],
}

impl RawGaussian {
    pub fn decode(&self) -> SemanticGaussian {
        SemanticGaussian {
            position: Vector3::from(self.position),
            rotation: quat::to_unit_quaternion(self.rotation),
            scale: Vector3::new(
                self.log_scale[0].exp(),
                self.log_scale[1].exp(),
                self.log_scale[2].exp(),
            ),
            opacity: sigmoid(self.opacity_logit),
            classes: softmax(&self.class_logits),
            velocity: Vector3::from(self.velocity),
        }
    }

    pub fn encode(g: &SemanticGaussian) -> Self {
        Self {
            position: g.position.into(),
            rotation: quat::from_unit_quaternion(&g.rotation),
            log_scale: [g.scale.x.ln(), g.scale.y.ln(), g.scale.z.ln()],
            opacity_logit: logit(g.opacity),
            class_logits: distribution_to_logits(&g.classes),
            velocity: g.velocity.into(),
        }
    }
}

/// Raw form of one query child.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawChild {
    pub offset: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    /// Per-Gaussian color, pretraining only.
    pub color: [f64; 3],
}

/// Raw form of a scene query. The base position is fixed at initialization;
/// only the offset (and everything else) is optimized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawQuery {
    pub base_position: [f64; 3],
    pub offset: [f64; 3],
    pub opacity_logit: f64,
    pub velocity: [f64; 3],
    pub class_logits: Vec<f64>,
    pub children: Vec<RawChild>,
}

impl RawQuery {
    pub fn decode(&self) -> SceneQuery {
        SceneQuery {
            position: Vector3::from(self.base_position),
            offset: Vector3::from(self.offset),
            opacity: sigmoid(self.opacity_logit),
            velocity: Vector3::from(self.velocity),
            children: self
                .children
                .iter()
                .map(|c| QueryChild {
                    offset: Vector3::from(c.offset),
                    rotation: quat::to_unit_quaternion(c.rotation),
                    scale: Vector3::new(
                        c.log_scale[0].exp(),
                        c.log_scale[1].exp(),
                        c.log_scale[2].exp(),
                    ),
                    opacity: sigmoid(c.opacity_logit),
                })
                .collect(),
            classes: softmax(&self.class_logits),
        }
    }
}

/// The full optimizable state: a set of raw queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryParamSet {
    pub class_count: usize,
    pub queries: Vec<RawQuery>,
}

impl QueryParamSet {
    pub fn children_per_query(&self) -> usize {
        self.queries.first().map_or(0, |q| q.children.len())
    }

    pub fn gaussian_count(&self) -> usize {
        self.queries.iter().map(|q| q.children.len()).sum()
    }

    pub fn decode_queries(&self) -> Vec<SceneQuery> {
        self.queries.iter().map(|q| q.decode()).collect()
    }

    /// Decodes every query into Gaussians plus the per-Gaussian colors.
    /// Gaussian `i*J + j` is child `j` of query `i`.
    pub fn decode_gaussians(&self) -> (Vec<SemanticGaussian>, Vec<[f64; 3]>) {
        let mut gaussians = Vec::with_capacity(self.gaussian_count());
        let mut colors = Vec::with_capacity(self.gaussian_count());
        for q in &self.queries {
            let decoded = q.decode();
            gaussians.extend(decoded.decode());
            colors.extend(q.children.iter().map(|c| c.color));
        }
        (gaussians, colors)
    }
}

/// Per-Gaussian gradients in raw-parameter space, plus the color and velocity
/// slots used by the rendering and warping paths.
#[derive(Debug, Clone)]
pub struct GaussianGrads {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    /// Flat, stride `class_count`.
    pub class_logits: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub velocity: Vec<Vector3<f64>>,
    pub class_count: usize,
}

impl GaussianGrads {
    pub fn zeros(n: usize, class_count: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            class_logits: vec![0.0; n * class_count],
            color: vec![[0.0; 3]; n],
            velocity: vec![Vector3::zeros(); n],
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn add_scaled(&mut self, other: &GaussianGrads, factor: f64) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.position[i] += other.position[i] * factor;
            for k in 0..4 {
                self.rotation[i][k] += other.rotation[i][k] * factor;
            }
            self.log_scale[i] += other.log_scale[i] * factor;
            self.opacity_logit[i] += other.opacity_logit[i] * factor;
            for k in 0..3 {
                self.color[i][k] += other.color[i][k] * factor;
            }
            self.velocity[i] += other.velocity[i] * factor;
        }
        for (a, b) in self.class_logits.iter_mut().zip(&other.class_logits) {
            *a += b * factor;
        }
    }
}

/// Gradients mirroring the raw query layout.
#[derive(Debug, Clone)]
pub struct QueryGrads {
    pub offset: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub velocity: Vec<Vector3<f64>>,
    /// Flat, stride `class_count`.
    pub class_logits: Vec<f64>,
    pub child_offset: Vec<Vector3<f64>>,
    pub child_rotation: Vec<[f64; 4]>,
    pub child_log_scale: Vec<Vector3<f64>>,
    pub child_opacity_logit: Vec<f64>,
    pub child_color: Vec<[f64; 3]>,
}

impl QueryGrads {
    pub fn zeros(params: &QueryParamSet) -> Self {
        let k = params.queries.len();
        let n = params.gaussian_count();
        Self {
            offset: vec![Vector3::zeros(); k],
            opacity_logit: vec![0.0; k],
            velocity: vec![Vector3::zeros(); k],
            class_logits: vec![0.0; k * params.class_count],
            child_offset: vec![Vector3::zeros(); n],
            child_rotation: vec![[0.0; 4]; n],
            child_log_scale: vec![Vector3::zeros(); n],
            child_opacity_logit: vec![0.0; n],
            child_color: vec![[0.0; 3]; n],
        }
    }
}

/// Pulls per-Gaussian raw gradients back through the query decoding.
///
/// Gaussian ordering must match [`QueryParamSet::decode_gaussians`]. The
/// per-Gaussian opacity logit gradient was computed for the effective opacity
/// `a_q * a_j`; it is rerouted to the two underlying logits through
/// `(1 - a_q) / (1 - a_eff)` and `(1 - a_j) / (1 - a_eff)`.
pub fn backprop_to_queries(params: &QueryParamSet, grads: &GaussianGrads, out: &mut QueryGrads) {
    assert_eq!(grads.len(), params.gaussian_count());
    assert_eq!(grads.class_count, params.class_count);
    let c = params.class_count;
    let mut g = 0usize;
    for (qi, q) in params.queries.iter().enumerate() {
        let a_q = sigmoid(q.opacity_logit);
        for (ci, child) in q.children.iter().enumerate() {
            let _ = ci;
            let a_j = sigmoid(child.opacity_logit);
            let a_eff = a_q * a_j;
            // Positions: the Gaussian position is p + o + o_j.
            out.offset[qi] += grads.position[g];
            out.child_offset[g] += grads.position[g];
            // Rotation: the Gaussian was decoded from the child's raw
            // quaternion; rescale the projected gradient by its norm.
            let n = quat::norm(child.rotation);
            for k in 0..4 {
                out.child_rotation[g][k] += grads.rotation[g][k] / n;
            }
            out.child_log_scale[g] += grads.log_scale[g];
            // Opacity: a_eff = sigmoid(l_q) * sigmoid(l_j).
            let denom = 1.0 - a_eff;
            out.opacity_logit[qi] += grads.opacity_logit[g] * (1.0 - a_q) / denom;
            out.child_opacity_logit[g] += grads.opacity_logit[g] * (1.0 - a_j) / denom;
            // Classes are shared: logit gradients sum over children.
            for k in 0..c {
                out.class_logits[qi * c + k] += grads.class_logits[g * c + k];
            }
            for k in 0..3 {
                out.child_color[g][k] += grads.color[g][k];
            }
            out.velocity[qi] += grads.velocity[g];
            g += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sigmoid_logit_round_trip() {
        for &p in &[1e-5, 0.3, 0.5, 0.99] {
            assert_relative_eq!(sigmoid(logit(p)), p, epsilon = 1e-12);
        }
        // Clamped at the extremes.
        assert_relative_eq!(sigmoid(logit(0.0)), OPACITY_EPS, epsilon = 1e-12);
        assert_relative_eq!(sigmoid(logit(1.0)), 1.0 - OPACITY_EPS, epsilon = 1e-9);
    }

    #[test]
    fn softmax_is_a_distribution_and_inverts_log() {
        let p = vec![0.1, 0.2, 0.3, 0.4];
        let back = softmax(&distribution_to_logits(&p));
        for (a, b) in p.iter().zip(&back) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z = vec![0.3, -1.0, 0.7];
        let g = vec![1.0, -0.5, 2.0];
        let p = softmax(&z);
        let grad = softmax_backward(&p, &g);
        let f = |z: &[f64]| -> f64 { softmax(z).iter().zip(&g).map(|(pi, gi)| pi * gi).sum() };
        let h = 1e-6;
        for k in 0..3 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += h;
            zm[k] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert_relative_eq!(grad[k], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn raw_gaussian_round_trips_through_decode() {
        let g = SemanticGaussian::new(
            Vector3::new(1.0, -2.0, 0.5),
            quat::to_unit_quaternion([0.9, 0.1, -0.2, 0.3]),
            Vector3::new(0.5, 1.5, 2.0),
            0.7,
            vec![0.2, 0.5, 0.3],
            Vector3::new(1.0, 0.0, -1.0),
        );
        let back = RawGaussian::encode(&g).decode();
        assert_relative_eq!(back.position, g.position, epsilon = 1e-12);
        assert_relative_eq!(back.scale, g.scale, epsilon = 1e-12);
        assert_relative_eq!(back.opacity, g.opacity, epsilon = 1e-9);
        for (a, b) in back.classes.iter().zip(&g.classes) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }
}
