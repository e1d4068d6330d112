//! Reference (naive) differentiable Gaussian-to-voxel splatting.
//!
//! Per voxel center `x`, the occupancy probability composes the per-Gaussian
//! responses `alpha_i = [a] * exp(-0.5 (x-m)^T Sigma^-1 (x-m))` as
//! `alpha = 1 - prod(1 - alpha_i)`, and the foreground class distribution is
//! an opacity-weighted mixture of the full (normalized) Gaussian densities.
//! The per-voxel output row is `[alpha * e ; 1 - alpha]`.
//!
//! The forward kernel here parallelizes over voxels; the backward is
//! single-threaded reference code. The cache-blocked variants with the same
//! contract live in [`crate::blocked`].

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::softmax_backward;
use crate::quat;
use crate::types::{OccupancyField, SemanticGaussian, VoxelGrid};

/// Kernel configuration shared by the naive and blocked implementations.
#[derive(Debug, Clone, Copy)]
pub struct SplatConfig {
    /// Pair cutoff in standard deviations; a Gaussian touches the voxels
    /// whose centers fall inside its rotated cube of half-extent
    /// `cutoff_sigma * max(scale)`.
    pub cutoff_sigma: f64,
    /// Weight the occupancy response by opacity.
    pub opacity_weighted: bool,
    /// Below this mixture denominator the class distribution is uniform.
    pub weight_floor: f64,
    /// Deterministic scheduling. Outputs are bit-identical across worker
    /// counts either way; the flag only pins block scheduling order.
    pub deterministic: bool,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            cutoff_sigma: 3.0,
            opacity_weighted: true,
            weight_floor: 1e-12,
            deterministic: true,
        }
    }
}

/// 3x3 covariance with cached inverse and determinant.
#[derive(Debug, Clone)]
pub struct Covariance {
    pub matrix: Matrix3<f64>,
    pub inverse: Matrix3<f64>,
    pub determinant: f64,
}

/// Builds `Sigma = R S S^T R^T` from a (possibly unnormalized) quaternion and
/// per-axis scales.
pub fn covariance_from(rotation: [f64; 4], scale: Vector3<f64>) -> Result<Covariance> {
    let n = quat::norm(rotation);
    if !(n > quat::MIN_QUAT_NORM) {
        return Err(Error::DegenerateRotation { norm: n });
    }
    let r = quat::rotation_matrix(quat::normalize(rotation));
    let s2 = Matrix3::from_diagonal(&scale.component_mul(&scale));
    let inv_s2 = Matrix3::from_diagonal(&Vector3::new(
        1.0 / (scale.x * scale.x),
        1.0 / (scale.y * scale.y),
        1.0 / (scale.z * scale.z),
    ));
    Ok(Covariance {
        matrix: r * s2 * r.transpose(),
        inverse: r * inv_s2 * r.transpose(),
        determinant: (scale.x * scale.y * scale.z).powi(2),
    })
}

pub(crate) const INV_TWO_PI_POW_3_2: f64 = 0.063_493_635_934_240_97; // (2*pi)^(-3/2)

/// Occupancy response of one Gaussian at `x` (Mahalanobis bell, optionally
/// weighted by opacity).
pub fn gaussian_response(x: &Vector3<f64>, g: &SemanticGaussian, opacity_weighted: bool) -> f64 {
    let y = g.rotation.inverse() * (x - g.position);
    let q = (y.x / g.scale.x).powi(2) + (y.y / g.scale.y).powi(2) + (y.z / g.scale.z).powi(2);
    let r = (-0.5 * q).exp();
    if opacity_weighted {
        g.opacity * r
    } else {
        r
    }
}

/// `alpha = 1 - prod(1 - alpha_i)` over the given neighbors.
pub fn occupancy_prob(
    x: &Vector3<f64>,
    neighbors: &[SemanticGaussian],
    opacity_weighted: bool,
) -> f64 {
    let mut complement = 1.0;
    for g in neighbors {
        complement *= 1.0 - gaussian_response(x, g, opacity_weighted);
    }
    1.0 - complement
}

/// Opacity-weighted mixture of full Gaussian densities. Returns the class
/// distribution and a flag set when the denominator fell below `weight_floor`
/// (uniform fallback).
pub fn class_mixture(
    x: &Vector3<f64>,
    neighbors: &[SemanticGaussian],
    class_count: usize,
    weight_floor: f64,
) -> (Vec<f64>, bool) {
    let mut numerator = vec![0.0; class_count];
    let mut denominator = 0.0;
    for g in neighbors {
        let norm = INV_TWO_PI_POW_3_2 / (g.scale.x * g.scale.y * g.scale.z);
        let w = g.opacity * norm * gaussian_response(x, g, false);
        denominator += w;
        for (nk, ck) in numerator.iter_mut().zip(&g.classes) {
            *nk += w * ck;
        }
    }
    if denominator < weight_floor {
        return (vec![1.0 / class_count as f64; class_count], true);
    }
    (numerator.iter().map(|n| n / denominator).collect(), false)
}

/// Per-voxel and per-Gaussian neighbor lists in CSR form; the two directions
/// are exact transposes.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    pub v2g_offsets: Vec<usize>,
    pub v2g: Vec<u32>,
    pub g2v_offsets: Vec<usize>,
    pub g2v: Vec<u32>,
}

impl NeighborIndex {
    #[inline]
    pub fn gaussians_of(&self, voxel: usize) -> &[u32] {
        &self.v2g[self.v2g_offsets[voxel]..self.v2g_offsets[voxel + 1]]
    }

    #[inline]
    pub fn voxels_of(&self, gaussian: usize) -> &[u32] {
        &self.g2v[self.g2v_offsets[gaussian]..self.g2v_offsets[gaussian + 1]]
    }

    pub fn pair_count(&self) -> usize {
        self.v2g.len()
    }
}

/// Per-Gaussian data packed for the kernels.
pub(crate) struct Prepared {
    pub mean: Vec<[f64; 3]>,
    pub unit_quat: Vec<[f64; 4]>,
    /// Row-major rotation matrices.
    pub rot: Vec<[f64; 9]>,
    pub inv_s2: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    /// `(2 pi)^(-3/2) / (s1 s2 s3)`.
    pub norm_const: Vec<f64>,
    /// Rotated-frame cube half extent `cutoff * max(scale)`.
    pub half: Vec<f64>,
    /// Inclusive candidate voxel index ranges per axis; empty ranges mean the
    /// Gaussian misses the grid.
    pub ranges: Vec<[[i64; 2]; 3]>,
    /// Flat class distributions, stride `class_count`.
    pub classes: Vec<f64>,
    pub class_count: usize,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    /// `y = R^T d`.
    #[inline]
    pub fn rotate_into(&self, g: usize, d: [f64; 3]) -> [f64; 3] {
        let r = &self.rot[g];
        [
            r[0] * d[0] + r[3] * d[1] + r[6] * d[2],
            r[1] * d[0] + r[4] * d[1] + r[7] * d[2],
            r[2] * d[0] + r[5] * d[1] + r[8] * d[2],
        ]
    }
}

pub(crate) fn prepare(
    gaussians: &[SemanticGaussian],
    grid: &VoxelGrid,
    cutoff_sigma: f64,
) -> Result<Prepared> {
    let n = gaussians.len();
    let c = grid.class_count;
    let mut out = Prepared {
        mean: Vec::with_capacity(n),
        unit_quat: Vec::with_capacity(n),
        rot: Vec::with_capacity(n),
        inv_s2: Vec::with_capacity(n),
        opacity: Vec::with_capacity(n),
        norm_const: Vec::with_capacity(n),
        half: Vec::with_capacity(n),
        ranges: Vec::with_capacity(n),
        classes: Vec::with_capacity(n * c),
        class_count: c,
    };
    for (i, g) in gaussians.iter().enumerate() {
        if g.classes.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "gaussian {} has {} classes, grid expects {}",
                i,
                g.classes.len(),
                c
            )));
        }
        let q = [g.rotation.w, g.rotation.i, g.rotation.j, g.rotation.k];
        let norm = quat::norm(q);
        if !(norm > quat::MIN_QUAT_NORM) {
            return Err(Error::DegenerateRotation { norm });
        }
        if !(g.scale.min() > 0.0) {
            return Err(Error::ShapeMismatch(format!(
                "gaussian {} has non-positive scale",
                i
            )));
        }
        let uq = quat::normalize(q);
        let r = quat::rotation_matrix(uq);
        let half = cutoff_sigma * g.scale.max();
        // World-frame AABB of the rotated cube of half-extent `half`.
        let mut range = [[0i64; 2]; 3];
        for a in 0..3 {
            let extent = half * (r[(a, 0)].abs() + r[(a, 1)].abs() + r[(a, 2)].abs());
            let lo = (g.position[a] - extent - grid.origin[a]) / grid.voxel_size[a] - 0.5;
            let hi = (g.position[a] + extent - grid.origin[a]) / grid.voxel_size[a] - 0.5;
            range[a] = [
                lo.ceil().max(0.0) as i64,
                hi.floor().min(grid.dims[a] as f64 - 1.0) as i64,
            ];
        }
        out.mean.push(g.position.into());
        out.unit_quat.push(uq);
        out.rot.push([
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]);
        out.inv_s2.push([
            1.0 / (g.scale.x * g.scale.x),
            1.0 / (g.scale.y * g.scale.y),
            1.0 / (g.scale.z * g.scale.z),
        ]);
        out.opacity.push(g.opacity);
        out.norm_const
            .push(INV_TWO_PI_POW_3_2 / (g.scale.x * g.scale.y * g.scale.z));
        out.half.push(half);
        out.ranges.push(range);
        out.classes.extend_from_slice(&g.classes);
    }
    Ok(out)
}

/// Builds the Gaussian/voxel interaction index. A pair is included iff the
/// voxel center lies inside the Gaussian's rotated cube of half-extent
/// `cutoff_sigma * max(scale)` (a conservative superset of the Mahalanobis
/// ball at that cutoff).
pub fn neighbor_pairs(
    gaussians: &[SemanticGaussian],
    grid: &VoxelGrid,
    cutoff_sigma: f64,
) -> Result<NeighborIndex> {
    let prepared = prepare(gaussians, grid, cutoff_sigma)?;
    Ok(neighbor_pairs_prepared(&prepared, grid))
}

pub(crate) fn neighbor_pairs_prepared(prepared: &Prepared, grid: &VoxelGrid) -> NeighborIndex {
    let per_gaussian: Vec<Vec<u32>> = (0..prepared.len())
        .into_par_iter()
        .map(|g| {
            let mut voxels = Vec::new();
            let [ri, rj, rk] = prepared.ranges[g];
            let half = prepared.half[g];
            let m = prepared.mean[g];
            for k in rk[0]..=rk[1] {
                for j in rj[0]..=rj[1] {
                    for i in ri[0]..=ri[1] {
                        let c = grid.center(i as usize, j as usize, k as usize);
                        let y = prepared.rotate_into(g, [c.x - m[0], c.y - m[1], c.z - m[2]]);
                        if y[0].abs() <= half && y[1].abs() <= half && y[2].abs() <= half {
                            voxels.push(grid.linear(i as usize, j as usize, k as usize) as u32);
                        }
                    }
                }
            }
            voxels
        })
        .collect();

    let voxel_count = grid.voxel_count();
    let mut g2v_offsets = Vec::with_capacity(prepared.len() + 1);
    g2v_offsets.push(0usize);
    let mut total = 0usize;
    for v in &per_gaussian {
        total += v.len();
        g2v_offsets.push(total);
    }
    let mut g2v = Vec::with_capacity(total);
    for v in &per_gaussian {
        g2v.extend_from_slice(v);
    }

    // Transpose; iterating gaussians in ascending order leaves every voxel
    // list sorted by gaussian id.
    let mut counts = vec![0usize; voxel_count];
    for &v in &g2v {
        counts[v as usize] += 1;
    }
    let mut v2g_offsets = Vec::with_capacity(voxel_count + 1);
    let mut acc = 0usize;
    v2g_offsets.push(0);
    for &c in &counts {
        acc += c;
        v2g_offsets.push(acc);
    }
    let mut cursor = v2g_offsets[..voxel_count].to_vec();
    let mut v2g = vec![0u32; total];
    for (g, voxels) in per_gaussian.iter().enumerate() {
        for &v in voxels {
            v2g[cursor[v as usize]] = g as u32;
            cursor[v as usize] += 1;
        }
    }
    NeighborIndex {
        v2g_offsets,
        v2g,
        g2v_offsets,
        g2v,
    }
}

/// Per-Gaussian gradients in raw-parameter space (position as-is, rotation as
/// the unnormalized quaternion, scale as log-scale, opacity as logit, classes
/// as logits).
#[derive(Debug, Clone)]
pub struct SplatGradients {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    /// Flat, stride `class_count`.
    pub class_logits: Vec<f64>,
    pub class_count: usize,
}

impl SplatGradients {
    pub fn zeros(n: usize, class_count: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            class_logits: vec![0.0; n * class_count],
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.rotation.iter().flatten().all(|v| v.is_finite())
            && self
                .log_scale
                .iter()
                .all(|p| p.iter().all(|v| v.is_finite()))
            && self.opacity_logit.iter().all(|v| v.is_finite())
            && self.class_logits.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn validate_upstream(upstream: &[f64], grid: &VoxelGrid) -> Result<()> {
    let row = grid.class_count + 1;
    if upstream.len() != grid.voxel_count() * row {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {} entries, expected {}",
            upstream.len(),
            grid.voxel_count() * row
        )));
    }
    if let Some(bad) = upstream.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidGradient { voxel: bad / row });
    }
    Ok(())
}

/// Per-pair forward quantities.
#[derive(Clone, Copy)]
pub(crate) struct PairEval {
    pub d: [f64; 3],
    pub y: [f64; 3],
    pub response: f64,
    pub alpha_i: f64,
    pub weight: f64,
}

#[inline]
pub(crate) fn eval_pair(prepared: &Prepared, g: usize, x: &Vector3<f64>, weighted: bool) -> PairEval {
    let m = prepared.mean[g];
    let d = [x.x - m[0], x.y - m[1], x.z - m[2]];
    let y = prepared.rotate_into(g, d);
    let s = prepared.inv_s2[g];
    let q = y[0] * y[0] * s[0] + y[1] * y[1] * s[1] + y[2] * y[2] * s[2];
    let response = (-0.5 * q).exp();
    let a = prepared.opacity[g];
    PairEval {
        d,
        y,
        response,
        alpha_i: if weighted { a * response } else { response },
        weight: a * prepared.norm_const[g] * response,
    }
}

/// Splats Gaussians onto the grid. Voxels with no interacting Gaussian get
/// the pure-empty row `[0, ..., 0, 1]`.
pub fn splat_forward(
    gaussians: &[SemanticGaussian],
    grid: &VoxelGrid,
    cfg: &SplatConfig,
) -> Result<OccupancyField> {
    let prepared = prepare(gaussians, grid, cfg.cutoff_sigma)?;
    let index = neighbor_pairs_prepared(&prepared, grid);
    Ok(forward_prepared(&prepared, &index, grid, cfg))
}

pub(crate) fn forward_prepared(
    prepared: &Prepared,
    index: &NeighborIndex,
    grid: &VoxelGrid,
    cfg: &SplatConfig,
) -> OccupancyField {
    let c = grid.class_count;
    let row_len = c + 1;
    let mut data = vec![0.0f32; grid.voxel_count() * row_len];
    data.par_chunks_mut(row_len)
        .enumerate()
        .for_each_init(
            || vec![0.0f64; c],
            |numerator, (v, row)| {
                let list = index.gaussians_of(v);
                if list.is_empty() {
                    row[c] = 1.0;
                    return;
                }
                let [i, j, k] = grid.unlinear(v);
                let x = grid.center(i, j, k);
                let mut complement = 1.0f64;
                let mut denom = 0.0f64;
                numerator.iter_mut().for_each(|n| *n = 0.0);
                for &gi in list {
                    let g = gi as usize;
                    let e = eval_pair(prepared, g, &x, cfg.opacity_weighted);
                    complement *= 1.0 - e.alpha_i;
                    denom += e.weight;
                    let classes = &prepared.classes[g * c..(g + 1) * c];
                    for (nk, ck) in numerator.iter_mut().zip(classes) {
                        *nk += e.weight * ck;
                    }
                }
                let alpha = 1.0 - complement;
                if denom >= cfg.weight_floor {
                    for k in 0..c {
                        row[k] = (alpha * numerator[k] / denom) as f32;
                    }
                } else {
                    let u = alpha / c as f64;
                    for k in 0..c {
                        row[k] = u as f32;
                    }
                }
                row[c] = (1.0 - alpha) as f32;
            },
        );
    OccupancyField {
        dims: grid.dims,
        class_count: c,
        data,
    }
}

/// `sum_v <upstream_v, field_v>` computed in f64; the scalar loss whose
/// gradients [`splat_backward`] returns.
pub fn splat_loss(
    gaussians: &[SemanticGaussian],
    grid: &VoxelGrid,
    cfg: &SplatConfig,
    upstream: &[f64],
) -> Result<f64> {
    validate_upstream(upstream, grid)?;
    let prepared = prepare(gaussians, grid, cfg.cutoff_sigma)?;
    let index = neighbor_pairs_prepared(&prepared, grid);
    Ok(loss_prepared(&prepared, &index, grid, cfg, upstream))
}

pub(crate) fn loss_prepared(
    prepared: &Prepared,
    index: &NeighborIndex,
    grid: &VoxelGrid,
    cfg: &SplatConfig,
    upstream: &[f64],
) -> f64 {
    let c = grid.class_count;
    let mut loss = 0.0;
    let mut numerator = vec![0.0f64; c];
    for v in 0..grid.voxel_count() {
        let u = &upstream[v * (c + 1)..(v + 1) * (c + 1)];
        let list = index.gaussians_of(v);
        if list.is_empty() {
            loss += u[c];
            continue;
        }
        let [i, j, k] = grid.unlinear(v);
        let x = grid.center(i, j, k);
        let mut complement = 1.0f64;
        let mut denom = 0.0f64;
        numerator.iter_mut().for_each(|n| *n = 0.0);
        for &gi in list {
            let g = gi as usize;
            let e = eval_pair(prepared, g, &x, cfg.opacity_weighted);
            complement *= 1.0 - e.alpha_i;
            denom += e.weight;
            let classes = &prepared.classes[g * c..(g + 1) * c];
            for (nk, ck) in numerator.iter_mut().zip(classes) {
                *nk += e.weight * ck;
            }
        }
        let alpha = 1.0 - complement;
        let fg = if denom >= cfg.weight_floor {
            (0..c).map(|k| u[k] * numerator[k] / denom).sum::<f64>()
        } else {
            u[..c].iter().sum::<f64>() / c as f64
        };
        loss += alpha * fg + (1.0 - alpha) * u[c];
    }
    loss
}

/// Value-space per-Gaussian accumulators (classes kept separately).
#[derive(Debug, Clone, Default)]
pub(crate) struct PairAccum {
    pub d_mean: [f64; 3],
    pub d_rot_mat: [f64; 9],
    pub d_log_scale: [f64; 3],
    pub d_opacity: f64,
    pub d_norm: f64,
}

/// Per-pair gradient chain shared by the naive and blocked backward passes.
/// `d_alpha_i` is dL/d(alpha_i), `d_w` is dL/d(mixture weight).
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn pair_chain(
    e: &PairEval,
    s: [f64; 3],
    rot: &[f64; 9],
    a: f64,
    norm_const: f64,
    opacity_weighted: bool,
    d_alpha_i: f64,
    d_w: f64,
    pa: &mut PairAccum,
) {
    let r = e.response;
    let mut d_r = d_w * a * norm_const;
    let mut d_a = d_w * norm_const * r;
    if opacity_weighted {
        d_r += d_alpha_i * a;
        d_a += d_alpha_i * r;
    } else {
        d_r += d_alpha_i;
    }
    pa.d_opacity += d_a;
    pa.d_norm += d_w * a * r;
    let d_q = -0.5 * r * d_r;
    // q = sum_k y_k^2 / s_k^2 with y = R^T (x - m):
    //   dq/dm = -2 R (y / s^2), dq/d(log s_k) = -2 y_k^2 / s_k^2,
    //   dq/dR[a][k] = 2 (y_k / s_k^2) d_a.
    let ys = [e.y[0] * s[0], e.y[1] * s[1], e.y[2] * s[2]];
    for a3 in 0..3 {
        let ry = rot[a3 * 3] * ys[0] + rot[a3 * 3 + 1] * ys[1] + rot[a3 * 3 + 2] * ys[2];
        pa.d_mean[a3] += d_q * (-2.0) * ry;
    }
    for k3 in 0..3 {
        pa.d_log_scale[k3] += d_q * (-2.0) * e.y[k3] * e.y[k3] * s[k3];
        for a3 in 0..3 {
            pa.d_rot_mat[a3 * 3 + k3] += d_q * 2.0 * ys[k3] * e.d[a3];
        }
    }
}

/// Chains one Gaussian's value-space accumulators into raw-space gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn chain_to_raw(
    prepared: &Prepared,
    g: usize,
    pa: &PairAccum,
    d_classes: &[f64],
    pos: &mut Vector3<f64>,
    rot: &mut [f64; 4],
    lscale: &mut Vector3<f64>,
    opa: &mut f64,
    clg: &mut [f64],
) {
    *pos = Vector3::from(pa.d_mean);
    let q = prepared.unit_quat[g];
    let jac = quat::rotation_matrix_jacobian(q);
    let mut grad_unit = [0.0f64; 4];
    for (k, jm) in jac.iter().enumerate() {
        let mut sum = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                sum += pa.d_rot_mat[a * 3 + b] * jm[(a, b)];
            }
        }
        grad_unit[k] = sum;
    }
    *rot = quat::normalize_backward(q, grad_unit);
    // Normalizer (2 pi)^{-3/2} / prod(s): d norm / d log s_k = -norm.
    let dn = pa.d_norm * prepared.norm_const[g];
    *lscale = Vector3::from(pa.d_log_scale) - Vector3::repeat(dn);
    let a = prepared.opacity[g];
    *opa = pa.d_opacity * a * (1.0 - a);
    let classes = &prepared.classes[g * prepared.class_count..(g + 1) * prepared.class_count];
    let grad = softmax_backward(classes, d_classes);
    clg.copy_from_slice(&grad);
}

/// Reference backward pass: gradients of `sum_v <upstream_v, field_v>` with
/// respect to every raw Gaussian parameter. Single-threaded, voxel-major,
/// with exact leave-one-out products from prefix/suffix scans.
pub fn splat_backward(
    gaussians: &[SemanticGaussian],
    grid: &VoxelGrid,
    cfg: &SplatConfig,
    upstream: &[f64],
) -> Result<SplatGradients> {
    validate_upstream(upstream, grid)?;
    let prepared = prepare(gaussians, grid, cfg.cutoff_sigma)?;
    let index = neighbor_pairs_prepared(&prepared, grid);
    Ok(backward_prepared(&prepared, &index, grid, cfg, upstream))
}

pub(crate) fn backward_prepared(
    prepared: &Prepared,
    index: &NeighborIndex,
    grid: &VoxelGrid,
    cfg: &SplatConfig,
    upstream: &[f64],
) -> SplatGradients {
    let n = prepared.len();
    let c = prepared.class_count;
    let mut acc: Vec<PairAccum> = vec![PairAccum::default(); n];
    let mut acc_classes = vec![0.0f64; n * c];

    let mut evals: Vec<(usize, PairEval)> = Vec::new();
    let mut loo: Vec<f64> = Vec::new();

    for v in 0..grid.voxel_count() {
        let list = index.gaussians_of(v);
        if list.is_empty() {
            continue;
        }
        let u = &upstream[v * (c + 1)..(v + 1) * (c + 1)];
        let [i, j, k] = grid.unlinear(v);
        let x = grid.center(i, j, k);

        evals.clear();
        let mut denom = 0.0f64;
        let mut fg_dot = 0.0f64; // <u_f, numerator>
        for &gi in list {
            let g = gi as usize;
            let e = eval_pair(prepared, g, &x, cfg.opacity_weighted);
            denom += e.weight;
            let classes = &prepared.classes[g * c..(g + 1) * c];
            let mut dot = 0.0;
            for k in 0..c {
                dot += u[k] * classes[k];
            }
            fg_dot += e.weight * dot;
            evals.push((g, e));
        }

        // Leave-one-out products of (1 - alpha_j) via prefix/suffix scans.
        let len = evals.len();
        loo.resize(len, 0.0);
        let mut prefix = 1.0f64;
        for (i, (_, e)) in evals.iter().enumerate() {
            loo[i] = prefix;
            prefix *= 1.0 - e.alpha_i;
        }
        let alpha = 1.0 - prefix;
        let mut suffix = 1.0f64;
        for (i, (_, e)) in evals.iter().enumerate().rev() {
            loo[i] *= suffix;
            suffix *= 1.0 - e.alpha_i;
        }

        let mixture_live = denom >= cfg.weight_floor;
        let inv_denom = if mixture_live { 1.0 / denom } else { 0.0 };
        let s_dot = if mixture_live {
            fg_dot * inv_denom
        } else {
            u[..c].iter().sum::<f64>() / c as f64
        };
        let g_alpha = s_dot - u[c];

        for (idx, (g, e)) in evals.iter().enumerate() {
            let g = *g;
            let a = prepared.opacity[g];
            let d_alpha_i = g_alpha * loo[idx];
            let classes = &prepared.classes[g * c..(g + 1) * c];
            let mut d_w = 0.0;
            if mixture_live {
                let mut dot = 0.0;
                for k in 0..c {
                    dot += u[k] * classes[k];
                }
                d_w = alpha * (dot - s_dot) * inv_denom;
                let scale = alpha * e.weight * inv_denom;
                let dc = &mut acc_classes[g * c..(g + 1) * c];
                for k in 0..c {
                    dc[k] += scale * u[k];
                }
            }
            pair_chain(
                e,
                prepared.inv_s2[g],
                &prepared.rot[g],
                a,
                prepared.norm_const[g],
                cfg.opacity_weighted,
                d_alpha_i,
                d_w,
                &mut acc[g],
            );
        }
    }

    let mut out = SplatGradients::zeros(n, c);
    for g in 0..n {
        let (pos, rot, lscale, opa) = (
            &mut out.position[g],
            &mut out.rotation[g],
            &mut out.log_scale[g],
            &mut out.opacity_logit[g],
        );
        let mut clg = vec![0.0; c];
        chain_to_raw(
            prepared,
            g,
            &acc[g],
            &acc_classes[g * c..(g + 1) * c],
            pos,
            rot,
            lscale,
            opa,
            &mut clg,
        );
        out.class_logits[g * c..(g + 1) * c].copy_from_slice(&clg);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::params::{logit, sigmoid, RawGaussian};
    use crate::scene::random_gaussians;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;

    fn test_grid(dims: [usize; 3], class_count: usize) -> VoxelGrid {
        VoxelGrid::empty(
            Vector3::new(-1.0, -1.0, -0.5),
            Vector3::new(0.5, 0.5, 0.5),
            dims,
            class_count,
        )
    }

    #[test]
    fn covariance_identity() {
        let c = covariance_from([1.0, 0.0, 0.0, 0.0], Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(c.matrix, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(c.inverse, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(c.determinant, 1.0);
    }

    #[test]
    fn covariance_matches_direct_matrix_product() {
        // 90 degree rotation about z with scales (2, 1, 1).
        let half = std::f64::consts::FRAC_PI_4;
        let q = [half.cos(), 0.0, 0.0, half.sin()];
        let scale = Vector3::new(2.0, 1.0, 1.0);
        let c = covariance_from(q, scale).unwrap();
        assert_relative_eq!(
            c.matrix,
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)),
            epsilon = 1e-12
        );
        // Independent route: R * S * S^T * R^T with nalgebra primitives.
        let r = crate::quat::to_unit_quaternion(q).to_rotation_matrix();
        let s = Matrix3::from_diagonal(&scale);
        let direct = r.matrix() * s * s.transpose() * r.matrix().transpose();
        assert_relative_eq!(c.matrix, direct, epsilon = 1e-12);
        assert_relative_eq!(c.matrix * c.inverse, Matrix3::identity(), epsilon = 1e-10);
    }

    #[test]
    fn covariance_rejects_degenerate_quaternion() {
        assert!(matches!(
            covariance_from([0.0; 4], Vector3::new(1.0, 1.0, 1.0)),
            Err(Error::DegenerateRotation { .. })
        ));
    }

    #[test]
    fn response_examples() {
        let g = SemanticGaussian::isotropic(Vector3::new(1.0, 2.0, 3.0), 0.7, 0.7, 2);
        assert_relative_eq!(gaussian_response(&g.position, &g, false), 1.0);
        assert_relative_eq!(gaussian_response(&g.position, &g, true), 0.7);
        // One standard deviation along a principal axis.
        let x = g.position + Vector3::new(0.7, 0.0, 0.0);
        assert_relative_eq!(
            gaussian_response(&x, &g, false),
            (-0.5f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn occupancy_prob_examples() {
        let x = Vector3::zeros();
        assert_eq!(occupancy_prob(&x, &[], true), 0.0);
        let g = SemanticGaussian::isotropic(x, 1.0, 0.5, 2);
        assert_relative_eq!(occupancy_prob(&x, &[g.clone()], true), 0.5);
        assert_relative_eq!(occupancy_prob(&x, &[g.clone(), g], true), 0.75);
    }

    #[test]
    fn class_mixture_examples() {
        let x = Vector3::zeros();
        let mut a = SemanticGaussian::isotropic(Vector3::new(0.0, 0.0, 5.0), 1.0, 0.8, 2);
        a.classes = vec![0.3, 0.7];
        // Single neighbor: its distribution regardless of distance.
        let (e, flagged) = class_mixture(&x, &[a.clone()], 2, 1e-12);
        assert!(!flagged);
        assert_relative_eq!(e[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(e[1], 0.7, epsilon = 1e-12);

        // Two equidistant one-hot neighbors with equal opacity: 50/50.
        let mut left = SemanticGaussian::isotropic(Vector3::new(-1.0, 0.0, 0.0), 1.0, 0.5, 2);
        left.classes = vec![1.0, 0.0];
        let mut right = SemanticGaussian::isotropic(Vector3::new(1.0, 0.0, 0.0), 1.0, 0.5, 2);
        right.classes = vec![0.0, 1.0];
        let (e, flagged) = class_mixture(&x, &[left, right], 2, 1e-12);
        assert!(!flagged);
        assert_relative_eq!(e[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(e[1], 0.5, epsilon = 1e-12);

        // No neighbors: uniform fallback with the flag set.
        let (e, flagged) = class_mixture(&x, &[], 2, 1e-12);
        assert!(flagged);
        assert_eq!(e, vec![0.5, 0.5]);
    }

    #[test]
    fn far_gaussian_touches_no_voxels() {
        let grid = test_grid([8, 8, 4], 2);
        let g = SemanticGaussian::isotropic(Vector3::new(100.0, 100.0, 100.0), 0.5, 0.5, 2);
        let index = neighbor_pairs(&[g], &grid, 3.0).unwrap();
        assert_eq!(index.pair_count(), 0);
    }

    #[test]
    fn neighbor_count_matches_brute_force_scan() {
        // Isotropic unit Gaussian centered exactly on a voxel center;
        // cutoff 3 sigma, 0.5 m voxels.
        let grid = VoxelGrid::empty(
            Vector3::new(-5.0, -5.0, -5.0),
            Vector3::new(0.5, 0.5, 0.5),
            [20, 20, 20],
            2,
        );
        let center = grid.center(10, 10, 10);
        let g = SemanticGaussian::isotropic(center, 1.0, 0.5, 2);
        let index = neighbor_pairs(&[g.clone()], &grid, 3.0).unwrap();
        // Brute force: every voxel center inside the rotated cube.
        let r = g.rotation.inverse();
        let mut expected = 0usize;
        for v in 0..grid.voxel_count() {
            let [i, j, k] = grid.unlinear(v);
            let y = r * (grid.center(i, j, k) - g.position);
            if y.x.abs() <= 3.0 && y.y.abs() <= 3.0 && y.z.abs() <= 3.0 {
                expected += 1;
            }
        }
        assert_eq!(index.pair_count(), expected);
        assert_eq!(expected, 13 * 13 * 13);
    }

    #[test]
    fn neighbor_index_directions_are_transposes() {
        let grid = test_grid([10, 9, 6], 3);
        for seed in 0..5 {
            let gaussians = random_gaussians(seed, 25, &grid, 0.2..0.8);
            let index = neighbor_pairs(&gaussians, &grid, 3.0).unwrap();
            let mut pairs_a: Vec<(u32, u32)> = Vec::new();
            for v in 0..grid.voxel_count() {
                for &g in index.gaussians_of(v) {
                    pairs_a.push((g, v as u32));
                }
            }
            let mut pairs_b: Vec<(u32, u32)> = Vec::new();
            for g in 0..gaussians.len() {
                for &v in index.voxels_of(g) {
                    pairs_b.push((g as u32, v));
                }
            }
            pairs_a.sort_unstable();
            pairs_b.sort_unstable();
            assert_eq!(pairs_a, pairs_b);
            // Per-voxel lists are ascending.
            for v in 0..grid.voxel_count() {
                let list = index.gaussians_of(v);
                assert!(list.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    /// All-pairs oracle composing the public response/mixture functions.
    fn all_pairs_row(
        x: &Vector3<f64>,
        gaussians: &[SemanticGaussian],
        cfg: &SplatConfig,
        class_count: usize,
    ) -> Vec<f64> {
        let alpha = occupancy_prob(x, gaussians, cfg.opacity_weighted);
        let (e, _) = class_mixture(x, gaussians, class_count, cfg.weight_floor);
        let mut row: Vec<f64> = e.iter().map(|ek| alpha * ek).collect();
        row.push(1.0 - alpha);
        row
    }

    #[test]
    fn empty_set_splats_to_pure_empty() {
        let grid = test_grid([4, 4, 2], 3);
        let field = splat_forward(&[], &grid, &SplatConfig::default()).unwrap();
        for v in 0..grid.voxel_count() {
            assert_eq!(field.row(v), &[0.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn forward_matches_all_pairs_oracle_with_large_cutoff() {
        let grid = test_grid([8, 8, 4], 3);
        for seed in 0..6 {
            let gaussians = random_gaussians(seed, 20, &grid, 0.2..0.7);
            for weighted in [true, false] {
                let cfg = SplatConfig {
                    cutoff_sigma: 1e6,
                    opacity_weighted: weighted,
                    ..SplatConfig::default()
                };
                let field = splat_forward(&gaussians, &grid, &cfg).unwrap();
                for v in 0..grid.voxel_count() {
                    let [i, j, k] = grid.unlinear(v);
                    let want = all_pairs_row(&grid.center(i, j, k), &gaussians, &cfg, 3);
                    for (got, want) in field.row(v).iter().zip(&want) {
                        assert!(
                            (*got as f64 - want).abs() < 1e-6,
                            "voxel {} seed {}: {} vs {}",
                            v,
                            seed,
                            got,
                            want
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn field_rows_sum_to_one() {
        let grid = test_grid([8, 8, 4], 4);
        let gaussians = random_gaussians(3, 30, &grid, 0.2..0.8);
        let field = splat_forward(&gaussians, &grid, &SplatConfig::default()).unwrap();
        for v in 0..grid.voxel_count() {
            let sum: f64 = field.row(v).iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() < 1e-5, "row {} sums to {}", v, sum);
        }
    }

    #[test]
    fn adding_a_gaussian_never_decreases_alpha() {
        let grid = test_grid([8, 8, 4], 2);
        let mut gaussians = random_gaussians(5, 12, &grid, 0.2..0.8);
        let cfg = SplatConfig::default();
        let before = splat_forward(&gaussians, &grid, &cfg).unwrap();
        gaussians.push(SemanticGaussian::isotropic(
            grid.center(4, 4, 2),
            0.6,
            0.9,
            2,
        ));
        let after = splat_forward(&gaussians, &grid, &cfg).unwrap();
        for v in 0..grid.voxel_count() {
            let alpha_before = 1.0 - before.row(v)[2] as f64;
            let alpha_after = 1.0 - after.row(v)[2] as f64;
            assert!(alpha_after >= alpha_before - 1e-6);
        }
    }

    #[test]
    fn opacity_one_weighted_equals_unweighted_exactly() {
        let grid = test_grid([6, 6, 3], 2);
        let mut gaussians = random_gaussians(8, 15, &grid, 0.2..0.6);
        for g in gaussians.iter_mut() {
            g.opacity = 1.0;
        }
        let weighted = splat_forward(
            &gaussians,
            &grid,
            &SplatConfig {
                opacity_weighted: true,
                ..SplatConfig::default()
            },
        )
        .unwrap();
        let unweighted = splat_forward(
            &gaussians,
            &grid,
            &SplatConfig {
                opacity_weighted: false,
                ..SplatConfig::default()
            },
        )
        .unwrap();
        assert_eq!(weighted.data, unweighted.data);
    }

    #[test]
    fn degenerate_rotation_propagates_from_forward() {
        let grid = test_grid([4, 4, 2], 2);
        let bad = SemanticGaussian {
            position: Vector3::zeros(),
            rotation: UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(0.0, 0.0, 0.0, 0.0)),
            scale: Vector3::new(0.5, 0.5, 0.5),
            opacity: 0.5,
            classes: vec![0.5, 0.5],
            velocity: Vector3::zeros(),
        };
        assert!(matches!(
            splat_forward(&[bad], &grid, &SplatConfig::default()),
            Err(Error::DegenerateRotation { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let grid = test_grid([6, 6, 3], 2);
        let gaussians = random_gaussians(2, 8, &grid, 0.2..0.6);
        let upstream = vec![0.0; grid.voxel_count() * 3];
        let grads = splat_backward(&gaussians, &grid, &SplatConfig::default(), &upstream).unwrap();
        assert!(grads.position.iter().all(|p| p.norm() == 0.0));
        assert!(grads.opacity_logit.iter().all(|&v| v == 0.0));
        assert!(grads.class_logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_upstream_is_rejected() {
        let grid = test_grid([4, 4, 2], 2);
        let gaussians = random_gaussians(2, 3, &grid, 0.2..0.6);
        let mut upstream = vec![0.0; grid.voxel_count() * 3];
        upstream[7] = f64::NAN;
        assert!(matches!(
            splat_backward(&gaussians, &grid, &SplatConfig::default(), &upstream),
            Err(Error::InvalidGradient { voxel: 2 })
        ));
    }

    /// Flattens raw gaussians for finite differencing: per Gaussian
    /// pos(3) rot(4) log_scale(3) opacity(1) classes(C).
    pub(crate) fn flatten_raw(raws: &[RawGaussian]) -> Vec<f64> {
        let mut flat = Vec::new();
        for r in raws {
            flat.extend_from_slice(&r.position);
            flat.extend_from_slice(&r.rotation);
            flat.extend_from_slice(&r.log_scale);
            flat.push(r.opacity_logit);
            flat.extend_from_slice(&r.class_logits);
        }
        flat
    }

    pub(crate) fn unflatten_raw(flat: &[f64], class_count: usize) -> Vec<RawGaussian> {
        let stride = 11 + class_count;
        flat.chunks_exact(stride)
            .map(|c| RawGaussian {
                position: [c[0], c[1], c[2]],
                rotation: [c[3], c[4], c[5], c[6]],
                log_scale: [c[7], c[8], c[9]],
                opacity_logit: c[10],
                class_logits: c[11..].to_vec(),
                velocity: [0.0; 3],
            })
            .collect()
    }

    pub(crate) fn random_raws(seed: u64, n: usize, grid: &VoxelGrid) -> Vec<RawGaussian> {
        random_gaussians(seed, n, grid, 0.25..0.7)
            .into_iter()
            .map(|g| {
                let mut raw = RawGaussian::encode(&g);
                // Keep opacity away from the logit clamps for clean
                // differentiation.
                raw.opacity_logit = raw.opacity_logit.clamp(-2.0, 2.0);
                raw
            })
            .collect()
    }

    fn splat_grads_flat(grads: &SplatGradients) -> Vec<f64> {
        let mut flat = Vec::new();
        for g in 0..grads.len() {
            flat.extend_from_slice(grads.position[g].as_slice());
            flat.extend_from_slice(&grads.rotation[g]);
            flat.extend_from_slice(grads.log_scale[g].as_slice());
            flat.push(grads.opacity_logit[g]);
            flat.extend_from_slice(
                &grads.class_logits[g * grads.class_count..(g + 1) * grads.class_count],
            );
        }
        flat
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let grid = test_grid([6, 6, 3], 3);
        let row_len = 4;
        for (seed, weighted) in [(1u64, true), (2, false)] {
            let raws = random_raws(seed, 5, &grid);
            let cfg = SplatConfig {
                opacity_weighted: weighted,
                ..SplatConfig::default()
            };
            let mut state = 0x243f6a8885a308d3u64 ^ seed;
            let upstream: Vec<f64> = (0..grid.voxel_count() * row_len)
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                })
                .collect();
            let point = flatten_raw(&raws);
            let f = |x: &[f64]| {
                let gaussians: Vec<SemanticGaussian> = unflatten_raw(x, 3)
                    .iter()
                    .map(|r| r.decode())
                    .collect();
                splat_loss(&gaussians, &grid, &cfg, &upstream).unwrap()
            };
            let gaussians: Vec<SemanticGaussian> = raws.iter().map(|r| r.decode()).collect();
            let grads = splat_backward(&gaussians, &grid, &cfg, &upstream).unwrap();
            assert!(grads.is_finite());
            gradcheck::assert_gradients_match(f, &point, &splat_grads_flat(&grads), 1e-4, 1e-3, 1e-5);
        }
    }

    #[test]
    fn opacity_gradient_at_center_is_sigmoid_derivative() {
        // Single weighted Gaussian, one voxel centered at its mean, C = 1,
        // upstream selecting the foreground entry: dL/d(logit) = a (1 - a).
        let grid = VoxelGrid::empty(
            Vector3::new(-0.25, -0.25, -0.25),
            Vector3::new(0.5, 0.5, 0.5),
            [1, 1, 1],
            1,
        );
        let ell = 0.4f64;
        let g = SemanticGaussian::isotropic(grid.center(0, 0, 0), 0.8, sigmoid(ell), 1);
        let upstream = vec![1.0, 0.0];
        let cfg = SplatConfig::default();
        let grads = splat_backward(&[g], &grid, &cfg, &upstream).unwrap();
        let a = sigmoid(ell);
        assert_relative_eq!(grads.opacity_logit[0], a * (1.0 - a), epsilon = 1e-12);
        assert_relative_eq!(sigmoid(logit(a)), a, epsilon = 1e-12);
    }
}
