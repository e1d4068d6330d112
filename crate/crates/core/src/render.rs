//! Differentiable depth/RGB rendering along pinhole rays, and velocity/ego
//! warping for neighbor-keyframe supervision.
//!
//! Each Gaussian contributes to a ray at its closed-form peak: with
//! `q(t) = (o + t d - m)^T Sigma^-1 (o + t d - m)`, the peak parameter is
//! `t* = argmin_t q(t)` and the contribution weight is
//! `w = a exp(-0.5 q(t*))`. Contributions are sorted by depth and composited
//! front to back; the expected depth is normalized by the accumulated alpha.
//!
//! Because `t*` minimizes `q` along the ray, gradients of `q(t*)` w.r.t. the
//! Gaussian parameters reduce to the partials of `q` evaluated at the peak
//! point (the `dq/dt = 0` term vanishes).

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::Image;
use crate::params::GaussianGrads;
use crate::quat;
use crate::types::{Pose, SemanticGaussian};

/// Pinhole camera: intrinsics in pixels plus a camera-to-world pose.
/// The camera looks along +z with x right and y down.
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: Pose,
}

impl CameraModel {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::SchemaError("camera focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::SchemaError(
                "camera principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    /// Projects a world point; returns pixel coordinates and camera depth, or
    /// None behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let local = self.pose.inverse().transform_point(p);
        if local.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * local.x / local.z + self.cx,
            self.fy * local.y / local.z + self.cy,
            local.z,
        ))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub dir: Vector3<f64>,
}

/// Ray through exact pixel coordinates (u, v); pass `x + 0.5` for the center
/// of pixel column x.
pub fn ray_for_pixel(camera: &CameraModel, u: f64, v: f64) -> Ray {
    let dir_cam = Vector3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
    let dir = (camera.pose.rotation * dir_cam).normalize();
    Ray {
        origin: camera.pose.translation,
        dir,
    }
}

/// One ray per pixel center, row-major.
pub fn generate_rays(camera: &CameraModel) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(camera.pixel_count());
    for y in 0..camera.height {
        for x in 0..camera.width {
            rays.push(ray_for_pixel(camera, x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    rays
}

#[derive(Debug, Clone, Copy)]
pub struct RenderConfig {
    /// Contributions peaking closer than this are dropped.
    pub near_clip: f64,
    /// Contributions weaker than this are dropped.
    pub response_floor: f64,
    /// Depth normalization floor for `max(alpha, floor)`.
    pub alpha_floor: f64,
    /// Pixels below this alpha carry no valid depth.
    pub valid_alpha: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            near_clip: 0.1,
            response_floor: 1e-3,
            alpha_floor: 1e-6,
            valid_alpha: 0.05,
        }
    }
}

/// One Gaussian's peak contribution to a ray.
#[derive(Debug, Clone, Copy)]
pub struct RayContrib {
    pub gauss: u32,
    /// Peak ray parameter (meters).
    pub t: f64,
    /// Peak response `exp(-0.5 q*)`.
    pub response: f64,
    /// `opacity * response`.
    pub w: f64,
}

/// Forward rendering state kept for the backward pass and RGB compositing.
#[derive(Debug, Clone)]
pub struct RenderForward {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub valid: Vec<bool>,
    /// Per-ray contributions sorted by (t, id).
    pub contribs: Vec<Vec<RayContrib>>,
    rays: Vec<Ray>,
}

impl RenderForward {
    /// Depth as a one-channel image; invalid pixels are 0.
    pub fn depth_image(&self) -> Image {
        let mut img = Image::zeros(self.width, self.height, 1);
        for (i, d) in img.data.iter_mut().enumerate() {
            *d = if self.valid[i] { self.depth[i] as f32 } else { 0.0 };
        }
        img
    }
}

struct GaussPack {
    mean: [f64; 3],
    /// Row-major rotation matrix.
    rot: [f64; 9],
    inv_s2: [f64; 3],
    opacity: f64,
}

fn pack(gaussians: &[SemanticGaussian]) -> Vec<GaussPack> {
    gaussians
        .iter()
        .map(|g| {
            let q = quat::from_unit_quaternion(&g.rotation);
            let r = quat::rotation_matrix(quat::normalize(q));
            GaussPack {
                mean: g.position.into(),
                rot: [
                    r[(0, 0)],
                    r[(0, 1)],
                    r[(0, 2)],
                    r[(1, 0)],
                    r[(1, 1)],
                    r[(1, 2)],
                    r[(2, 0)],
                    r[(2, 1)],
                    r[(2, 2)],
                ],
                inv_s2: [
                    1.0 / (g.scale.x * g.scale.x),
                    1.0 / (g.scale.y * g.scale.y),
                    1.0 / (g.scale.z * g.scale.z),
                ],
                opacity: g.opacity,
            }
        })
        .collect()
}

#[inline]
fn rotate_into(rot: &[f64; 9], d: [f64; 3]) -> [f64; 3] {
    [
        rot[0] * d[0] + rot[3] * d[1] + rot[6] * d[2],
        rot[1] * d[0] + rot[4] * d[1] + rot[7] * d[2],
        rot[2] * d[0] + rot[5] * d[1] + rot[8] * d[2],
    ]
}

fn ray_contributions(packs: &[GaussPack], ray: &Ray, cfg: &RenderConfig) -> Vec<RayContrib> {
    let mut list = Vec::new();
    for (gi, g) in packs.iter().enumerate() {
        let delta = [
            ray.origin.x - g.mean[0],
            ray.origin.y - g.mean[1],
            ray.origin.z - g.mean[2],
        ];
        let dy = rotate_into(&g.rot, [ray.dir.x, ray.dir.y, ray.dir.z]);
        let wy = rotate_into(&g.rot, delta);
        let denom =
            dy[0] * dy[0] * g.inv_s2[0] + dy[1] * dy[1] * g.inv_s2[1] + dy[2] * dy[2] * g.inv_s2[2];
        let b = dy[0] * wy[0] * g.inv_s2[0] + dy[1] * wy[1] * g.inv_s2[1] + dy[2] * wy[2] * g.inv_s2[2];
        let t = -b / denom;
        if t <= cfg.near_clip {
            continue;
        }
        let q0 =
            wy[0] * wy[0] * g.inv_s2[0] + wy[1] * wy[1] * g.inv_s2[1] + wy[2] * wy[2] * g.inv_s2[2];
        let q_peak = (q0 - b * b / denom).max(0.0);
        let response = (-0.5 * q_peak).exp();
        let w = g.opacity * response;
        if w < cfg.response_floor {
            continue;
        }
        list.push(RayContrib {
            gauss: gi as u32,
            t,
            response,
            w,
        });
    }
    list.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap().then(a.gauss.cmp(&b.gauss)));
    list
}

/// Renders depth and alpha along every camera ray by front-to-back
/// compositing of peak responses.
pub fn render_depth(
    gaussians: &[SemanticGaussian],
    camera: &CameraModel,
    cfg: &RenderConfig,
) -> RenderForward {
    let packs = pack(gaussians);
    let rays = generate_rays(camera);
    let contribs: Vec<Vec<RayContrib>> = rays
        .par_iter()
        .map(|ray| ray_contributions(&packs, ray, cfg))
        .collect();
    let n = rays.len();
    let mut depth = vec![0.0f64; n];
    let mut alpha = vec![0.0f64; n];
    let mut valid = vec![false; n];
    depth
        .par_iter_mut()
        .zip(alpha.par_iter_mut())
        .zip(valid.par_iter_mut())
        .enumerate()
        .for_each(|(i, ((depth, alpha), valid))| {
            let mut transmittance = 1.0f64;
            let mut weighted_t = 0.0f64;
            for c in &contribs[i] {
                weighted_t += transmittance * c.w * c.t;
                transmittance *= 1.0 - c.w;
            }
            let a = 1.0 - transmittance;
            *alpha = a;
            *depth = weighted_t / a.max(cfg.alpha_floor);
            *valid = a >= cfg.valid_alpha;
        });
    RenderForward {
        width: camera.width,
        height: camera.height,
        depth,
        alpha,
        valid,
        contribs,
        rays,
    }
}

/// Composites per-Gaussian colors with the weights of a depth render;
/// background is black.
pub fn compose_rgb(forward: &RenderForward, colors: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0f64; 3]; forward.depth.len()];
    out.par_iter_mut().enumerate().for_each(|(i, px)| {
        let mut transmittance = 1.0f64;
        for c in &forward.contribs[i] {
            let col = &colors[c.gauss as usize];
            for k in 0..3 {
                px[k] += transmittance * c.w * col[k];
            }
            transmittance *= 1.0 - c.w;
        }
    });
    out
}

/// RGB image from a depth render's compositing weights. Colors must be
/// supplied per Gaussian.
pub fn render_rgb(
    forward: &RenderForward,
    gaussian_count: usize,
    colors: &[[f64; 3]],
) -> Result<Image> {
    if colors.len() != gaussian_count {
        return Err(Error::MissingAttribute("per-gaussian colors"));
    }
    let pixels = compose_rgb(forward, colors);
    let mut img = Image::zeros(forward.width, forward.height, 3);
    for (i, px) in pixels.iter().enumerate() {
        for k in 0..3 {
            img.data[i * 3 + k] = px[k] as f32;
        }
    }
    Ok(img)
}

/// Gradients produced by the rendering backward, in raw parameter space.
#[derive(Debug, Clone)]
pub struct RenderGradients {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }
}

/// Backward through depth and (optionally) RGB compositing.
///
/// `d_depth` and `d_alpha` are per-pixel upstream gradients (pass zeros where
/// a pixel is masked out); `rgb` optionally supplies the per-Gaussian colors
/// together with the per-pixel RGB upstream gradient.
pub fn render_backward(
    gaussians: &[SemanticGaussian],
    forward: &RenderForward,
    cfg: &RenderConfig,
    d_depth: &[f64],
    d_alpha: Option<&[f64]>,
    rgb: Option<(&[[f64; 3]], &[[f64; 3]])>,
) -> RenderGradients {
    let n = gaussians.len();
    let pixels = forward.depth.len();
    assert_eq!(d_depth.len(), pixels);
    if let Some(da) = d_alpha {
        assert_eq!(da.len(), pixels);
    }
    let packs = pack(gaussians);

    // Pass 1, parallel over rays: per-contribution scalar gradients.
    #[derive(Clone, Copy, Default)]
    struct ContribGrad {
        d_w: f64,
        d_t: f64,
        d_col: [f64; 3],
    }
    let per_ray: Vec<Vec<ContribGrad>> = (0..pixels)
        .into_par_iter()
        .map(|i| {
            let list = &forward.contribs[i];
            if list.is_empty() {
                return Vec::new();
            }
            let mut grads = vec![ContribGrad::default(); list.len()];
            let alpha = forward.alpha[i];
            let denom = alpha.max(cfg.alpha_floor);
            let weighted_t = forward.depth[i] * denom;
            let dl_depth = d_depth[i];
            let d_num = dl_depth / denom;
            let mut d_alpha_total = if alpha > cfg.alpha_floor {
                -dl_depth * weighted_t / (denom * denom)
            } else {
                0.0
            };
            if let Some(da) = d_alpha {
                d_alpha_total += da[i];
            }
            let (d_rgb, colors) = match rgb {
                Some((colors, d_rgb)) => (Some(&d_rgb[i]), Some(colors)),
                None => (None, None),
            };
            // Back-to-front suffix sums of T_j w_j [t_j | 1 | col_j].
            let mut transmittances = Vec::with_capacity(list.len());
            let mut t_acc = 1.0f64;
            for c in list {
                transmittances.push(t_acc);
                t_acc *= 1.0 - c.w;
            }
            let mut suffix_t = 0.0f64;
            let mut suffix_a = 0.0f64;
            let mut suffix_col = [0.0f64; 3];
            for (j, c) in list.iter().enumerate().rev() {
                let tj = transmittances[j];
                let guard = (1.0 - c.w).max(1e-12);
                let mut d_w = d_num * (tj * c.t - suffix_t / guard)
                    + d_alpha_total * (tj - suffix_a / guard);
                if let (Some(d_rgb), Some(colors)) = (d_rgb, colors) {
                    let col = &colors[c.gauss as usize];
                    for k in 0..3 {
                        d_w += d_rgb[k] * (tj * col[k] - suffix_col[k] / guard);
                        grads[j].d_col[k] = d_rgb[k] * tj * c.w;
                    }
                }
                grads[j].d_w = d_w;
                grads[j].d_t = d_num * tj * c.w;
                suffix_t += tj * c.w * c.t;
                suffix_a += tj * c.w;
                for k in 0..3 {
                    suffix_col[k] += tj * c.w * colors.map_or(0.0, |cl| cl[c.gauss as usize][k]);
                }
            }
            grads
        })
        .collect();

    // Transpose: per Gaussian, the (ray, slot) pairs in ascending ray order.
    let mut touched: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
    for (ray, list) in forward.contribs.iter().enumerate() {
        for (slot, c) in list.iter().enumerate() {
            touched[c.gauss as usize].push((ray as u32, slot as u32));
        }
    }

    // Pass 2, parallel over Gaussians: chain into parameter space.
    let mut out = RenderGradients::zeros(n);
    out.position
        .par_iter_mut()
        .zip(out.rotation.par_iter_mut())
        .zip(out.log_scale.par_iter_mut())
        .zip(out.opacity_logit.par_iter_mut())
        .zip(out.color.par_iter_mut())
        .enumerate()
        .for_each(|(g, ((((pos, rot), lscale), opa), col))| {
            let p = &packs[g];
            let mut d_mean = [0.0f64; 3];
            let mut d_rot_mat = [0.0f64; 9];
            let mut d_lscale = [0.0f64; 3];
            let mut d_opacity = 0.0f64;
            for &(ray_id, slot) in &touched[g] {
                let ray = &forward.rays[ray_id as usize];
                let c = &forward.contribs[ray_id as usize][slot as usize];
                let cg = &per_ray[ray_id as usize][slot as usize];
                for k in 0..3 {
                    col[k] += cg.d_col[k];
                }
                // w = a * exp(-0.5 q*), t* = -b / denom.
                d_opacity += cg.d_w * c.response;
                let d_q = -0.5 * c.w * cg.d_w;
                let delta = [
                    ray.origin.x - p.mean[0],
                    ray.origin.y - p.mean[1],
                    ray.origin.z - p.mean[2],
                ];
                let d3 = [ray.dir.x, ray.dir.y, ray.dir.z];
                let dy = rotate_into(&p.rot, d3);
                let wy = rotate_into(&p.rot, delta);
                let denom = dy[0] * dy[0] * p.inv_s2[0]
                    + dy[1] * dy[1] * p.inv_s2[1]
                    + dy[2] * dy[2] * p.inv_s2[2];
                // Peak point in the Gaussian frame: y* = wy + t* dy.
                let ystar = [
                    wy[0] + c.t * dy[0],
                    wy[1] + c.t * dy[1],
                    wy[2] + c.t * dy[2],
                ];
                let ys = [
                    ystar[0] * p.inv_s2[0],
                    ystar[1] * p.inv_s2[1],
                    ystar[2] * p.inv_s2[2],
                ];
                // q* partials at the peak (envelope: dq/dt = 0 there).
                for a3 in 0..3 {
                    let ry = p.rot[a3 * 3] * ys[0] + p.rot[a3 * 3 + 1] * ys[1] + p.rot[a3 * 3 + 2] * ys[2];
                    d_mean[a3] += d_q * (-2.0) * ry;
                }
                for k3 in 0..3 {
                    d_lscale[k3] += d_q * (-2.0) * ystar[k3] * ystar[k3] * p.inv_s2[k3];
                }
                // Delta* in world coordinates for the rotation partial.
                let dstar = [
                    delta[0] + c.t * d3[0],
                    delta[1] + c.t * d3[1],
                    delta[2] + c.t * d3[2],
                ];
                for a3 in 0..3 {
                    for k3 in 0..3 {
                        d_rot_mat[a3 * 3 + k3] += d_q * 2.0 * ys[k3] * dstar[a3];
                    }
                }
                // t* partials.
                let d_t = cg.d_t;
                if d_t != 0.0 {
                    for a3 in 0..3 {
                        let z = p.rot[a3 * 3] * dy[0] * p.inv_s2[0]
                            + p.rot[a3 * 3 + 1] * dy[1] * p.inv_s2[1]
                            + p.rot[a3 * 3 + 2] * dy[2] * p.inv_s2[2];
                        d_mean[a3] += d_t * z / denom;
                    }
                    for k3 in 0..3 {
                        d_lscale[k3] += d_t * 2.0 * dy[k3] * p.inv_s2[k3] * ystar[k3] / denom;
                    }
                    for a3 in 0..3 {
                        for k3 in 0..3 {
                            d_rot_mat[a3 * 3 + k3] += d_t
                                * (-p.inv_s2[k3])
                                * (d3[a3] * (wy[k3] + 2.0 * c.t * dy[k3]) + delta[a3] * dy[k3])
                                / denom;
                        }
                    }
                }
            }
            *pos = Vector3::from(d_mean);
            let q = quat::from_unit_quaternion(&gaussians[g].rotation);
            let uq = quat::normalize(q);
            let jac = quat::rotation_matrix_jacobian(uq);
            let mut grad_unit = [0.0f64; 4];
            for (k, jm) in jac.iter().enumerate() {
                let mut sum = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        sum += d_rot_mat[a * 3 + b] * jm[(a, b)];
                    }
                }
                grad_unit[k] = sum;
            }
            *rot = quat::normalize_backward(q, grad_unit);
            *lscale = Vector3::from(d_lscale);
            let a = gaussians[g].opacity;
            *opa = d_opacity * a * (1.0 - a);
        });
    out
}

/// Masked mean absolute error over depth; returns the loss and the gradient
/// w.r.t. the predictions (zero on masked-out pixels).
pub fn depth_loss(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    assert_eq!(pred.len(), target.len());
    assert_eq!(pred.len(), mask.len());
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        if mask[i] {
            let diff = pred[i] - target[i];
            loss += diff.abs();
            grad[i] = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            } / count as f64;
        }
    }
    Ok((loss / count as f64, grad))
}

/// Masked mean absolute error over RGB pixels (mean over valid
/// pixel-channel entries).
pub fn rgb_loss(
    pred: &[[f64; 3]],
    target: &[[f64; 3]],
    mask: &[bool],
) -> Result<(f64, Vec<[f64; 3]>)> {
    assert_eq!(pred.len(), target.len());
    assert_eq!(pred.len(), mask.len());
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let denom = (count * 3) as f64;
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; pred.len()];
    for i in 0..pred.len() {
        if mask[i] {
            for k in 0..3 {
                let diff = pred[i][k] - target[i][k];
                loss += diff.abs();
                grad[i][k] = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                } / denom;
            }
        }
    }
    Ok((loss / denom, grad))
}

/// Moves Gaussians by their own velocities over `dt`, then applies the ego
/// pose change: `position' = R (position + v dt) + t`. Rotations compose with
/// the ego rotation; velocities rotate; scales, opacities and classes are
/// unchanged.
pub fn warp_gaussians(gaussians: &[SemanticGaussian], dt: f64, ego: &Pose) -> Vec<SemanticGaussian> {
    gaussians
        .iter()
        .map(|g| SemanticGaussian {
            position: ego.rotation * (g.position + g.velocity * dt) + ego.translation,
            rotation: ego.rotation * g.rotation,
            scale: g.scale,
            opacity: g.opacity,
            classes: g.classes.clone(),
            velocity: ego.rotation * g.velocity,
        })
        .collect()
}

/// Pulls gradients on warped Gaussians back to the originals. `original` must
/// be the pre-warp set; `warped_grads` the raw-space gradients computed on
/// `warp_gaussians(original, dt, ego)`.
pub fn warp_backward(
    original: &[SemanticGaussian],
    dt: f64,
    ego: &Pose,
    warped_grads: &GaussianGrads,
) -> GaussianGrads {
    assert_eq!(original.len(), warped_grads.len());
    let mut out = GaussianGrads::zeros(original.len(), warped_grads.class_count);
    let rot_t = ego.rotation.inverse();
    let ego_q = quat::from_unit_quaternion(&ego.rotation);
    let left = quat::left_mul_matrix(ego_q).transpose();
    for (i, g) in original.iter().enumerate() {
        let d_pos_warped = warped_grads.position[i];
        let d_pos = rot_t * d_pos_warped;
        out.position[i] = d_pos;
        out.velocity[i] = d_pos * dt + rot_t * warped_grads.velocity[i];
        // rotation' = ego_q ⊗ q is linear in q.
        let gw = warped_grads.rotation[i];
        let pulled = left * nalgebra::Vector4::new(gw[0], gw[1], gw[2], gw[3]);
        let q = quat::from_unit_quaternion(&g.rotation);
        out.rotation[i] =
            quat::normalize_backward(q, [pulled[0], pulled[1], pulled[2], pulled[3]]);
        out.log_scale[i] = warped_grads.log_scale[i];
        out.opacity_logit[i] = warped_grads.opacity_logit[i];
        out.color[i] = warped_grads.color[i];
        let c = warped_grads.class_count;
        out.class_logits[i * c..(i + 1) * c]
            .copy_from_slice(&warped_grads.class_logits[i * c..(i + 1) * c]);
    }
    out
}
