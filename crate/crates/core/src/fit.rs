//! Two-stage desk-scale fitting: geometry pretraining (denoise + rendering
//! losses) and streaming occupancy fitting (cross-entropy through the
//! blocked splatting kernels), optimizing query/Gaussian parameters directly.
//!
//! Scenes are world-fixed: Gaussians and queries live in world coordinates,
//! cameras ride the ego, and the per-Gaussian velocity absorbs object motion.
//! Warping to a neighbor keyframe therefore translates by `velocity * dt`
//! with an identity ego change; the ego poses enter through the queue
//! coordinate plumbing and the per-frame camera placement.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocked::SplatEngine;
use crate::error::{Error, Result};
use crate::metrics::{self, RayIouMetrics, VoxelMetrics, RAYIOU_THRESHOLDS};
use crate::optim::Adam;
use crate::params::{
    backprop_to_queries, logit, GaussianGrads, QueryGrads, QueryParamSet, RawChild, RawQuery,
};
use crate::propagation::{select_queries, QueryQueue};
use crate::render::{
    self, depth_loss, render_backward, render_depth, rgb_loss, warp_backward, warp_gaussians,
    RenderConfig,
};
use crate::sampling::{denoise_loss, pretrain_loss, DenoiseBatch, LossWeights};
use crate::scene::{FrameData, SyntheticScene};
use crate::splat::SplatConfig;
use crate::types::{Pose, SceneQuery, SemanticGaussian, VoxelGrid};

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub steps: usize,
    /// Frames to pretrain on (each fits its own query set).
    pub frames: Vec<usize>,
    /// Noise bound e in meters.
    pub noise_bound: f64,
    pub lambda_denoise: f64,
    pub lambda_depth: f64,
    pub lambda_rgb: f64,
    /// Render-supervise the +/- 1 keyframes through the velocity warp.
    pub neighbor_frames: bool,
    pub velocity_learnable: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 400,
            frames: vec![0],
            noise_bound: 1.0,
            lambda_denoise: 1.0,
            lambda_depth: 1.0,
            lambda_rgb: 0.3,
            neighbor_frames: true,
            velocity_learnable: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    None,
    TopK,
    DeltaTopK,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub steps_per_frame: usize,
    /// Fraction of empty voxels supervised per step.
    pub empty_fraction: f64,
    /// Inverse-frequency class weight clip.
    pub balance_clip: f64,
    /// Weight of the neighbor-keyframe occupancy loss.
    pub neighbor_weight: f64,
    pub neighbor_frames: bool,
    pub velocity_learnable: bool,
    pub propagation: PropagationMode,
    pub propagated_fraction: f64,
    pub queue_capacity: usize,
    /// Separation at selection time, meters before scene scaling.
    pub delta_inference: f64,
    /// Upper bound of the training-time jitter U(0, max), before scaling.
    pub delta_train_max: f64,
    /// Jitter delta per frame instead of using the inference value.
    pub delta_jitter: bool,
    /// Scene-extent scaling of the deltas; None derives
    /// `min(extent_x, extent_y) / 100`.
    pub delta_scale: Option<f64>,
    /// Synthetic ray pattern (rings, azimuth steps) for per-frame RayIoU.
    pub metric_rays: [usize; 2],
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps_per_frame: 600,
            empty_fraction: 0.1,
            balance_clip: 10.0,
            neighbor_weight: 0.5,
            neighbor_frames: true,
            velocity_learnable: true,
            propagation: PropagationMode::DeltaTopK,
            propagated_fraction: 0.5,
            queue_capacity: 4,
            delta_inference: 1.6,
            delta_train_max: 3.0,
            delta_jitter: false,
            delta_scale: None,
            metric_rays: [16, 120],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub seed: u64,
    /// Query count K.
    pub queries: usize,
    /// Gaussians per query J.
    pub children_per_query: usize,
    pub lr_geometry: f64,
    pub lr_logit: f64,
    pub cosine_decay: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Child offsets are clamped into this radius around the anchor.
    pub child_offset_max: f64,
    pub init_scale: f64,
    pub init_opacity: f64,
    /// Initial child offset spread, meters.
    pub child_spread: f64,
    pub divergence_threshold: f64,
    pub cutoff_sigma: f64,
    pub opacity_weighted: bool,
    pub weight_floor: f64,
    pub deterministic: bool,
    pub near_clip: f64,
    pub response_floor: f64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            queries: 80,
            children_per_query: 5,
            lr_geometry: 1e-2,
            lr_logit: 1e-1,
            cosine_decay: true,
            scale_min: 0.05,
            scale_max: 4.0,
            child_offset_max: 2.0,
            init_scale: 0.22,
            init_opacity: 0.6,
            child_spread: 0.2,
            divergence_threshold: 1e6,
            cutoff_sigma: 3.0,
            opacity_weighted: true,
            weight_floor: 1e-12,
            deterministic: true,
            near_clip: 0.1,
            response_floor: 1e-3,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }
}

impl FitConfig {
    pub fn splat_config(&self) -> SplatConfig {
        SplatConfig {
            cutoff_sigma: self.cutoff_sigma,
            opacity_weighted: self.opacity_weighted,
            weight_floor: self.weight_floor,
            deterministic: self.deterministic,
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            near_clip: self.near_clip,
            response_floor: self.response_floor,
            ..RenderConfig::default()
        }
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xd1b5_4a32_d192_ed03)
}

// ---------------------------------------------------------------------------
// flat parameter packing

/// Entries per query: offset(3) + opacity(1) + velocity(3) + classes(C) +
/// J * [offset(3) + rotation(4) + log_scale(3) + opacity(1) + color(3)].
fn query_stride(class_count: usize, children: usize) -> usize {
    7 + class_count + 14 * children
}

fn flat_len(params: &QueryParamSet) -> usize {
    params
        .queries
        .iter()
        .map(|q| query_stride(params.class_count, q.children.len()))
        .sum()
}

fn pack(params: &QueryParamSet) -> Vec<f64> {
    let mut flat = Vec::with_capacity(flat_len(params));
    for q in &params.queries {
        flat.extend_from_slice(&q.offset);
        flat.push(q.opacity_logit);
        flat.extend_from_slice(&q.velocity);
        flat.extend_from_slice(&q.class_logits);
        for c in &q.children {
            flat.extend_from_slice(&c.offset);
            flat.extend_from_slice(&c.rotation);
            flat.extend_from_slice(&c.log_scale);
            flat.push(c.opacity_logit);
            flat.extend_from_slice(&c.color);
        }
    }
    flat
}

fn unpack(params: &mut QueryParamSet, flat: &[f64]) {
    let mut i = 0usize;
    for q in &mut params.queries {
        q.offset.copy_from_slice(&flat[i..i + 3]);
        q.opacity_logit = flat[i + 3];
        q.velocity.copy_from_slice(&flat[i + 4..i + 7]);
        i += 7;
        let c = q.class_logits.len();
        q.class_logits.copy_from_slice(&flat[i..i + c]);
        i += c;
        for c in &mut q.children {
            c.offset.copy_from_slice(&flat[i..i + 3]);
            c.rotation.copy_from_slice(&flat[i + 3..i + 7]);
            c.log_scale.copy_from_slice(&flat[i + 7..i + 10]);
            c.opacity_logit = flat[i + 10];
            c.color.copy_from_slice(&flat[i + 11..i + 14]);
            i += 14;
        }
    }
    debug_assert_eq!(i, flat.len());
}

fn pack_grads(params: &QueryParamSet, grads: &QueryGrads) -> Vec<f64> {
    let c = params.class_count;
    let mut flat = Vec::with_capacity(flat_len(params));
    let mut child = 0usize;
    for (qi, q) in params.queries.iter().enumerate() {
        flat.extend_from_slice(grads.offset[qi].as_slice());
        flat.push(grads.opacity_logit[qi]);
        flat.extend_from_slice(grads.velocity[qi].as_slice());
        flat.extend_from_slice(&grads.class_logits[qi * c..(qi + 1) * c]);
        for _ in 0..q.children.len() {
            flat.extend_from_slice(grads.child_offset[child].as_slice());
            flat.extend_from_slice(&grads.child_rotation[child]);
            flat.extend_from_slice(grads.child_log_scale[child].as_slice());
            flat.push(grads.child_opacity_logit[child]);
            flat.extend_from_slice(&grads.child_color[child]);
            child += 1;
        }
    }
    flat
}

fn lr_vector(params: &QueryParamSet, cfg: &FitConfig, velocity_learnable: bool) -> Vec<f64> {
    let mut lr = Vec::with_capacity(flat_len(params));
    let vel_lr = if velocity_learnable { cfg.lr_geometry } else { 0.0 };
    for q in &params.queries {
        lr.extend_from_slice(&[cfg.lr_geometry; 3]);
        lr.push(cfg.lr_logit);
        lr.extend_from_slice(&[vel_lr; 3]);
        lr.extend(std::iter::repeat(cfg.lr_logit).take(params.class_count));
        for _ in 0..q.children.len() {
            lr.extend_from_slice(&[cfg.lr_geometry; 3]); // offset
            lr.extend_from_slice(&[cfg.lr_geometry; 4]); // rotation
            lr.extend_from_slice(&[cfg.lr_geometry; 3]); // log scale
            lr.push(cfg.lr_logit); // opacity
            lr.extend_from_slice(&[cfg.lr_logit; 3]); // color
        }
    }
    lr
}

/// Post-step projection: clamp logits and log-scales into their valid
/// ranges, renormalize raw quaternions, clamp colors to [0, 1], and keep
/// anchors inside the grid and child offsets bounded.
fn project(params: &mut QueryParamSet, flat: &mut [f64], cfg: &FitConfig, grid: &VoxelGrid) {
    unpack(params, flat);
    let logit_hi = logit(1.0);
    let logit_lo = logit(0.0);
    let ls_lo = cfg.scale_min.ln();
    let ls_hi = cfg.scale_max.ln();
    let hi = grid.max_corner();
    for q in &mut params.queries {
        q.opacity_logit = q.opacity_logit.clamp(logit_lo, logit_hi);
        for a in 0..3 {
            let anchor = (q.base_position[a] + q.offset[a]).clamp(grid.origin[a], hi[a]);
            q.offset[a] = anchor - q.base_position[a];
        }
        for c in &mut q.children {
            c.opacity_logit = c.opacity_logit.clamp(logit_lo, logit_hi);
            for k in 0..3 {
                c.log_scale[k] = c.log_scale[k].clamp(ls_lo, ls_hi);
                c.offset[k] = c.offset[k].clamp(-cfg.child_offset_max, cfg.child_offset_max);
                c.color[k] = c.color[k].clamp(0.0, 1.0);
            }
            let n = crate::quat::norm(c.rotation);
            if n > 1e-12 {
                for k in 0..4 {
                    c.rotation[k] /= n;
                }
            } else {
                c.rotation = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }
    flat.copy_from_slice(&pack(params));
}

// ---------------------------------------------------------------------------
// initialization

/// Radical-inverse Halton sequence value.
fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

fn default_children(cfg: &FitConfig, rng: &mut ChaCha8Rng) -> Vec<RawChild> {
    (0..cfg.children_per_query)
        .map(|_| RawChild {
            offset: [
                rng.gen_range(-cfg.child_spread..cfg.child_spread),
                rng.gen_range(-cfg.child_spread..cfg.child_spread),
                rng.gen_range(-cfg.child_spread..cfg.child_spread),
            ],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [cfg.init_scale.ln(); 3],
            opacity_logit: logit(cfg.init_opacity),
            color: [0.5; 3],
        })
        .collect()
}

/// Stage-1 initialization: queries at noised FPS samples of the surface
/// points, offsets zero.
pub fn init_queries_from_points(
    points: &[Vector3<f64>],
    class_count: usize,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(QueryParamSet, DenoiseBatch)> {
    let batch = DenoiseBatch::build(points, cfg.queries, cfg.stage1.noise_bound, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1, 0));
    let queries = batch
        .noised_init
        .iter()
        .map(|p| RawQuery {
            base_position: (*p).into(),
            offset: [0.0; 3],
            opacity_logit: logit(cfg.init_opacity),
            velocity: [0.0; 3],
            class_logits: vec![0.0; class_count],
            children: default_children(cfg, &mut rng),
        })
        .collect();
    Ok((
        QueryParamSet {
            class_count,
            queries,
        },
        batch,
    ))
}

/// Stage-2 learnable-location stand-in: seeded low-discrepancy positions
/// covering the grid volume.
pub fn init_queries_low_discrepancy(
    grid: &VoxelGrid,
    count: usize,
    class_count: usize,
    cfg: &FitConfig,
    seed: u64,
) -> QueryParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2, 0));
    let hi = grid.max_corner();
    let offset = seed % 1013;
    let queries = (0..count)
        .map(|i| {
            let idx = i as u64 + 1 + offset;
            let p = [
                grid.origin.x + halton(idx, 2) * (hi.x - grid.origin.x),
                grid.origin.y + halton(idx, 3) * (hi.y - grid.origin.y),
                grid.origin.z + halton(idx, 5) * (hi.z - grid.origin.z),
            ];
            RawQuery {
                base_position: p,
                offset: [0.0; 3],
                opacity_logit: logit(cfg.init_opacity),
                velocity: [0.0; 3],
                class_logits: vec![0.0; class_count],
                children: default_children(cfg, &mut rng),
            }
        })
        .collect();
    QueryParamSet {
        class_count,
        queries,
    }
}

/// Re-encodes a constrained query (from the propagation queue) into raw form.
fn re_encode(q: &SceneQuery, class_count: usize) -> RawQuery {
    RawQuery {
        base_position: q.position.into(),
        offset: q.offset.into(),
        opacity_logit: logit(q.opacity),
        velocity: q.velocity.into(),
        class_logits: crate::params::distribution_to_logits(&q.classes),
        children: q
            .children
            .iter()
            .map(|c| RawChild {
                offset: c.offset.into(),
                rotation: crate::quat::from_unit_quaternion(&c.rotation),
                log_scale: [c.scale.x.ln(), c.scale.y.ln(), c.scale.z.ln()],
                opacity_logit: logit(c.opacity),
                color: [0.5; 3],
            })
            .collect(),
    }
    .clamped(class_count)
}

impl RawQuery {
    fn clamped(mut self, class_count: usize) -> RawQuery {
        debug_assert_eq!(self.class_logits.len(), class_count);
        for v in self.class_logits.iter_mut() {
            *v = v.clamp(-30.0, 30.0);
        }
        self
    }
}

// ---------------------------------------------------------------------------
// gradient plumbing

fn splat_to_gaussian_grads(sg: crate::splat::SplatGradients) -> GaussianGrads {
    let n = sg.len();
    GaussianGrads {
        position: sg.position,
        rotation: sg.rotation,
        log_scale: sg.log_scale,
        opacity_logit: sg.opacity_logit,
        class_logits: sg.class_logits,
        color: vec![[0.0; 3]; n],
        velocity: vec![Vector3::zeros(); n],
        class_count: sg.class_count,
    }
}

fn render_to_gaussian_grads(rg: render::RenderGradients, class_count: usize) -> GaussianGrads {
    let n = rg.position.len();
    GaussianGrads {
        position: rg.position,
        rotation: rg.rotation,
        log_scale: rg.log_scale,
        opacity_logit: rg.opacity_logit,
        class_logits: vec![0.0; n * class_count],
        color: rg.color,
        velocity: vec![Vector3::zeros(); n],
        class_count,
    }
}

// ---------------------------------------------------------------------------
// stage 1

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossSample {
    pub step: usize,
    pub total: f64,
    pub denoise: f64,
    pub depth: f64,
    pub rgb: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Report {
    pub frame: usize,
    pub losses: Vec<LossSample>,
    pub final_denoise: f64,
    pub final_depth_mae: f64,
    /// Mean |target - (p + o)| over queries.
    pub mean_offset_error: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Frame {
    pub frame: usize,
    pub params: QueryParamSet,
    pub report: Stage1Report,
}

/// Depth MAE of the current Gaussians against one frame's depth maps.
fn frame_depth_mae(
    gaussians: &[SemanticGaussian],
    frame: &FrameData,
    rcfg: &RenderConfig,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (camera, target) in frame.cameras.iter().zip(&frame.depth_maps) {
        let fwd = render_depth(gaussians, camera, rcfg);
        for i in 0..fwd.depth.len() {
            let t = target.data[i] as f64;
            if t > 0.0 && fwd.valid[i] {
                total += (fwd.depth[i] - t).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        total / count as f64
    }
}

/// Pretrains one query set per configured frame.
pub fn fit_stage1(scene: &SyntheticScene, cfg: &FitConfig) -> Result<Vec<Stage1Frame>> {
    let mut out = Vec::new();
    for &f in &cfg.stage1.frames {
        if f >= scene.frames.len() {
            return Err(Error::SchemaError(format!(
                "stage1 frame {} out of range ({} frames)",
                f,
                scene.frames.len()
            )));
        }
        out.push(fit_stage1_frame(scene, f, cfg)?);
    }
    Ok(out)
}

fn fit_stage1_frame(scene: &SyntheticScene, f: usize, cfg: &FitConfig) -> Result<Stage1Frame> {
    let s1 = &cfg.stage1;
    let frame = &scene.frames[f];
    let class_count = scene.spec.grid.class_count;
    let (mut params, batch) =
        init_queries_from_points(&frame.points, class_count, cfg, mix_seed(cfg.seed, 10, f as u64))?;
    let rcfg = cfg.render_config();
    let weights = LossWeights {
        denoise: s1.lambda_denoise,
        depth: s1.lambda_depth,
        rgb: s1.lambda_rgb,
    };
    let dt = scene.spec.frame_dt;

    let mut flat = pack(&params);
    let lr = lr_vector(&params, cfg, s1.velocity_learnable);
    let mut adam = Adam::new(flat.len(), cfg.cosine_decay.then_some(s1.steps));
    let mut losses = Vec::with_capacity(s1.steps);

    // Neighbor offsets: current frame plus +/-1 keyframes when available.
    let mut render_targets = vec![0i64];
    if s1.neighbor_frames {
        if f > 0 {
            render_targets.push(-1);
        }
        if f + 1 < scene.frames.len() {
            render_targets.push(1);
        }
    }

    for step in 0..s1.steps {
        unpack(&mut params, &flat);
        let (gaussians, colors) = params.decode_gaussians();
        let n = gaussians.len();
        let mut ggrads = GaussianGrads::zeros(n, class_count);
        let mut qgrads = QueryGrads::zeros(&params);

        // Denoising term on the query anchors.
        let offsets: Vec<Vector3<f64>> = params
            .queries
            .iter()
            .map(|q| Vector3::from(q.offset))
            .collect();
        let (l_denoise, g_denoise) = denoise_loss(&batch, &offsets);
        for (qi, g) in g_denoise.iter().enumerate() {
            qgrads.offset[qi] += g * s1.lambda_denoise;
        }

        // Depth/RGB rendering terms on the current and neighbor keyframes.
        let render_active = s1.lambda_depth > 0.0 || s1.lambda_rgb > 0.0;
        let mut l_depth = 0.0;
        let mut l_rgb = 0.0;
        for &df in render_targets.iter().filter(|_| render_active) {
            let nf = (f as i64 + df) as usize;
            let target_frame = &scene.frames[nf];
            let warped = if df == 0 {
                gaussians.clone()
            } else {
                warp_gaussians(&gaussians, df as f64 * dt, &Pose::identity())
            };
            let mut frame_grads = GaussianGrads::zeros(n, class_count);
            for (camera, (target_depth, target_rgb)) in target_frame
                .cameras
                .iter()
                .zip(target_frame.depth_maps.iter().zip(&target_frame.rgb_maps))
            {
                let fwd = render_depth(&warped, camera, &rcfg);
                let pixels = fwd.depth.len();
                let target: Vec<f64> = target_depth.data.iter().map(|&v| v as f64).collect();
                let mask: Vec<bool> = (0..pixels)
                    .map(|i| target[i] > 0.0 && fwd.valid[i])
                    .collect();
                let mut d_depth = vec![0.0; pixels];
                if mask.iter().any(|&m| m) {
                    let (l, g) = depth_loss(&fwd.depth, &target, &mask)?;
                    l_depth += l;
                    for i in 0..pixels {
                        d_depth[i] = g[i] * s1.lambda_depth;
                    }
                }
                let mut rgb_pair = None;
                let mut d_rgb_store;
                if s1.lambda_rgb > 0.0 {
                    let pred = render::compose_rgb(&fwd, &colors);
                    let target_px: Vec<[f64; 3]> = (0..pixels)
                        .map(|i| {
                            [
                                target_rgb.data[i * 3] as f64,
                                target_rgb.data[i * 3 + 1] as f64,
                                target_rgb.data[i * 3 + 2] as f64,
                            ]
                        })
                        .collect();
                    let all = vec![true; pixels];
                    let (l, g) = rgb_loss(&pred, &target_px, &all)?;
                    l_rgb += l;
                    d_rgb_store = g;
                    for px in d_rgb_store.iter_mut() {
                        for k in 0..3 {
                            px[k] *= s1.lambda_rgb;
                        }
                    }
                    rgb_pair = Some(d_rgb_store);
                }
                let rg = render_backward(
                    &warped,
                    &fwd,
                    &rcfg,
                    &d_depth,
                    None,
                    rgb_pair.as_deref().map(|d| (colors.as_slice(), d)),
                );
                frame_grads.add_scaled(&render_to_gaussian_grads(rg, class_count), 1.0);
            }
            let pulled = if df == 0 {
                frame_grads
            } else {
                warp_backward(&gaussians, df as f64 * dt, &Pose::identity(), &frame_grads)
            };
            ggrads.add_scaled(&pulled, 1.0);
        }

        let total = pretrain_loss(&weights, l_denoise, l_depth, l_rgb)?;
        if !total.is_finite() || total > cfg.divergence_threshold {
            return Err(Error::Divergence { step, loss: total });
        }
        losses.push(LossSample {
            step,
            total,
            denoise: l_denoise,
            depth: l_depth,
            rgb: l_rgb,
        });

        backprop_to_queries(&params, &ggrads, &mut qgrads);
        let grad_flat = pack_grads(&params, &qgrads);
        adam.step(&mut flat, &grad_flat, &lr);
        project(&mut params, &mut flat, cfg, &frame.gt);
    }

    unpack(&mut params, &flat);
    let (gaussians, _) = params.decode_gaussians();
    let offsets: Vec<Vector3<f64>> = params
        .queries
        .iter()
        .map(|q| Vector3::from(q.offset))
        .collect();
    let (final_denoise, _) = denoise_loss(&batch, &offsets);
    let mean_offset_error = batch
        .clean_targets
        .iter()
        .zip(params.queries.iter())
        .map(|(t, q)| (t - (Vector3::from(q.base_position) + Vector3::from(q.offset))).norm())
        .sum::<f64>()
        / params.queries.len() as f64;
    let report = Stage1Report {
        frame: f,
        losses,
        final_denoise,
        final_depth_mae: frame_depth_mae(&gaussians, frame, &cfg.render_config()),
        mean_offset_error,
    };
    Ok(Stage1Frame {
        frame: f,
        params,
        report,
    })
}

// ---------------------------------------------------------------------------
// stage 2

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub voxel: VoxelMetrics,
    pub ray: RayIouMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Report {
    pub frames: Vec<FrameReport>,
    pub mean_iou: f64,
    pub mean_miou: f64,
    pub mean_rayiou: f64,
}

/// Inverse-frequency class weights over labels 0..=C, clamped to
/// `[1, balance_clip]` so rare classes are boosted at most `balance_clip`
/// times and majority classes are never pushed below parity. Absent labels
/// get weight 0.
fn class_weights(gt: &VoxelGrid, clip: f64) -> Vec<f64> {
    let bins = gt.class_count + 1;
    let mut counts = vec![0u64; bins];
    for &l in &gt.labels {
        counts[l as usize] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    let mean = gt.voxel_count() as f64 / present as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                (mean / c as f64).clamp(1.0, clip)
            }
        })
        .collect()
}

/// Cross-entropy between the field rows and one-hot gt labels over the
/// supervised voxels: every nonempty voxel plus a sampled subset of the
/// empty ones. Sampled empty terms carry an importance factor of
/// `1 / empty_fraction` so the loss stays an unbiased estimate of the
/// full-grid weighted cross-entropy. Returns the loss and the per-voxel
/// upstream gradient.
fn ce_loss(
    gt: &VoxelGrid,
    rows: &[f64],
    weights: &[f64],
    empty_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, Vec<f64>) {
    const EPS: f64 = 1e-9;
    let c = gt.class_count;
    let row_len = c + 1;
    let mut upstream = vec![0.0; rows.len()];
    let importance = 1.0 / empty_fraction.clamp(1e-6, 1.0);
    // Pick the supervised set first so the normalizing mass is known.
    let mut mass = 0.0f64;
    let mut chosen = vec![false; gt.voxel_count()];
    for v in 0..gt.voxel_count() {
        if gt.labels[v] as usize != c {
            chosen[v] = true;
            mass += 1.0;
        } else if rng.gen_bool(empty_fraction) {
            chosen[v] = true;
            mass += importance;
        }
    }
    if mass == 0.0 {
        return (0.0, upstream);
    }
    let norm = 1.0 / mass;
    let mut loss = 0.0;
    for v in 0..gt.voxel_count() {
        if !chosen[v] {
            continue;
        }
        let l = gt.labels[v] as usize;
        let mut w = weights[l];
        if l == c {
            w *= importance;
        }
        let p = rows[v * row_len + l];
        loss += -w * (p + EPS).ln();
        upstream[v * row_len + l] = -w / (p + EPS) * norm;
    }
    (loss * norm, upstream)
}

fn delta_for_frame(scene: &SyntheticScene, cfg: &FitConfig, frame: usize) -> f64 {
    let s2 = &cfg.stage2;
    let grid = &scene.spec.grid;
    let scale = s2.delta_scale.unwrap_or_else(|| {
        let ex = grid.voxel_size[0] * grid.dims[0] as f64;
        let ey = grid.voxel_size[1] * grid.dims[1] as f64;
        ex.min(ey) / 100.0
    });
    if s2.delta_jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 77, frame as u64));
        rng.gen_range(0.0..s2.delta_train_max) * scale
    } else {
        s2.delta_inference * scale
    }
}

fn to_ego_local(q: &SceneQuery, ego: &Pose) -> SceneQuery {
    let inv = ego.inverse();
    let mut q = q.clone();
    q.position = inv.transform_point(&q.position);
    q.velocity = inv.rotate_vector(&q.velocity);
    q
}

fn to_world(q: &SceneQuery, ego: &Pose) -> SceneQuery {
    let mut q = q.clone();
    q.position = ego.transform_point(&q.position);
    q.velocity = ego.rotate_vector(&q.velocity);
    q
}

/// Streaming occupancy fitting over all frames. `init` seeds the first
/// frame's queries (typically the stage-1 output); later frames mix
/// propagated queries with fresh low-discrepancy ones.
pub fn fit_stage2(
    scene: &SyntheticScene,
    init: Option<&QueryParamSet>,
    cfg: &FitConfig,
) -> Result<(QueryParamSet, Stage2Report)> {
    let s2 = &cfg.stage2;
    let class_count = scene.spec.grid.class_count;
    let scfg = cfg.splat_config();
    let dt = scene.spec.frame_dt;
    let mut queue = QueryQueue::new(s2.queue_capacity);
    let mut reports = Vec::with_capacity(scene.frames.len());
    let mut params = QueryParamSet {
        class_count,
        queries: Vec::new(),
    };

    for (f, frame) in scene.frames.iter().enumerate() {
        // --- initialize this frame's query set ---
        let mut queries: Vec<RawQuery> = Vec::with_capacity(cfg.queries);
        if f == 0 {
            if let Some(init) = init {
                if init.class_count != class_count {
                    return Err(Error::ShapeMismatch(format!(
                        "init has {} classes, scene {}",
                        init.class_count, class_count
                    )));
                }
                queries.extend(init.queries.iter().cloned());
            }
        } else if s2.propagation != PropagationMode::None && !queue.is_empty() {
            let k_prop = ((cfg.queries as f64 * s2.propagated_fraction).round() as usize).max(1);
            let history = queue.gather_history(&frame.ego);
            // Newest entries first.
            for q in history.iter().rev().take(k_prop) {
                queries.push(re_encode(&to_world(q, &frame.ego), class_count));
            }
        }
        if queries.len() > cfg.queries {
            queries.truncate(cfg.queries);
        }
        let fresh = init_queries_low_discrepancy(
            &frame.gt,
            cfg.queries - queries.len(),
            class_count,
            cfg,
            mix_seed(cfg.seed, 20, f as u64),
        );
        queries.extend(fresh.queries);
        params = QueryParamSet {
            class_count,
            queries,
        };

        // --- optimize against this frame (plus neighbors via warp) ---
        let weights = class_weights(&frame.gt, s2.balance_clip);
        let mut flat = pack(&params);
        let lr = lr_vector(&params, cfg, s2.velocity_learnable);
        let mut adam = Adam::new(flat.len(), cfg.cosine_decay.then_some(s2.steps_per_frame));
        let mut initial_loss = f64::NAN;
        let mut final_loss = f64::NAN;

        let mut neighbor_frames: Vec<i64> = Vec::new();
        if s2.neighbor_frames && s2.neighbor_weight > 0.0 {
            if f > 0 {
                neighbor_frames.push(-1);
            }
            if f + 1 < scene.frames.len() {
                neighbor_frames.push(1);
            }
        }

        for step in 0..s2.steps_per_frame {
            unpack(&mut params, &flat);
            let (gaussians, _) = params.decode_gaussians();
            let mut ggrads = GaussianGrads::zeros(gaussians.len(), class_count);

            let engine = SplatEngine::new(&gaussians, &frame.gt, &scfg)?;
            let rows = engine.field_rows_f64();
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, f as u64, step as u64));
            let (mut total, upstream) =
                ce_loss(&frame.gt, &rows, &weights, s2.empty_fraction, &mut rng);
            let sg = engine.backward(&upstream)?;
            ggrads.add_scaled(&splat_to_gaussian_grads(sg), 1.0);

            for &df in &neighbor_frames {
                let nf = (f as i64 + df) as usize;
                let ngt = &scene.frames[nf].gt;
                let warped = warp_gaussians(&gaussians, df as f64 * dt, &Pose::identity());
                let nengine = SplatEngine::new(&warped, ngt, &scfg)?;
                let nrows = nengine.field_rows_f64();
                let nweights = class_weights(ngt, s2.balance_clip);
                let mut nrng = ChaCha8Rng::seed_from_u64(mix_seed(
                    cfg.seed,
                    0x8000 + nf as u64,
                    step as u64,
                ));
                let (l_n, mut up_n) =
                    ce_loss(ngt, &nrows, &nweights, s2.empty_fraction, &mut nrng);
                total += s2.neighbor_weight * l_n;
                for u in up_n.iter_mut() {
                    *u *= s2.neighbor_weight;
                }
                let sg_n = nengine.backward(&up_n)?;
                let pulled = warp_backward(
                    &gaussians,
                    df as f64 * dt,
                    &Pose::identity(),
                    &splat_to_gaussian_grads(sg_n),
                );
                ggrads.add_scaled(&pulled, 1.0);
            }

            if !total.is_finite() || total > cfg.divergence_threshold {
                return Err(Error::Divergence { step, loss: total });
            }
            if step == 0 {
                initial_loss = total;
            }
            final_loss = total;

            let mut qgrads = QueryGrads::zeros(&params);
            backprop_to_queries(&params, &ggrads, &mut qgrads);
            let grad_flat = pack_grads(&params, &qgrads);
            adam.step(&mut flat, &grad_flat, &lr);
            project(&mut params, &mut flat, cfg, &frame.gt);
        }
        unpack(&mut params, &flat);

        // --- evaluate ---
        let (gaussians, _) = params.decode_gaussians();
        let engine = SplatEngine::new(&gaussians, &frame.gt, &scfg)?;
        let pred = engine.field().to_label_grid(&frame.gt);
        let voxel = metrics::iou_miou(&pred, &frame.gt)?;
        let sensor = frame
            .ego
            .transform_point(&Vector3::from(scene.spec.lidar.offset));
        let rays = metrics::lidar_pattern(
            &[sensor],
            s2.metric_rays[0],
            s2.metric_rays[1],
            scene.spec.lidar.elevation_range_deg,
        );
        let ray = metrics::rayiou(&pred, &frame.gt, &rays, &RAYIOU_THRESHOLDS)?;
        reports.push(FrameReport {
            frame: f,
            initial_loss,
            final_loss,
            voxel,
            ray,
        });

        // --- propagate ---
        if s2.propagation != PropagationMode::None {
            let decoded = params.decode_queries();
            let k_prop = ((cfg.queries as f64 * s2.propagated_fraction).round() as usize).max(1);
            let delta = match s2.propagation {
                PropagationMode::TopK => 0.0,
                PropagationMode::DeltaTopK => delta_for_frame(scene, cfg, f),
                PropagationMode::None => unreachable!(),
            };
            let picked = select_queries(&decoded, k_prop, delta);
            let stored: Vec<SceneQuery> = picked
                .iter()
                .map(|&i| to_ego_local(&decoded[i], &frame.ego))
                .collect();
            queue.push_frame(f as u64 + 1, stored, frame.ego.clone())?;
        }
    }

    let n = reports.len() as f64;
    let report = Stage2Report {
        mean_iou: reports.iter().map(|r| r.voxel.iou).sum::<f64>() / n,
        mean_miou: reports.iter().map(|r| r.voxel.miou).sum::<f64>() / n,
        mean_rayiou: reports.iter().map(|r| r.ray.rayiou).sum::<f64>() / n,
        frames: reports,
    };
    Ok((params, report))
}

/// Runs stage 1 on its configured frames, then stage 2 initialized from the
/// first stage-1 result.
pub fn fit_pipeline(
    scene: &SyntheticScene,
    cfg: &FitConfig,
) -> Result<(QueryParamSet, Vec<Stage1Frame>, Stage2Report)> {
    let stage1 = fit_stage1(scene, cfg)?;
    let init = stage1.first().map(|s| &s.params);
    let (params, report) = fit_stage2(scene, init, cfg)?;
    Ok((params, stage1, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::scene::{BoxSpec, CameraSpec, EgoSpec, GridSpec, LidarSpec, SceneSpec};
    use approx::assert_relative_eq;

    fn tiny_params(class_count: usize) -> QueryParamSet {
        QueryParamSet {
            class_count,
            queries: vec![
                RawQuery {
                    base_position: [0.3, -0.2, 0.1],
                    offset: [0.1, 0.05, -0.1],
                    opacity_logit: 0.4,
                    velocity: [0.0; 3],
                    class_logits: vec![0.2, -0.3],
                    children: vec![
                        RawChild {
                            offset: [0.2, 0.0, 0.1],
                            rotation: [0.9, 0.1, -0.2, 0.3], // deliberately non-unit
                            log_scale: [0.4f64.ln(), 0.5f64.ln(), 0.3f64.ln()],
                            opacity_logit: -0.3,
                            color: [0.5; 3],
                        },
                        RawChild {
                            offset: [-0.3, 0.2, 0.0],
                            rotation: [1.1, -0.2, 0.1, 0.0],
                            log_scale: [0.6f64.ln(), 0.3f64.ln(), 0.5f64.ln()],
                            opacity_logit: 0.6,
                            color: [0.5; 3],
                        },
                    ],
                },
                RawQuery {
                    base_position: [-0.5, 0.4, 0.3],
                    offset: [0.0, -0.1, 0.05],
                    opacity_logit: -0.5,
                    velocity: [0.0; 3],
                    class_logits: vec![-0.1, 0.4],
                    children: vec![RawChild {
                        offset: [0.1, 0.1, -0.2],
                        rotation: [0.8, 0.3, 0.1, -0.25],
                        log_scale: [0.35f64.ln(), 0.45f64.ln(), 0.55f64.ln()],
                        opacity_logit: 0.1,
                        color: [0.5; 3],
                    }],
                },
            ],
        }
    }

    #[test]
    fn pack_unpack_round_trips() {
        let params = tiny_params(2);
        let flat = pack(&params);
        assert_eq!(flat.len(), flat_len(&params));
        let mut copy = params.clone();
        for v in copy.queries[0].offset.iter_mut() {
            *v = 99.0;
        }
        unpack(&mut copy, &flat);
        let back = pack(&copy);
        assert_eq!(flat, back);
    }

    #[test]
    fn query_chain_gradients_match_finite_differences() {
        // Loss: splat the decoded Gaussians and dot with a fixed upstream;
        // differentiate w.r.t. the flat query parameters. Exercises the
        // offset fan-out, the opacity product rerouting, the shared class
        // logits, and the non-unit child quaternion rescaling.
        let grid = VoxelGrid::empty(
            Vector3::new(-2.0, -2.0, -1.0),
            Vector3::new(0.5, 0.5, 0.5),
            [8, 8, 4],
            2,
        );
        let params = tiny_params(2);
        let scfg = SplatConfig::default();
        let mut state = 0x5deece66du64;
        let upstream: Vec<f64> = (0..grid.voxel_count() * 3)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let flat = pack(&params);
        let shape = params.clone();
        let f = |x: &[f64]| {
            let mut p = shape.clone();
            unpack(&mut p, x);
            let (gaussians, _) = p.decode_gaussians();
            crate::splat::splat_loss(&gaussians, &grid, &scfg, &upstream).unwrap()
        };
        let (gaussians, _) = params.decode_gaussians();
        let engine = SplatEngine::new(&gaussians, &grid, &scfg).unwrap();
        let sg = engine.backward(&upstream).unwrap();
        let mut qgrads = QueryGrads::zeros(&params);
        backprop_to_queries(&params, &splat_to_gaussian_grads(sg), &mut qgrads);
        let analytic = pack_grads(&params, &qgrads);
        gradcheck::assert_gradients_match(f, &flat, &analytic, 1e-4, 1e-3, 1e-5);
    }

    fn small_scene(moving: bool, frames: usize) -> SyntheticScene {
        let spec = SceneSpec {
            grid: GridSpec {
                origin: [0.0, 0.0, 0.0],
                voxel_size: [0.25, 0.25, 0.25],
                dims: [32, 32, 8],
                class_count: 3,
            },
            frames,
            frame_dt: 0.5,
            ego: EgoSpec {
                start: [4.0, 4.0, 1.0],
                velocity: [0.0, 0.0, 0.0],
                yaw_rate: 0.0,
            },
            elements: vec![
                BoxSpec {
                    min: [0.0, 0.0, 0.0],
                    max: [8.0, 8.0, 0.25],
                    class: 0,
                    velocity: [0.0; 3],
                },
                BoxSpec {
                    min: [5.5, 5.5, 0.0],
                    max: [7.0, 7.0, 1.25],
                    class: 1,
                    velocity: if moving { [0.8, 0.0, 0.0] } else { [0.0; 3] },
                },
            ],
            cameras: vec![CameraSpec {
                fx: 14.0,
                fy: 14.0,
                cx: 12.0,
                cy: 9.0,
                width: 24,
                height: 18,
                position: [0.0, 0.0, 0.5],
                look_at: [1.0, 1.0, 0.2],
            }],
            lidar: LidarSpec {
                rings: 12,
                azimuth_steps: 72,
                elevation_range_deg: [-40.0, 0.0],
                max_range: 20.0,
                offset: [0.0, 0.0, 0.8],
            },
        };
        SyntheticScene::generate(&spec, 17).unwrap()
    }

    fn quick_cfg() -> FitConfig {
        FitConfig {
            queries: 24,
            children_per_query: 3,
            stage1: Stage1Config {
                steps: 30,
                ..Stage1Config::default()
            },
            stage2: Stage2Config {
                steps_per_frame: 30,
                metric_rays: [6, 24],
                ..Stage2Config::default()
            },
            ..FitConfig::default()
        }
    }

    #[test]
    fn stage1_zero_noise_keeps_denoise_at_zero() {
        let scene = small_scene(false, 1);
        let mut cfg = quick_cfg();
        cfg.stage1.noise_bound = 0.0;
        cfg.stage1.lambda_depth = 0.0;
        cfg.stage1.lambda_rgb = 0.0;
        cfg.stage1.neighbor_frames = false;
        let out = fit_stage1(&scene, &cfg).unwrap();
        let report = &out[0].report;
        assert_eq!(report.losses[0].denoise, 0.0);
        assert!(report.losses.iter().all(|l| l.denoise <= 1e-9));
        assert_eq!(report.final_denoise, 0.0);
    }

    #[test]
    fn stage1_denoise_only_recovers_targets() {
        let scene = small_scene(false, 1);
        let mut cfg = quick_cfg();
        cfg.stage1.steps = 400;
        cfg.stage1.lambda_depth = 0.0;
        cfg.stage1.lambda_rgb = 0.0;
        cfg.stage1.neighbor_frames = false;
        let out = fit_stage1(&scene, &cfg).unwrap();
        assert!(
            out[0].report.mean_offset_error < 0.05,
            "mean offset error {}",
            out[0].report.mean_offset_error
        );
    }

    #[test]
    fn divergence_is_reported() {
        let scene = small_scene(false, 1);
        let mut cfg = quick_cfg();
        cfg.divergence_threshold = 1e-12;
        assert!(matches!(
            fit_stage1(&scene, &cfg),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn stage2_smoke_metrics_are_sane() {
        let scene = small_scene(false, 2);
        let mut cfg = quick_cfg();
        cfg.stage2.steps_per_frame = 40;
        let (params, report) = fit_stage2(&scene, None, &cfg).unwrap();
        assert_eq!(report.frames.len(), 2);
        assert_eq!(params.queries.len(), cfg.queries);
        for fr in &report.frames {
            assert!(fr.final_loss.is_finite());
            assert!((0.0..=1.0).contains(&fr.voxel.iou));
            assert!((0.0..=1.0).contains(&fr.voxel.miou));
            assert!((0.0..=1.0).contains(&fr.ray.rayiou));
        }
    }

    #[test]
    fn stage2_is_deterministic() {
        let scene = small_scene(true, 2);
        let cfg = quick_cfg();
        let (pa, ra) = fit_stage2(&scene, None, &cfg).unwrap();
        let (pb, rb) = fit_stage2(&scene, None, &cfg).unwrap();
        assert_eq!(pack(&pa), pack(&pb));
        assert_eq!(
            serde_json::to_string(&ra).unwrap(),
            serde_json::to_string(&rb).unwrap()
        );
    }

    #[test]
    fn halton_covers_unit_interval() {
        let xs: Vec<f64> = (1..=64).map(|i| halton(i, 2)).collect();
        assert!(xs.iter().all(|&x| (0.0..1.0).contains(&x)));
        // Low-discrepancy: each half contains half the points.
        let low = xs.iter().filter(|&&x| x < 0.5).count();
        assert_eq!(low, 32);
    }

    #[test]
    fn projection_clamps_into_bounds() {
        let grid = VoxelGrid::empty(Vector3::zeros(), Vector3::new(0.5, 0.5, 0.5), [8, 8, 4], 2);
        let cfg = FitConfig::default();
        let mut params = tiny_params(2);
        params.queries[0].offset = [100.0, 0.0, 0.0];
        params.queries[0].children[0].log_scale = [10.0, -30.0, 0.0];
        params.queries[0].children[0].opacity_logit = 1e6;
        let mut flat = pack(&params);
        project(&mut params, &mut flat, &cfg, &grid);
        let anchor = params.queries[0].base_position[0] + params.queries[0].offset[0];
        assert!(anchor <= grid.max_corner().x + 1e-9);
        let ls = params.queries[0].children[0].log_scale;
        assert!(ls[0] <= cfg.scale_max.ln() + 1e-9 && ls[1] >= cfg.scale_min.ln() - 1e-9);
        let a = crate::params::sigmoid(params.queries[0].children[0].opacity_logit);
        assert!(a <= 1.0 - 1e-7);
        let n = crate::quat::norm(params.queries[0].children[0].rotation);
        assert_relative_eq!(n, 1.0, epsilon = 1e-9);
    }
}
