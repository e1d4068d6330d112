//! Synthetic scene generation: axis-aligned boxed elements (ground, walls,
//! boxes; optionally moving), an ego trajectory, and per-frame ground truth
//! (labeled voxel grids, surface point samples, depth and RGB maps).

use std::ops::Range;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Image};
use crate::metrics::lidar_pattern;
use crate::render::CameraModel;
use crate::types::{Pose, SemanticGaussian, VoxelGrid};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
    pub class_count: usize,
}

impl GridSpec {
    pub fn to_grid(&self) -> VoxelGrid {
        VoxelGrid::empty(
            Vector3::from(self.origin),
            Vector3::from(self.voxel_size),
            self.dims,
            self.class_count,
        )
    }
}

/// Axis-aligned box element; `velocity` makes it dynamic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class: usize,
    #[serde(default)]
    pub velocity: [f64; 3],
}

impl BoxSpec {
    fn at_time(&self, t: f64) -> ([f64; 3], [f64; 3]) {
        let shift = [
            self.velocity[0] * t,
            self.velocity[1] * t,
            self.velocity[2] * t,
        ];
        (
            [
                self.min[0] + shift[0],
                self.min[1] + shift[1],
                self.min[2] + shift[2],
            ],
            [
                self.max[0] + shift[0],
                self.max[1] + shift[1],
                self.max[2] + shift[2],
            ],
        )
    }
}

/// Camera parameters in the ego frame, looking from `position` at `look_at`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
}

impl CameraSpec {
    /// Camera-to-ego pose with +z forward, x right, y down, world up (0,0,1).
    fn local_pose(&self) -> Result<Pose> {
        let position = Vector3::from(self.position);
        let forward = (Vector3::from(self.look_at) - position).normalize();
        let up = Vector3::new(0.0, 0.0, 1.0);
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::SchemaError(
                "camera looking straight up or down".into(),
            ));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = nalgebra::Matrix3::from_columns(&[right, down, forward]);
        Ok(Pose::new(
            UnitQuaternion::from_matrix(&rot),
            position,
            0.0,
        ))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EgoSpec {
    pub start: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
    /// Radians per second about +z.
    #[serde(default)]
    pub yaw_rate: f64,
}

impl Default for EgoSpec {
    fn default() -> Self {
        Self {
            start: [0.0; 3],
            velocity: [0.0; 3],
            yaw_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LidarSpec {
    pub rings: usize,
    pub azimuth_steps: usize,
    pub elevation_range_deg: [f64; 2],
    pub max_range: f64,
    /// Sensor offset in the ego frame.
    #[serde(default)]
    pub offset: [f64; 3],
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            rings: 32,
            azimuth_steps: 360,
            elevation_range_deg: [-35.0, 5.0],
            max_range: 50.0,
            offset: [0.0, 0.0, 0.0],
        }
    }
}

fn default_frames() -> usize {
    1
}

fn default_frame_dt() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid: GridSpec,
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Keyframe spacing in seconds (2 Hz by default).
    #[serde(default = "default_frame_dt")]
    pub frame_dt: f64,
    #[serde(default)]
    pub ego: EgoSpec,
    pub elements: Vec<BoxSpec>,
    #[serde(default)]
    pub cameras: Vec<CameraSpec>,
    #[serde(default)]
    pub lidar: LidarSpec,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::SchemaError("frames must be >= 1".into()));
        }
        if self.grid.dims.iter().any(|&d| d == 0) {
            return Err(Error::SchemaError("grid dims must be positive".into()));
        }
        if self.grid.voxel_size.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::SchemaError("voxel size must be positive".into()));
        }
        if self.grid.class_count == 0 || self.grid.class_count > 255 {
            return Err(Error::SchemaError("class_count must be in 1..=255".into()));
        }
        for (i, e) in self.elements.iter().enumerate() {
            if e.class >= self.grid.class_count {
                return Err(Error::SchemaError(format!(
                    "element {} class {} out of range (class_count {})",
                    i, e.class, self.grid.class_count
                )));
            }
            for a in 0..3 {
                if !(e.min[a] < e.max[a]) {
                    return Err(Error::SchemaError(format!(
                        "element {} has empty extent on axis {}",
                        i, a
                    )));
                }
            }
        }
        if self.lidar.rings == 0 || self.lidar.azimuth_steps == 0 {
            return Err(Error::SchemaError("lidar pattern must be nonempty".into()));
        }
        for cam in &self.cameras {
            cam.local_pose()?;
        }
        Ok(())
    }

    pub fn ego_pose(&self, frame: usize) -> Pose {
        let t = frame as f64 * self.frame_dt;
        Pose::new(
            UnitQuaternion::from_euler_angles(0.0, 0.0, self.ego.yaw_rate * t),
            Vector3::from(self.ego.start) + Vector3::from(self.ego.velocity) * t,
            t,
        )
    }
}

/// Deterministic per-class color (empty would be black; classes get distinct
/// saturated colors).
pub fn class_color(class: usize, class_count: usize) -> [f64; 3] {
    let h = class as f64 / class_count.max(1) as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.85 * r, 0.15 + 0.85 * g, 0.15 + 0.85 * b]
}

/// Slab-test ray/box intersection; returns the entry distance for rays
/// starting outside the box.
fn ray_box(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    min: &[f64; 3],
    max: &[f64; 3],
) -> Option<f64> {
    let mut t_enter = 0.0f64;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < min[a] || origin[a] >= max[a] {
                return None;
            }
        } else {
            let t0 = (min[a] - origin[a]) / dir[a];
            let t1 = (max[a] - origin[a]) / dir[a];
            let (near, far) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
            t_enter = t_enter.max(near);
            t_exit = t_exit.min(far);
        }
    }
    (t_exit >= t_enter && t_enter > 1e-9).then_some(t_enter)
}

/// Per-frame generated data.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub ego: Pose,
    pub gt: VoxelGrid,
    /// LiDAR stand-in surface samples, world frame.
    pub points: Vec<Vector3<f64>>,
    pub cameras: Vec<CameraModel>,
    pub depth_maps: Vec<Image>,
    pub rgb_maps: Vec<Image>,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub frames: Vec<FrameData>,
}

impl SyntheticScene {
    pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut frames = Vec::with_capacity(spec.frames);
        for f in 0..spec.frames {
            frames.push(generate_frame(spec, seed, f)?);
        }
        Ok(Self {
            spec: spec.clone(),
            seed,
            frames,
        })
    }
}

/// Nearest box hit along a ray at frame time `t`, with the element class.
fn nearest_hit(
    spec: &SceneSpec,
    t_frame: f64,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    max_range: f64,
) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for e in &spec.elements {
        let (min, max) = e.at_time(t_frame);
        if let Some(t) = ray_box(origin, dir, &min, &max) {
            if t <= max_range && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, e.class));
            }
        }
    }
    best
}

fn generate_frame(spec: &SceneSpec, seed: u64, frame: usize) -> Result<FrameData> {
    let t_frame = frame as f64 * spec.frame_dt;
    let ego = spec.ego_pose(frame);

    // Ground-truth labels: voxel centers inside a box take its class; later
    // elements override earlier ones.
    let mut gt = spec.grid.to_grid();
    for e in &spec.elements {
        let (min, max) = e.at_time(t_frame);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut empty = false;
        for a in 0..3 {
            let lo_f = ((min[a] - gt.origin[a]) / gt.voxel_size[a] - 0.5).ceil();
            // Centers strictly below the max face.
            let hi_f = ((max[a] - gt.origin[a]) / gt.voxel_size[a] - 0.5).ceil() - 1.0;
            let lo_i = lo_f.max(0.0) as i64;
            let hi_i = (hi_f.min(gt.dims[a] as f64 - 1.0)) as i64;
            if hi_f < 0.0 || lo_i > hi_i {
                empty = true;
                break;
            }
            lo[a] = lo_i as usize;
            hi[a] = hi_i as usize;
        }
        if empty {
            continue;
        }
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let v = gt.linear(i, j, k);
                    gt.labels[v] = e.class as u8;
                }
            }
        }
    }

    // LiDAR stand-in: jittered ray pattern from the ego-mounted sensor.
    let sensor_origin = ego.transform_point(&Vector3::from(spec.lidar.offset));
    let pattern = lidar_pattern(
        &[sensor_origin],
        spec.lidar.rings,
        spec.lidar.azimuth_steps,
        spec.lidar.elevation_range_deg,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (frame as u64).wrapping_mul(0x9e37_79b9));
    let jitter = Uniform::new_inclusive(-2e-3, 2e-3);
    let mut points = Vec::new();
    for (o, d) in pattern.origins.iter().zip(&pattern.directions) {
        let d = (d + Vector3::new(
            jitter.sample(&mut rng),
            jitter.sample(&mut rng),
            jitter.sample(&mut rng),
        ))
        .normalize();
        if let Some((t, _)) = nearest_hit(spec, t_frame, o, &d, spec.lidar.max_range) {
            points.push(o + d * t);
        }
    }

    // Cameras ride the ego; depth is the ray distance to the nearest element.
    let mut cameras = Vec::with_capacity(spec.cameras.len());
    let mut depth_maps = Vec::with_capacity(spec.cameras.len());
    let mut rgb_maps = Vec::with_capacity(spec.cameras.len());
    for cam_spec in &spec.cameras {
        let camera = CameraModel {
            fx: cam_spec.fx,
            fy: cam_spec.fy,
            cx: cam_spec.cx,
            cy: cam_spec.cy,
            width: cam_spec.width,
            height: cam_spec.height,
            pose: ego.compose(&cam_spec.local_pose()?),
        };
        camera.validate()?;
        let rays = crate::render::generate_rays(&camera);
        let mut depth = Image::zeros(camera.width, camera.height, 1);
        let mut rgb = Image::zeros(camera.width, camera.height, 3);
        for (i, ray) in rays.iter().enumerate() {
            if let Some((t, class)) =
                nearest_hit(spec, t_frame, &ray.origin, &ray.dir, spec.lidar.max_range)
            {
                depth.data[i] = t as f32;
                let color = class_color(class, spec.grid.class_count);
                for k in 0..3 {
                    rgb.data[i * 3 + k] = color[k] as f32;
                }
            }
        }
        cameras.push(camera);
        depth_maps.push(depth);
        rgb_maps.push(rgb);
    }

    Ok(FrameData {
        ego,
        gt,
        points,
        cameras,
        depth_maps,
        rgb_maps,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoseRecord {
    frame: usize,
    timestamp: f64,
    rotation_wxyz: [f64; 4],
    translation: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneManifest {
    seed: u64,
    spec: SceneSpec,
    poses: Vec<PoseRecord>,
}

/// Generates a scene and writes it under `out_dir`:
/// `scene.json` (spec, seed, ego poses) plus per frame
/// `frame_###/{gt.svox, points.spts, depth_##.simg, rgb_##.simg}`.
pub fn gen_scene(spec: &SceneSpec, seed: u64, out_dir: impl AsRef<Path>) -> Result<SyntheticScene> {
    let scene = SyntheticScene::generate(spec, seed)?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let manifest = SceneManifest {
        seed,
        spec: spec.clone(),
        poses: scene
            .frames
            .iter()
            .enumerate()
            .map(|(f, frame)| PoseRecord {
                frame: f,
                timestamp: frame.ego.timestamp,
                rotation_wxyz: frame.ego.rotation_wxyz(),
                translation: frame.ego.translation.into(),
            })
            .collect(),
    };
    std::fs::write(
        dir.join("scene.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    for (f, frame) in scene.frames.iter().enumerate() {
        let fdir = dir.join(format!("frame_{:03}", f));
        std::fs::create_dir_all(&fdir)?;
        io::write_grid(fdir.join("gt.svox"), &frame.gt)?;
        io::write_points(fdir.join("points.spts"), &frame.points)?;
        for (c, (depth, rgb)) in frame.depth_maps.iter().zip(&frame.rgb_maps).enumerate() {
            io::write_image(fdir.join(format!("depth_{:02}.simg", c)), depth)?;
            io::write_image(fdir.join(format!("rgb_{:02}.simg", c)), rgb)?;
        }
    }
    Ok(scene)
}

/// Loads a scene directory written by [`gen_scene`].
pub fn load_scene(dir: impl AsRef<Path>) -> Result<SyntheticScene> {
    let dir = dir.as_ref();
    let manifest: SceneManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("scene.json"))?)?;
    let spec = manifest.spec;
    spec.validate()?;
    let mut frames = Vec::with_capacity(spec.frames);
    for (f, rec) in manifest.poses.iter().enumerate() {
        let fdir = dir.join(format!("frame_{:03}", f));
        let gt = io::read_grid(fdir.join("gt.svox"))?;
        let points = io::read_points(fdir.join("points.spts"))?;
        let ego = Pose::new(
            crate::quat::to_unit_quaternion(rec.rotation_wxyz),
            Vector3::from(rec.translation),
            rec.timestamp,
        );
        let mut cameras = Vec::new();
        let mut depth_maps = Vec::new();
        let mut rgb_maps = Vec::new();
        for (c, cam_spec) in spec.cameras.iter().enumerate() {
            cameras.push(CameraModel {
                fx: cam_spec.fx,
                fy: cam_spec.fy,
                cx: cam_spec.cx,
                cy: cam_spec.cy,
                width: cam_spec.width,
                height: cam_spec.height,
                pose: ego.compose(&cam_spec.local_pose()?),
            });
            depth_maps.push(io::read_image(fdir.join(format!("depth_{:02}.simg", c)))?);
            rgb_maps.push(io::read_image(fdir.join(format!("rgb_{:02}.simg", c)))?);
        }
        frames.push(FrameData {
            ego,
            gt,
            points,
            cameras,
            depth_maps,
            rgb_maps,
        });
    }
    Ok(SyntheticScene {
        spec,
        seed: manifest.seed,
        frames,
    })
}

/// Random Gaussians uniformly positioned over the grid volume, with random
/// orientations, scales from `scale_range`, and random class distributions.
/// Used by the kernel benchmark and by randomized tests.
pub fn random_gaussians(
    seed: u64,
    count: usize,
    grid: &VoxelGrid,
    scale_range: Range<f64>,
) -> Vec<SemanticGaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = grid.max_corner();
    (0..count)
        .map(|_| {
            let position = Vector3::new(
                rng.gen_range(grid.origin.x..hi.x),
                rng.gen_range(grid.origin.y..hi.y),
                rng.gen_range(grid.origin.z..hi.z),
            );
            let rotation = loop {
                let q = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let n = crate::quat::norm(q);
                if n > 0.1 {
                    break crate::quat::to_unit_quaternion(q);
                }
            };
            let scale = Vector3::new(
                rng.gen_range(scale_range.clone()),
                rng.gen_range(scale_range.clone()),
                rng.gen_range(scale_range.clone()),
            );
            let mut classes: Vec<f64> = (0..grid.class_count)
                .map(|_| -(rng.gen_range(1e-6..1.0f64).ln()))
                .collect();
            let total: f64 = classes.iter().sum();
            classes.iter_mut().for_each(|c| *c /= total);
            SemanticGaussian {
                position,
                rotation,
                scale,
                opacity: rng.gen_range(0.05..0.95),
                classes,
                velocity: Vector3::zeros(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_box_spec() -> SceneSpec {
        SceneSpec {
            grid: GridSpec {
                origin: [0.0, 0.0, 0.0],
                voxel_size: [0.5, 0.5, 0.5],
                dims: [16, 16, 8],
                class_count: 3,
            },
            frames: 2,
            frame_dt: 0.5,
            ego: EgoSpec {
                start: [1.0, 4.0, 1.0],
                velocity: [0.5, 0.0, 0.0],
                yaw_rate: 0.0,
            },
            elements: vec![BoxSpec {
                min: [3.0, 3.0, 0.0],
                max: [5.0, 5.0, 2.0],
                class: 1,
                velocity: [0.0, 0.0, 0.0],
            }],
            cameras: vec![CameraSpec {
                fx: 20.0,
                fy: 20.0,
                cx: 16.0,
                cy: 12.0,
                width: 32,
                height: 24,
                position: [0.0, 0.0, 0.5],
                look_at: [2.0, 0.0, 0.5],
            }],
            lidar: LidarSpec {
                rings: 8,
                azimuth_steps: 60,
                elevation_range_deg: [-30.0, 5.0],
                max_range: 30.0,
                offset: [0.0, 0.0, 0.5],
            },
        }
    }

    #[test]
    fn box_fills_expected_voxel_count() {
        // A 2x2x2 m box on a 0.5 m grid covers exactly 64 voxel centers.
        let scene = SyntheticScene::generate(&one_box_spec(), 1).unwrap();
        let gt = &scene.frames[0].gt;
        let filled = gt.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(filled, 64);
    }

    #[test]
    fn empty_spec_yields_empty_grids() {
        let mut spec = one_box_spec();
        spec.elements.clear();
        let scene = SyntheticScene::generate(&spec, 1).unwrap();
        assert!(scene.frames[0]
            .gt
            .labels
            .iter()
            .all(|&l| l == spec.grid.class_count as u8));
        assert!(scene.frames[0].points.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = one_box_spec();
        let a = SyntheticScene::generate(&spec, 9).unwrap();
        let b = SyntheticScene::generate(&spec, 9).unwrap();
        assert_eq!(a.frames[0].points, b.frames[0].points);
        assert_eq!(a.frames[0].gt.labels, b.frames[0].gt.labels);
        assert_eq!(a.frames[0].depth_maps[0], b.frames[0].depth_maps[0]);
    }

    #[test]
    fn points_lie_on_element_surfaces() {
        let spec = one_box_spec();
        let scene = SyntheticScene::generate(&spec, 2).unwrap();
        for p in &scene.frames[0].points {
            let on_box = (0..3).any(|a| {
                let e = &spec.elements[0];
                (p[a] - e.min[a]).abs() < 1e-6 || (p[a] - e.max[a]).abs() < 1e-6
            });
            assert!(on_box, "point {:?} not on a box face", p);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = one_box_spec();
        spec.elements[0].class = 7;
        assert!(matches!(
            SyntheticScene::generate(&spec, 1),
            Err(Error::SchemaError(_))
        ));
        let mut spec = one_box_spec();
        spec.frames = 0;
        assert!(SyntheticScene::generate(&spec, 1).is_err());
    }

    #[test]
    fn scene_round_trips_through_disk() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = one_box_spec();
        let written = gen_scene(&spec, 5, tmp.path()).unwrap();
        let loaded = load_scene(tmp.path()).unwrap();
        assert_eq!(written.frames.len(), loaded.frames.len());
        assert_eq!(written.frames[0].gt.labels, loaded.frames[0].gt.labels);
        assert_eq!(written.frames[1].depth_maps[0], loaded.frames[1].depth_maps[0]);
        // Points survive the f32 file round trip within f32 resolution.
        for (a, b) in written.frames[0].points.iter().zip(&loaded.frames[0].points) {
            assert!((a - b).norm() < 1e-4);
        }
    }

    #[test]
    fn moving_box_shifts_between_frames() {
        let mut spec = one_box_spec();
        spec.elements[0].velocity = [2.0, 0.0, 0.0];
        let scene = SyntheticScene::generate(&spec, 3).unwrap();
        let f0 = &scene.frames[0].gt;
        let f1 = &scene.frames[1].gt;
        assert_ne!(f0.labels, f1.labels);
        // 2 m/s * 0.5 s = 1 m = 2 voxels along +x.
        let occupied = |g: &VoxelGrid| -> Vec<[usize; 3]> {
            (0..g.voxel_count())
                .filter(|&v| g.labels[v] == 1)
                .map(|v| g.unlinear(v))
                .collect()
        };
        let a = occupied(f0);
        let b = occupied(f1);
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(p, q)| {
            q[0] == p[0] + 2 && q[1] == p[1] && q[2] == p[2]
        }));
    }
}
