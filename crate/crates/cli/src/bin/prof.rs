use std::time::Instant;

use splatvox::fit::{fit_stage1, fit_stage2, FitConfig, PropagationMode, Stage1Config, Stage2Config};
use splatvox::scene::{BoxSpec, CameraSpec, EgoSpec, GridSpec, LidarSpec, SceneSpec, SyntheticScene};

fn standard_scene_spec(frames: usize) -> SceneSpec {
    SceneSpec {
        grid: GridSpec {
            origin: [0.0, 0.0, 0.0],
            voxel_size: [0.25, 0.25, 0.25],
            dims: [64, 64, 16],
            class_count: 4,
        },
        frames,
        frame_dt: 0.5,
        ego: EgoSpec {
            start: [8.0, 1.5, 1.2],
            velocity: [0.4, 0.25, 0.0],
            yaw_rate: 0.0,
        },
        elements: vec![
            BoxSpec { min: [0.0, 0.0, 0.0], max: [16.0, 16.0, 0.25], class: 0, velocity: [0.0; 3] },
            BoxSpec { min: [3.0, 3.0, 0.25], max: [5.0, 5.0, 1.75], class: 1, velocity: [0.0; 3] },
            BoxSpec { min: [10.0, 11.0, 0.25], max: [12.5, 13.0, 2.25], class: 2, velocity: [0.0; 3] },
            BoxSpec { min: [6.0, 9.0, 0.25], max: [8.0, 10.5, 1.25], class: 3, velocity: [0.0; 3] },
            BoxSpec { min: [11.0, 4.0, 0.25], max: [12.5, 5.5, 1.5], class: 1, velocity: [0.5, 0.0, 0.0] },
        ],
        cameras: vec![
            CameraSpec { fx: 16.0, fy: 16.0, cx: 16.0, cy: 12.0, width: 32, height: 24,
                position: [0.0, 0.0, 0.3], look_at: [-2.0, 2.0, -0.3] },
            CameraSpec { fx: 16.0, fy: 16.0, cx: 16.0, cy: 12.0, width: 32, height: 24,
                position: [0.0, 0.0, 0.3], look_at: [2.0, 2.0, -0.3] },
        ],
        lidar: LidarSpec {
            rings: 24,
            azimuth_steps: 180,
            elevation_range_deg: [-50.0, 10.0],
            max_range: 25.0,
            offset: [0.0, 0.0, 0.6],
        },
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stage1_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let stage2_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1600);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let spec = standard_scene_spec(2);
    let scene = SyntheticScene::generate(&spec, 42).unwrap();
    println!(
        "scene: {} frames, {} pts/frame, {} nonempty voxels",
        scene.frames.len(),
        scene.frames[0].points.len(),
        scene.frames[0].gt.labels.iter().filter(|&&l| l != 4).count()
    );

    let scale_max: f64 = std::env::var("SCALE_MAX").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let lr_geom: f64 = std::env::var("LR_GEOM").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-2);
    let queries: usize = std::env::var("K").ok().and_then(|v| v.parse().ok()).unwrap_or(80);
    let children: usize = std::env::var("J").ok().and_then(|v| v.parse().ok()).unwrap_or(5);
    let empty_fraction: f64 = std::env::var("EMPTY").ok().and_then(|v| v.parse().ok()).unwrap_or(0.1);
    let cfg = FitConfig {
        seed,
        queries,
        children_per_query: children,
        scale_max,
        lr_geometry: lr_geom,
        stage1: Stage1Config {
            steps: stage1_steps,
            ..Stage1Config::default()
        },
        stage2: Stage2Config {
            steps_per_frame: stage2_steps,
            propagation: PropagationMode::DeltaTopK,
            empty_fraction,
            ..Stage2Config::default()
        },
        ..FitConfig::default()
    };

    let t = Instant::now();
    let stage1 = fit_stage1(&scene, &cfg).unwrap();
    let s1_time = t.elapsed();
    let r = &stage1[0].report;
    println!(
        "stage1: {:?}  denoise {:.4} -> {:.4}  depth {:.3} -> mae {:.3}  offset_err {:.3}",
        s1_time,
        r.losses.first().map(|l| l.denoise).unwrap_or(0.0),
        r.final_denoise,
        r.losses.first().map(|l| l.depth).unwrap_or(0.0),
        r.final_depth_mae,
        r.mean_offset_error
    );

    // Single-frame stage 2 from the pretrained init.
    let mut scene1 = scene.clone();
    scene1.frames.truncate(1);
    scene1.spec.frames = 1;
    let t = Instant::now();
    let (params, report) = fit_stage2(&scene1, Some(&stage1[0].params), &cfg).unwrap();
    let s2_time = t.elapsed();
    let fr = &report.frames[0];
    println!(
        "stage2 (pretrained): {:?}  loss {:.4} -> {:.4}  IoU {:.4} mIoU {:.4} rayiou {:.4}",
        s2_time, fr.initial_loss, fr.final_loss, fr.voxel.iou, fr.voxel.miou, fr.ray.rayiou
    );
    println!("per class {:?}", fr.voxel.per_class);
    {
        use splatvox::blocked::SplatEngine;
        use splatvox::metrics::ConfusionCounts;
        let (gaussians, _) = params.decode_gaussians();
        let engine = SplatEngine::new(&gaussians, &scene1.frames[0].gt, &cfg.splat_config()).unwrap();
        println!("final pair count: {}", engine.pair_count());
        let pred = engine.field().to_label_grid(&scene1.frames[0].gt);
        let mut counts = ConfusionCounts::new(4);
        for (&p, &g) in pred.labels.iter().zip(&scene1.frames[0].gt.labels) {
            counts.record(p, g);
        }
        println!("tp {:?}\nfp {:?}\nfn {:?}", counts.tp, counts.fp, counts.fn_);
        let mut scale_hist = [0usize; 5];
        for g in &gaussians {
            let s = g.scale.max();
            let b = ((s / cfg.scale_max * 4.0) as usize).min(4);
            scale_hist[b] += 1;
        }
        println!("max-scale histogram (to scale_max): {:?}", scale_hist);
    }

    let t = Instant::now();
    let (_, report) = fit_stage2(&scene1, None, &cfg).unwrap();
    let fr = &report.frames[0];
    println!(
        "stage2 (random):     {:?}  loss {:.4} -> {:.4}  IoU {:.4} mIoU {:.4}",
        t.elapsed(),
        fr.initial_loss,
        fr.final_loss,
        fr.voxel.iou,
        fr.voxel.miou
    );
}
