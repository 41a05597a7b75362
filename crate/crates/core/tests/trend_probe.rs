//! Temporary probe for trend experiments; prints numbers, asserts nothing.

use occ_core::grid::GridGeometry;
use occ_core::nets::{Model, ModelConfig};
use occ_core::pipeline::{
    evaluate, train_stage, EvalMode, Stage, TrainConfig,
};
use occ_core::scene::Scene;
use occ_core::scenegen::{bake_labels, generate, CameraRigSpec, EgoMotion, ObjectCounts, SceneSpec};

fn trend_geometry() -> GridGeometry {
    GridGeometry::new([24, 24, 6], 0.5, [-6.0, -6.0, -1.0])
}

fn trend_scene_spec(seed: u64, stop_and_go: bool) -> SceneSpec {
    SceneSpec {
        seed,
        geometry: trend_geometry(),
        num_frames: 12,
        dt: 0.5,
        ego_history: 2,
        ego_motion: if stop_and_go {
            EgoMotion::StopAndGo { speed: 2.0, period: 3 }
        } else {
            EgoMotion::Straight { speed: 2.0 }
        },
        objects: ObjectCounts {
            buildings: 1,
            barriers: 2,
            poles: 2,
            parked: 1,
            moving_cars: 2,
            pedestrians: 0,
            vegetation: 0,
            crossers: if stop_and_go { 1 } else { 0 },
        },
        cameras: CameraRigSpec {
            count: 2,
            fov_deg: 90.0,
            width: 48,
            height: 32,
            pitch_deg: 12.0,
        },
    }
}

fn trend_model_config() -> ModelConfig {
    ModelConfig {
        geometry: trend_geometry(),
        num_categories: 9,
        feature_dim: 16,
        pixel_feat_dim: 12,
        pixel_hidden: 24,
        encoder_hidden: 48,
        projection_hidden: 32,
        head_hidden: 32,
        forecast_hidden: vec![64, 64],
        state_embed_dim: 8,
        state_hidden: 16,
        traj_hidden: 32,
        ego_history: 2,
        future_horizon: 2,
        posenc_freqs_2d: 4,
        posenc_freqs_3d: 6,
        residual_forecast: true,
        use_ego_state: true,
    }
}

fn trend_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk_default();
    cfg.model = trend_model_config();
    cfg.future_frames = 2;
    cfg.adjacent_frames = 1;
    cfg.samples_per_ray = 24;
    cfg.ray_stride = 4;
    cfg.learning_rate = 2e-3;
    cfg.seed = seed;
    cfg.rayiou_azimuths = 36;
    cfg.rayiou_elevations = 6;
    cfg.eval_frame_stride = 2;
    cfg
}

fn make_scenes(n: usize, base_seed: u64, stop_and_go: bool) -> Vec<Scene> {
    (0..n)
        .map(|i| {
            let mut s = generate(&trend_scene_spec(base_seed + i as u64, stop_and_go)).unwrap();
            bake_labels(&mut s).unwrap();
            s
        })
        .collect()
}

#[test]
#[ignore]
fn probe_forecast_vs_copy_paste() {
    let t0 = std::time::Instant::now();
    let scenes = make_scenes(6, 1000, false);
    let (train, val) = scenes.split_at(4);
    let mut cfg = trend_config(1);
    cfg.stage = Stage::Finetune;
    cfg.epochs = 6;
    let mut model = Model::new(cfg.model_config(), cfg.seed);
    train_stage(&mut model, Stage::Finetune, train, &cfg, None).unwrap();
    let bundle = evaluate(&model, val, &cfg, EvalMode::Head).unwrap();
    println!("== criterion 7 probe ({:.1}s) ==", t0.elapsed().as_secs_f64());
    println!("current miou {:.4}", bundle.current.miou);
    for (f, c) in bundle.forecast.iter().zip(&bundle.copy_paste) {
        println!(
            "h{} forecast {:.4} vs copy {:.4} (geo {:.4} vs {:.4})",
            f.horizon, f.miou, c.miou, f.iou_geo, c.iou_geo
        );
    }
}

#[test]
#[ignore]
fn probe_pretrain_helps() {
    let t0 = std::time::Instant::now();
    let scenes = make_scenes(6, 2000, false);
    let (train, val) = scenes.split_at(4);
    // Pre-training needs label views, fine-tuning grids; in-memory scenes
    // carry both, isolation is exercised elsewhere.
    let mut scores = Vec::new();
    for seed in [1u64, 2, 3] {
        let mut cfg = trend_config(seed);
        cfg.epochs = 2;

        let mut plain = Model::new(cfg.model_config(), seed);
        train_stage(&mut plain, Stage::Finetune, train, &cfg, None).unwrap();
        let plain_miou = evaluate(&plain, val, &cfg, EvalMode::Head).unwrap().current.miou;

        let mut warm = Model::new(cfg.model_config(), seed);
        let mut pre_cfg = cfg.clone();
        pre_cfg.epochs = 2;
        train_stage(&mut warm, Stage::Pretrain, train, &pre_cfg, None).unwrap();
        train_stage(&mut warm, Stage::Finetune, train, &cfg, None).unwrap();
        let warm_miou = evaluate(&warm, val, &cfg, EvalMode::Head).unwrap().current.miou;
        println!("seed {seed}: finetune-only {plain_miou:.4} vs pretrain+finetune {warm_miou:.4}");
        scores.push((plain_miou, warm_miou));
    }
    let mean_plain: f64 = scores.iter().map(|s| s.0).sum::<f64>() / 3.0;
    let mean_warm: f64 = scores.iter().map(|s| s.1).sum::<f64>() / 3.0;
    println!(
        "== criterion 8 probe ({:.1}s) == mean plain {mean_plain:.4} vs warm {mean_warm:.4}",
        t0.elapsed().as_secs_f64()
    );
}

#[test]
#[ignore]
fn probe_ego_state_helps() {
    let t0 = std::time::Instant::now();
    let scenes = make_scenes(6, 3000, true);
    let (train, val) = scenes.split_at(4);
    for seed in [1u64, 2, 3] {
        let mut on_cfg = trend_config(seed);
        on_cfg.eval_frame_stride = 1;
        on_cfg.epochs = 5;
        on_cfg.use_ego_state = true;
        let mut on = Model::new(on_cfg.model_config(), seed);
        train_stage(&mut on, Stage::Finetune, train, &on_cfg, None).unwrap();
        let on_b = evaluate(&on, val, &on_cfg, EvalMode::Head).unwrap();

        let mut off_cfg = trend_config(seed);
        off_cfg.eval_frame_stride = 1;
        off_cfg.epochs = 5;
        off_cfg.use_ego_state = false;
        let mut off = Model::new(off_cfg.model_config(), seed);
        train_stage(&mut off, Stage::Finetune, train, &off_cfg, None).unwrap();
        let off_b = evaluate(&off, val, &off_cfg, EvalMode::Head).unwrap();
        println!(
            "seed {seed}: ego-on avg {:.4} vs ego-off avg {:.4}",
            on_b.forecast_miou_avg(),
            off_b.forecast_miou_avg()
        );
    }
    println!("== criterion 9 probe ({:.1}s) ==", t0.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn probe_selfsup_extraction() {
    use occ_core::grid::SemanticGrid;
    use occ_core::metrics::miou;
    use rand::{Rng, SeedableRng};
    let t0 = std::time::Instant::now();
    let scenes = make_scenes(4, 4000, false);
    let (train, val) = scenes.split_at(3);
    let mut cfg = trend_config(5);
    cfg.epochs = 3;
    let mut model = Model::new(cfg.model_config(), cfg.seed);
    train_stage(&mut model, Stage::Pretrain, train, &cfg, None).unwrap();
    for tau in [0.2f32, 0.5, 1.0, 2.0] {
        let mut c = cfg.clone();
        c.density_threshold = tau;
        let b = evaluate(&model, val, &c, EvalMode::SelfSupervised).unwrap();
        println!("tau {tau}: extraction miou {:.4} geo {:.4}", b.current.miou, b.current.iou_geo);
    }
    // Baselines on the val scenes.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let mut free_counts = None;
    let mut rand_counts = None;
    for scene in val {
        for t in 0..scene.frames.len() {
            let gt = scene.frames[t].grid.as_ref().unwrap();
            let all_free = SemanticGrid::new_free(gt.geometry, gt.num_categories);
            let random = SemanticGrid::from_raw(
                gt.geometry,
                gt.num_categories,
                (0..gt.geometry.voxel_count())
                    .map(|_| rng.gen_range(0..gt.num_categories as u8))
                    .collect(),
            );
            let cf = occ_core::metrics::confusion(&all_free, gt, None).unwrap();
            let cr = occ_core::metrics::confusion(&random, gt, None).unwrap();
            match &mut free_counts {
                None => free_counts = Some(cf),
                Some(acc) => acc.merge(&cf),
            }
            match &mut rand_counts {
                None => rand_counts = Some(cr),
                Some(acc) => acc.merge(&cr),
            }
        }
    }
    let free_report = occ_core::metrics::miou_from_confusion(&free_counts.unwrap(), 8);
    let rand_report = occ_core::metrics::miou_from_confusion(&rand_counts.unwrap(), 8);
    println!(
        "baselines: all-free {:.4}, random {:.4} ({:.1}s)",
        free_report.miou,
        rand_report.miou,
        t0.elapsed().as_secs_f64()
    );
    let _ = miou;
}
