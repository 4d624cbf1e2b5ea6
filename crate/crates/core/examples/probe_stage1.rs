use pcstyle::cloud::{build_feature_cloud, Dedup};
use pcstyle::render::render_view;
use pcstyle::scene::Scene;
use pcstyle::synthetic::{make_synthetic_scene, SyntheticSpec, TextureId};
use pcstyle::train::{train_decoder, Checkpoint, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
    let lam_rgb: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(5e-3);

    let full = make_synthetic_scene(
        &SyntheticSpec { n_views: 5, n_points: 500, texture: TextureId::Checker, image_size: 64 },
        7,
    )
    .unwrap();
    let holdout = full.scene.views[2].clone();
    let train_views: Vec<_> = [0usize, 1, 3, 4].iter().map(|&i| full.scene.views[i].clone()).collect();
    let train_scene = Scene { name: "train".into(), views: train_views };

    let mut config = TrainConfig::default();
    config.lr = lr;
    config.weights.lambda_rgb = lam_rgb;
    config.seed = 7;
    let ckpt = Checkpoint::init(config).unwrap();
    let t0 = Instant::now();
    let (ckpt, log) = train_decoder(&[train_scene.clone()], ckpt, steps).unwrap();
    let train_time = t0.elapsed();

    let first50: f64 = log[..50.min(log.len())].iter().map(|r| r.report.weighted_total).sum::<f64>() / 50f64.min(log.len() as f64);
    let last50: f64 = log[log.len().saturating_sub(50)..].iter().map(|r| r.report.weighted_total).sum::<f64>() / 50f64.min(log.len() as f64);

    let cloud = build_feature_cloud(&train_scene, &ckpt.encoder, Dedup::Auto).unwrap();
    let rendered = render_view(&cloud, &holdout, &ckpt.config.splat, &ckpt.decoder).unwrap();
    let l1 = rendered.sub(&holdout.image).map(f64::abs).mean();
    // also reconstruction L1 on a training view
    let r0 = render_view(&cloud, &train_scene.views[0], &ckpt.config.splat, &ckpt.decoder).unwrap();
    let l1_train = r0.sub(&train_scene.views[0].image).map(f64::abs).mean();
    println!(
        "lr={lr} steps={steps} lam_rgb={lam_rgb}: holdout_L1={l1:.4} train_L1={l1_train:.4} first50={first50:.4} last50={last50:.4} ratio={:.3} time={train_time:.1?}",
        last50 / first50
    );
}
