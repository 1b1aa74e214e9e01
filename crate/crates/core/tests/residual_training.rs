mod common;

use common::Desk;
use ctsr_core::field::{decode_checkpoint, encode_checkpoint};
use ctsr_core::metrics::psnr;
use ctsr_core::trainer::{angle_loss, init_field, train, ResidualTargets, TrainConfig};

fn mean_loss(field: &ctsr_core::field::GaussianField, targets: &ResidualTargets, cfg: &TrainConfig) -> f64 {
    let n = targets.geometry().n_angles();
    (0..n)
        .map(|a| angle_loss(field, targets, a, cfg).unwrap().l1)
        .sum::<f64>()
        / n as f64
}

fn small_run() -> (Desk, ResidualTargets, TrainConfig) {
    let desk = Desk::new(24, 4, 32, 16);
    let targets = ResidualTargets::new(desk.gt_proj.clone(), desk.lr_proj.clone(), desk.lr_cubic.clone()).unwrap();
    let cfg = TrainConfig {
        iterations: 200,
        densify_from: 50,
        densify_until: 200,
        densify_interval: 50,
        n_init: 1000,
        scale_term: 1.0,
        grad_threshold: 2e-4,
        tv_crop: 8,
        ..TrainConfig::default()
    };
    (desk, targets, cfg)
}

#[test]
fn training_on_true_projections_improves_on_cubic() {
    let (desk, targets, cfg) = small_run();
    let init = init_field(&targets, &cfg).unwrap();
    let before = mean_loss(&init, &targets, &cfg);
    let out = train(init, &targets, &cfg, &mut ()).unwrap();
    let after = mean_loss(&out.field, &targets, &cfg);
    let cubic = psnr(&desk.lr_cubic.clip(0.0, 1.0), &desk.gt, 1.0).unwrap();
    let ours = psnr(&out.volume, &desk.gt, 1.0).unwrap();
    eprintln!("l1 {before} -> {after}, psnr {cubic} -> {ours}");
    assert!(after < 0.9 * before, "l1 {before} -> {after}");
    assert!(ours > cubic, "psnr {cubic} -> {ours}");
    assert!(out.volume.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let (_, targets, mut cfg) = small_run();
    cfg.iterations = 60;
    cfg.densify_until = 60;
    let a = train(init_field(&targets, &cfg).unwrap(), &targets, &cfg, &mut ()).unwrap();
    let b = train(init_field(&targets, &cfg).unwrap(), &targets, &cfg, &mut ()).unwrap();
    let bytes = encode_checkpoint(&a.field);
    assert_eq!(bytes, encode_checkpoint(&b.field));
    assert_eq!(a.volume.data(), b.volume.data());
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&back), bytes);
}
