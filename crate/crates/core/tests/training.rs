//! Short training runs on a reduced-width model at the full segment length.
//!
//! Reconstruction is scored as the excess of BCE over its own floor `BCE(x, x)`.
//! A PPG segment is not binary, so BCE cannot drop below that entropy term no
//! matter how good the fit is; the excess is the part training can remove.

use meae_core::checkpoint::load_checkpoint;
use meae_core::losses::{recon_loss, LossConfig};
use meae_core::model::{MeaeConfig, MeaeParams};
use meae_core::nn::{bce, stack_batch, Tensor};
use meae_core::signal::{preprocess, Recording, SEGMENT_LEN};
use meae_core::synth::{generate_scene, generate_scenes, SceneConfig};
use meae_core::train::{checkpoint_name, resume_name, ResumeState, TrainConfig, Trainer};

fn small_config(seed: u64) -> MeaeConfig {
    MeaeConfig {
        num_encoders: 2,
        encoder_channels: vec![4, 4],
        encoding_channels: 2,
        decoder_group_width: 2,
        seed,
        ..Default::default()
    }
}

fn segment_of(samples: Vec<f64>) -> Tensor {
    let pre = preprocess(&Recording::new(samples, 125.0).unwrap()).unwrap();
    pre.segments[0].to_tensor()
}

fn excess(params: &MeaeParams, x: &Tensor) -> f64 {
    let (x_hat, _) = params.reconstruct(x).unwrap();
    recon_loss(x, &x_hat).unwrap() - bce(x, x).unwrap()
}

fn trainer(seed: u64, lr: f64, batch_size: usize, loss: LossConfig) -> Trainer {
    let cfg = TrainConfig {
        learning_rate: lr,
        batch_size,
        seed,
        ..Default::default()
    };
    Trainer::new(MeaeParams::init(&small_config(seed)).unwrap(), cfg, loss).unwrap()
}

#[test]
fn repeated_segment_training_halves_the_reconstruction_excess() {
    let scene = generate_scene(&SceneConfig::default(), 12).unwrap();
    let x = segment_of(scene.mixture.clone());
    let copies: Vec<&Tensor> = vec![&x; 32];
    let batch = stack_batch(&copies).unwrap();
    let mut t = trainer(1, 3e-3, 32, LossConfig::default());
    let initial = excess(&t.params, &x);
    for _ in 0..200 {
        t.step(&batch).unwrap();
    }
    let last = excess(&t.params, &x);
    assert!(last <= 0.5 * initial, "excess {initial:.5} -> {last:.5}");
}

#[test]
fn repeated_sine_is_reconstructed() {
    let sine: Vec<f64> = (0..6000).map(|i| (i as f64 * 2.0 * std::f64::consts::PI / 125.0).sin()).collect();
    let x = segment_of(sine);
    let mut t = trainer(2, 3e-3, 1, LossConfig::default());
    let initial = excess(&t.params, &x);
    for _ in 0..200 {
        t.step(&x).unwrap();
    }
    let last = excess(&t.params, &x);
    assert!(last < 0.5 * initial, "excess {initial:.5} -> {last:.5}");
}

#[test]
fn heavy_zero_reconstruction_weight_silences_the_empty_latent() {
    let x = segment_of(generate_scene(&SceneConfig::default(), 40).unwrap().mixture);
    let loss = LossConfig {
        lambda_zero_recon: 10.0,
        ..Default::default()
    };
    let mut t = trainer(3, 1e-2, 1, loss);
    let before = t.params.decode(&t.params.zero_latent(1)).unwrap().max_abs();
    for _ in 0..1500 {
        t.step(&x).unwrap();
    }
    let after = t.params.decode(&t.params.zero_latent(1)).unwrap().max_abs();
    assert!(after < 0.05, "decode(Z_zero) max {before:.3} -> {after:.4}");
}

fn run_to_dir(dir: &std::path::Path, data: &[Tensor], epochs: usize) -> Trainer {
    let cfg = TrainConfig {
        epochs,
        batch_size: 2,
        seed: 7,
        checkpoint_dir: Some(dir.to_path_buf()),
        ..Default::default()
    };
    let mut t = Trainer::new(MeaeParams::init(&small_config(7)).unwrap(), cfg, LossConfig::default()).unwrap();
    t.train(data, &[]).unwrap();
    t
}

fn three_segments() -> Vec<Tensor> {
    generate_scenes(&SceneConfig::default(), 90, 3)
        .unwrap()
        .iter()
        .map(|s| segment_of(s.mixture.clone()))
        .collect()
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let data = three_segments();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_to_dir(&a, &data, 2);
    run_to_dir(&b, &data, 2);
    for epoch in 1..=2 {
        for name in [checkpoint_name(epoch), resume_name(epoch)] {
            let (fa, fb) = (std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
            assert!(!fa.is_empty());
            assert_eq!(fa, fb, "{name}");
        }
    }
    assert_eq!(load_checkpoint(&a.join(checkpoint_name(2))).unwrap().config.input_length, SEGMENT_LEN);
}

#[test]
fn resuming_from_saved_state_continues_the_same_trajectory() {
    let data = three_segments();
    let tmp = tempfile::tempdir().unwrap();
    let straight = run_to_dir(&tmp.path().join("straight"), &data, 3);

    let split = tmp.path().join("split");
    run_to_dir(&split, &data, 1);
    let state = ResumeState::load(&split.join(resume_name(1))).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed: 7,
        ..Default::default()
    };
    let mut resumed = Trainer::resume(state, cfg).unwrap();
    assert_eq!(resumed.epochs_done, 1);
    resumed.train(&data, &[]).unwrap();

    for (p, q) in straight.params.tensors().iter().zip(resumed.params.tensors()) {
        let worst = p.data().iter().zip(q.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-10, "parameter drift {worst:e}");
    }
}
