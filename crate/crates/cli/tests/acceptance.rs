//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to the
//! process stdout before asserting. The write skips the test harness capture, so
//! the scorecard shows up in a plain `cargo test` run.

use std::f64::consts::{LN_2, PI};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use clap::Parser;
use meae_cli::{run, Cli};
use meae_core::baselines::{fastica, nmf, pseudo_copies, IcaSettings, NmfSettings};
use meae_core::bench::{run_benchmark, BenchmarkConfig, BenchmarkOutcome};
use meae_core::hr::{detect_ppg_beats, detect_r_peaks, pearson, rmse, BeatSeries};
use meae_core::losses::{evaluate, record_objective, sparse_mixing_loss, zero_recon_loss, LossConfig};
use meae_core::model::{block_view, MeaeConfig, MeaeParams};
use meae_core::nn::{Tape, Tensor};
use meae_core::signal::{preprocess, Recording, CORE_LEN, PAD, SEGMENT_LEN};
use meae_core::synth::{gen_ecg, gen_pulse_train, HrProfile, FS};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {criterion} [{name}]: {verdict} ({detail})");
    let _ = out.flush();
    assert!(pass, "criterion {criterion} [{name}] failed: {detail}");
}

fn small_model(seed: u64) -> MeaeParams {
    MeaeParams::init(&MeaeConfig {
        num_encoders: 2,
        input_length: 96,
        encoder_channels: vec![4, 6],
        encoding_channels: 2,
        decoder_group_width: 3,
        encoder_kernel: 15,
        decoder_kernel: 16,
        stride: 2,
        seed,
    })
    .unwrap()
}

fn wave_batch(len: usize) -> Tensor {
    let data = (0..2)
        .flat_map(|b| {
            (0..len).map(move |i| {
                let t = i as f64 / len as f64;
                0.5 + 0.4 * (2.0 * PI * (2.0 + b as f64) * t).sin() * (1.0 - 0.5 * t)
            })
        })
        .collect();
    Tensor::new(vec![2, 1, len], data).unwrap()
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let params = small_model(77);
    let x = wave_batch(96);
    let loss_cfg = LossConfig {
        alpha: 1e-2,
        ..Default::default()
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vars = record_objective(&params, &mut tape, &bound, &x, &loss_cfg).unwrap();
    let mut grads = tape.backward(vars.total).unwrap();
    let analytic: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.take(v)).collect();

    let h = 1e-5;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (ti, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.tensors()[ti].data()[i];
            probe.tensors_mut()[ti].data_mut()[i] = orig + h;
            let up = evaluate(&probe, &x, &loss_cfg).unwrap().total;
            probe.tensors_mut()[ti].data_mut()[i] = orig - h;
            let down = evaluate(&probe, &x, &loss_cfg).unwrap().total;
            probe.tensors_mut()[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    report(1, "gradients", worst < 1e-4, &format!("max relative error {worst:.3e}"));
}

#[test]
fn criterion_2_loss_identities() {
    let mut params = small_model(5);
    let n = params.config.num_encoders;
    let x = wave_batch(96);

    let mut block_diag = params.clone();
    for layer in &mut block_diag.decoder {
        let (c_out, c_in, k) = (layer.out_channels(), layer.in_channels(), layer.kernel_size());
        if c_out % n != 0 {
            continue;
        }
        let (go, gi) = (c_out / n, c_in / n);
        let w = layer.weight.data_mut();
        for co in 0..c_out {
            for ci in 0..c_in {
                if co / go != ci / gi {
                    w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k].fill(0.0);
                }
            }
        }
    }
    let mixing = sparse_mixing_loss(block_diag.mixing_layers(), n, 1e-4).unwrap();
    let off_blocks_zero = block_diag.mixing_layers().iter().all(|l| {
        let blocks = block_view(l, n).unwrap();
        (0..n).all(|i| (0..n).all(|j| i == j || blocks[i][j].max_abs() == 0.0))
    });

    for layer in &mut params.decoder {
        layer.bias = Tensor::zeros(layer.bias.shape());
    }
    let zero = zero_recon_loss(&params).unwrap();

    let cfg = LossConfig {
        alpha: 1e-3,
        lambda_mixing: 0.7,
        lambda_zero_recon: 1.3,
        lambda_z: 0.05,
    };
    let b = evaluate(&params, &x, &cfg).unwrap();
    let rebuilt = b.recon + cfg.lambda_mixing * b.mixing + cfg.lambda_zero_recon * b.zero_recon + cfg.lambda_z * b.z_reg;
    let rel = (rebuilt - b.total).abs() / b.total.abs();

    let pass = mixing == 0.0 && off_blocks_zero && (zero - LN_2).abs() <= 1e-9 && rel <= 1e-12;
    report(
        2,
        "loss identities",
        pass,
        &format!("mixing {mixing:e}, zero-recon - ln2 {:.2e}, total rel err {rel:.2e}", zero - LN_2),
    );
}

const SEPARATION_SEEDS: [u64; 3] = [0, 1, 2];
const SEPARATION_EPOCHS: usize = 30;

fn separation_passes(o: &BenchmarkOutcome) -> bool {
    o.rmse_ratio() <= 0.5 && o.pulse_correlation >= 0.8
}

/// Trains seeds in order and stops once two have passed.
fn separation_runs() -> &'static [(u64, BenchmarkOutcome)] {
    static RUNS: OnceLock<Vec<(u64, BenchmarkOutcome)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut runs = Vec::new();
        for seed in SEPARATION_SEEDS {
            let outcome = run_benchmark(&BenchmarkConfig::new(seed, SEPARATION_EPOCHS)).unwrap();
            let _ = writeln!(std::io::stdout().lock(), "  separation seed {seed}: {}", outcome.summary());
            runs.push((seed, outcome));
            if runs.iter().filter(|(_, o)| separation_passes(o)).count() >= 2 {
                break;
            }
        }
        runs
    })
}

#[test]
fn criterion_3_desk_scale_separation() {
    let runs = separation_runs();
    let passed = runs.iter().filter(|(_, o)| separation_passes(o)).count();
    let detail = runs
        .iter()
        .map(|(s, o)| format!("seed {s}: ratio {:.3} corr {:.3}", o.rmse_ratio(), o.pulse_correlation))
        .collect::<Vec<_>>()
        .join("; ");
    report(3, "separation", passed >= 2, &format!("{passed} of {} seeds passed; {detail}", runs.len()));
}

#[test]
fn criterion_4_zero_masking_after_training() {
    let runs = separation_runs();
    let worst = runs.iter().map(|(_, o)| o.zero_decode_max).fold(0.0, f64::max);
    report(4, "zero masking", worst < 0.05, &format!("max decode(Z_zero) {worst:.4} over {} runs", runs.len()));
}

#[test]
fn criterion_5_preprocessing_layout() {
    let mut samples: Vec<f64> = (0..300 * 125)
        .map(|i| {
            let t = i as f64 / 125.0;
            (2.0 * PI * 1.2 * t).sin() + 0.3 * (2.0 * PI * 0.2 * t).sin()
        })
        .collect();
    let pre = preprocess(&Recording::new(samples.clone(), 125.0).unwrap()).unwrap();
    let layout_ok = pre.segments.len() == 6
        && pre.segments.iter().all(|s| {
            let core = &s.data[PAD..PAD + CORE_LEN];
            let lo = core.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = core.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            s.data.len() == SEGMENT_LEN
                && s.data[..PAD].iter().all(|&v| v == 0.0)
                && s.data[PAD + CORE_LEN..].iter().all(|&v| v == 0.0)
                && lo == 0.0
                && hi == 1.0
        });

    samples[2 * CORE_LEN..3 * CORE_LEN].fill(0.25);
    let flat = preprocess(&Recording::new(samples, 125.0).unwrap()).unwrap();
    let dropped_ok = flat.segments.len() == 5 && flat.segments.iter().all(|s| s.origin.index != 2);

    report(
        5,
        "preprocessing",
        layout_ok && dropped_ok,
        &format!("{} segments, {} after flattening window 2", pre.segments.len(), flat.segments.len()),
    );
}

#[test]
fn criterion_6_heart_rate_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for bpm in [60.0, 90.0, 120.0] {
        let (pulse, peaks) = gen_pulse_train(&HrProfile::constant(bpm), FS, 60.0, 0.3).unwrap();
        let transit = (0.2 * FS) as usize;
        let anchors: Vec<usize> = peaks.iter().filter(|&&p| p >= transit).map(|&p| p - transit).collect();
        let ecg = gen_ecg(&anchors, pulse.len(), FS, 0.02, &mut rng);
        let r_peaks = detect_r_peaks(&ecg, FS);
        let series = BeatSeries::new(detect_ppg_beats(&pulse, &r_peaks), FS).unwrap().smoothed(5);
        let dev = series.hr.iter().map(|h| (h - bpm).abs()).fold(0.0, f64::max);
        worst = worst.max(if series.hr.len() < 10 { f64::INFINITY } else { dev });
    }

    let a: Vec<f64> = (0..200).map(|i| 70.0 + 15.0 * (i as f64 * 0.13).sin() + (i % 7) as f64).collect();
    let b: Vec<f64> = a.iter().map(|v| 2.5 * v - 40.0).collect();
    let identical = rmse(&a, &a);
    let r = pearson(&a, &b);

    report(
        6,
        "heart-rate pipeline",
        worst <= 1.0 && identical == 0.0 && (r - 1.0).abs() <= 1e-12,
        &format!("max HR deviation {worst:.3} BPM, rmse(a, a) {identical}, r {r:.15}"),
    );
}

#[test]
fn criterion_7_baseline_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = 4000;
    let s1: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s2: Vec<f64> = (0..t).map(|i| ((i as f64 * 0.031) % 2.0) - 1.0).collect();
    let x = DMatrix::from_fn(2, t, |r, c| match r {
        0 => 0.8 * s1[c] + 0.4 * s2[c],
        _ => 0.3 * s1[c] + 0.9 * s2[c],
    });
    let ica = fastica(&x, 2, &IcaSettings::default()).unwrap();
    let rows: Vec<Vec<f64>> = ica.components.row_iter().map(|r| r.iter().copied().collect()).collect();
    let recovered = [&s1, &s2]
        .iter()
        .map(|s| rows.iter().map(|c| pearson(c, s).abs()).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min);

    let mut monotone = true;
    for trial in 0..20 {
        let (m, n) = (rng.random_range(4..12), rng.random_range(10..40));
        let v = DMatrix::from_fn(m, n, |_, _| rng.random_range(0.0..1.0));
        let fit = nmf(&v, 3, &NmfSettings { max_iter: 200, tol: 0.0, seed: trial }).unwrap();
        monotone &= fit.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * fit.trace[0]);
    }

    let signal: Vec<f64> = (0..500).map(|i| (i as f64 * 0.7).sin() + i as f64 * 1e-3).collect();
    let copies = pseudo_copies(&signal, 8).unwrap();
    let shifts_ok = copies.shape() == (8, signal.len() - 7)
        && (0..8).all(|k| (0..copies.ncols()).all(|j| copies[(k, j)] == signal[k + j]));

    report(
        7,
        "baselines",
        recovered > 0.95 && monotone && shifts_ok,
        &format!("ICA min |corr| {recovered:.4}, NMF monotone {monotone}, shifts {shifts_ok}"),
    );
}

fn cli(args: &[&str]) {
    run(Cli::parse_from(std::iter::once("meae").chain(args.iter().copied()))).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn criterion_8_training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cli(&["synth", "--count", "3", "--out", s(&data)]);
    let config = tmp.path().join("small.toml");
    std::fs::write(
        &config,
        "[model]\nnum_encoders = 2\nencoder_channels = [4, 4]\nencoding_channels = 2\ndecoder_group_width = 2\n\n[train]\nepochs = 3\nbatch_size = 2\n",
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        cli(&["train", "--config", s(&config), "--data", s(&data), "--seed", "11", "--out", s(out)]);
    }
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let checkpoints = names.iter().filter(|n| n.to_string_lossy().ends_with(".meae")).count();
    let identical = names
        .iter()
        .all(|n| std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap());
    report(
        8,
        "determinism",
        identical && checkpoints == 3,
        &format!("{} files compared, {checkpoints} checkpoints, identical {identical}", names.len()),
    );
}
