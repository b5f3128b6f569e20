//! Gradient oracles: direct-summation convolution adjoints and central
//! finite differences of the full training objective.

use meae_core::losses::{evaluate, record_objective, LossConfig};
use meae_core::model::{MeaeConfig, MeaeParams};
use meae_core::nn::{Activation, LayerKind, ParamLayer, Tape, Tensor};
use proptest::prelude::*;

/// Direct cross-correlation: out[b,co,t] = bias[co] + Σ w[co,ci,k]·x[b,ci,t·s+k−p].
fn naive_conv(x: &[f64], dims: (usize, usize, usize), w: &[f64], wd: (usize, usize, usize), bias: &[f64], s: usize, p: usize) -> (Vec<f64>, usize) {
    let (b, ci_n, l) = dims;
    let (co_n, _, k) = wd;
    let l_out = (l + 2 * p - k) / s + 1;
    let mut out = vec![0.0; b * co_n * l_out];
    for bi in 0..b {
        for co in 0..co_n {
            for t in 0..l_out {
                let mut acc = bias[co];
                for ci in 0..ci_n {
                    for kk in 0..k {
                        let pos = (t * s + kk) as isize - p as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc += w[(co * ci_n + ci) * k + kk] * x[(bi * ci_n + ci) * l + pos as usize];
                        }
                    }
                }
                out[(bi * co_n + co) * l_out + t] = acc;
            }
        }
    }
    (out, l_out)
}

/// Gradient of Σ g·conv(x) with respect to x, by enumerating every contributing term.
fn naive_conv_input_grad(g: &[f64], dims: (usize, usize, usize), w: &[f64], wd: (usize, usize, usize), s: usize, p: usize, l_out: usize) -> Vec<f64> {
    let (b, ci_n, l) = dims;
    let (co_n, _, k) = wd;
    let mut dx = vec![0.0; b * ci_n * l];
    for bi in 0..b {
        for co in 0..co_n {
            for t in 0..l_out {
                for ci in 0..ci_n {
                    for kk in 0..k {
                        let pos = (t * s + kk) as isize - p as isize;
                        if pos >= 0 && (pos as usize) < l {
                            dx[(bi * ci_n + ci) * l + pos as usize] +=
                                g[(bi * co_n + co) * l_out + t] * w[(co * ci_n + ci) * k + kk];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn naive_conv_weight_grad(g: &[f64], dims: (usize, usize, usize), x: &[f64], wd: (usize, usize, usize), s: usize, p: usize, l_out: usize) -> Vec<f64> {
    let (b, ci_n, l) = dims;
    let (co_n, _, k) = wd;
    let mut dw = vec![0.0; co_n * ci_n * k];
    for bi in 0..b {
        for co in 0..co_n {
            for t in 0..l_out {
                for ci in 0..ci_n {
                    for kk in 0..k {
                        let pos = (t * s + kk) as isize - p as isize;
                        if pos >= 0 && (pos as usize) < l {
                            dw[(co * ci_n + ci) * k + kk] +=
                                g[(bi * co_n + co) * l_out + t] * x[(bi * ci_n + ci) * l + pos as usize];
                        }
                    }
                }
            }
        }
    }
    dw
}

/// Direct transposed convolution: out[b,co,t·s+k−p] += w[co,ci,k]·x[b,ci,t].
fn naive_transposed(x: &[f64], dims: (usize, usize, usize), w: &[f64], wd: (usize, usize, usize), s: usize, p: usize) -> Vec<f64> {
    let (b, ci_n, l) = dims;
    let (co_n, _, k) = wd;
    let l_out = (l - 1) * s + k - 2 * p;
    let mut out = vec![0.0; b * co_n * l_out];
    for bi in 0..b {
        for co in 0..co_n {
            for ci in 0..ci_n {
                for t in 0..l {
                    for kk in 0..k {
                        let pos = (t * s + kk) as isize - p as isize;
                        if pos >= 0 && (pos as usize) < l_out {
                            out[(bi * co_n + co) * l_out + pos as usize] +=
                                w[(co * ci_n + ci) * k + kk] * x[(bi * ci_n + ci) * l + t];
                        }
                    }
                }
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn conv1d_forward_and_backward_match_direct_summation(
        b in 1usize..=2, ci in 1usize..=3, co in 1usize..=3, l in 4usize..=16,
        k in 1usize..=4, s in 1usize..=3, p in 0usize..=2, seed in any::<u64>()
    ) {
        prop_assume!(l + 2 * p >= k);
        let x = values(b * ci * l, seed);
        let w = values(co * ci * k, seed ^ 1);
        let bias = values(co, seed ^ 2);
        let (expected, l_out) = naive_conv(&x, (b, ci, l), &w, (co, ci, k), &bias, s, p);

        let mut tape = Tape::new();
        let xv = tape.param(Tensor::new(vec![b, ci, l], x.clone()).unwrap());
        let wv = tape.param(Tensor::new(vec![co, ci, k], w.clone()).unwrap());
        let bv = tape.param(Tensor::new(vec![co], bias).unwrap());
        let y = tape.conv1d(xv, wv, bv, s, p).unwrap();
        prop_assert!(close(tape.value(y).data(), &expected, 1e-12));

        // Σ g·y with a fixed random cotangent g, expressed as a 1x1 conv against g.
        let g = values(b * co * l_out, seed ^ 3);
        let gsum: f64 = tape.value(y).data().iter().zip(&g).map(|(a, c)| a * c).sum();
        let gt = tape.constant(Tensor::new(vec![b, co, l_out], g.clone()).unwrap());
        let prod = weighted_inner(&mut tape, y, gt);
        prop_assert!((tape.value(prod).item() - gsum).abs() < 1e-9);
        let grads = tape.backward(prod).unwrap();
        let dx = naive_conv_input_grad(&g, (b, ci, l), &w, (co, ci, k), s, p, l_out);
        let dw = naive_conv_weight_grad(&g, (b, ci, l), &x, (co, ci, k), s, p, l_out);
        prop_assert!(close(grads.get(xv).data(), &dx, 1e-12));
        prop_assert!(close(grads.get(wv).data(), &dw, 1e-12));
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv(
        b in 1usize..=2, ci in 1usize..=3, co in 1usize..=3, l in 2usize..=10,
        k in 1usize..=4, s in 1usize..=3, seed in any::<u64>()
    ) {
        let p = 0;
        let x = values(b * ci * l, seed);
        let w = values(co * ci * k, seed ^ 7);
        let expected = naive_transposed(&x, (b, ci, l), &w, (co, ci, k), s, p);
        let layer = ParamLayer::new(
            LayerKind::TransposedConv1d,
            Tensor::new(vec![co, ci, k], w.clone()).unwrap(),
            Tensor::zeros(&[co]),
            s, p, Activation::Identity,
        ).unwrap();
        let got = layer.forward(&Tensor::new(vec![b, ci, l], x).unwrap()).unwrap();
        prop_assert!(close(got.data(), &expected, 1e-12));
    }
}

/// Records Σ y·g on the tape using only supported ops (sum of squares identity).
fn weighted_inner(tape: &mut Tape, y: meae_core::nn::Var, g: meae_core::nn::Var) -> meae_core::nn::Var {
    // ⟨y,g⟩ = (‖y+g‖² − ‖y‖² − ‖g‖²)/2; the ‖g‖² term is a constant.
    let yv = tape.value(y).clone();
    let gv = tape.value(g).clone();
    let (b, c, l) = yv.dims3("inner").unwrap();
    // y + g through a pointwise identity conv with g as bias-free second input.
    let cat = tape.concat_channels(&[y, g]).unwrap();
    let mut w = Tensor::zeros(&[c, 2 * c, 1]);
    for i in 0..c {
        w.data_mut()[i * 2 * c + i] = 1.0;
        w.data_mut()[i * 2 * c + c + i] = 1.0;
    }
    let wv = tape.constant(w);
    let bv = tape.constant(Tensor::zeros(&[c]));
    let sum = tape.conv1d(cat, wv, bv, 1, 0).unwrap();
    let a = tape.sum_squares(sum, 0.5);
    let bq = tape.sum_squares(y, -0.5);
    let _ = (b, l);
    let g2 = tape.constant(Tensor::scalar(gv.sum_squares()));
    tape.weighted_sum(&[(a, 1.0), (bq, 1.0), (g2, -0.5)]).unwrap()
}

fn gradient_check_config() -> MeaeConfig {
    MeaeConfig {
        num_encoders: 2,
        input_length: 96,
        encoder_channels: vec![4, 6],
        encoding_channels: 2,
        decoder_group_width: 3,
        encoder_kernel: 15,
        decoder_kernel: 16,
        stride: 2,
        seed: 2024,
    }
}

fn smooth_batch(len: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * len);
    for b in 0..2 {
        for i in 0..len {
            let t = i as f64 / len as f64;
            data.push(0.5 + 0.4 * (2.0 * std::f64::consts::PI * (3.0 + b as f64) * t).sin() * (1.0 - t));
        }
    }
    Tensor::new(vec![2, 1, len], data).unwrap()
}

/// Relative error with a floor on the denominator so gradients that are zero
/// up to rounding do not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[test]
fn full_objective_matches_central_differences() {
    let cfg = gradient_check_config();
    let loss_cfg = LossConfig { alpha: 1e-2, ..LossConfig::default() };
    let params = MeaeParams::init(&cfg).unwrap();
    let x = smooth_batch(cfg.input_length);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vars = record_objective(&params, &mut tape, &bound, &x, &loss_cfg).unwrap();
    let taped = vars.breakdown(&tape);
    let direct = evaluate(&params, &x, &loss_cfg).unwrap();
    assert!((taped.total - direct.total).abs() < 1e-12 * direct.total.abs());
    let mut grads = tape.backward(vars.total).unwrap();
    let analytic: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.take(v)).collect();

    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let names = params.names();
    let mut probe = params.clone();
    for (ti, name) in names.iter().enumerate() {
        for i in 0..analytic[ti].len() {
            let orig = probe.tensors()[ti].data()[i];
            probe.tensors_mut()[ti].data_mut()[i] = orig + h;
            let up = evaluate(&probe, &x, &loss_cfg).unwrap().total;
            probe.tensors_mut()[ti].data_mut()[i] = orig - h;
            let down = evaluate(&probe, &x, &loss_cfg).unwrap().total;
            probe.tensors_mut()[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[ti].data()[i], numeric);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}] analytic {} numeric {numeric}", analytic[ti].data()[i]));
            }
        }
    }
    println!("max relative error {:.3e} at {}", worst.0, worst.1);
    assert!(worst.0 < 1e-4, "max relative error {:.3e} at {}", worst.0, worst.1);
}
