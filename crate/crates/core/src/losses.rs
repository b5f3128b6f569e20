//! Training objective: reconstruction BCE, encoding L2, sparse mixing and zero reconstruction.

use serde::{Deserialize, Serialize};

use crate::error::{MeaeError, Result};
use crate::model::{BoundParams, Encodings, MeaeParams};
use crate::nn::{bce, off_diagonal_l1, ParamLayer, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Decay rate applied to off-diagonal decoder weight blocks.
    pub alpha: f64,
    pub lambda_mixing: f64,
    pub lambda_zero_recon: f64,
    pub lambda_z: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            lambda_mixing: 1.0,
            lambda_zero_recon: 1.0,
            lambda_z: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda_mixing", self.lambda_mixing),
            ("lambda_zero_recon", self.lambda_zero_recon),
            ("lambda_z", self.lambda_z),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(MeaeError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms. `mixing` already includes `alpha`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub z_reg: f64,
    pub mixing: f64,
    pub zero_recon: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub z_reg: f64,
    pub mixing: f64,
    pub zero_recon: f64,
    pub total: f64,
}

pub fn recon_loss(x: &Tensor, recon: &Tensor) -> Result<f64> {
    bce(recon, x)
}

/// `Σ_n ‖z^n‖² / (N·h)` averaged over the batch, with `h` the element count of one encoding.
pub fn encoding_l2(encodings: &Encodings) -> Result<f64> {
    let n = encodings.per_encoder.len();
    let first = encodings
        .per_encoder
        .first()
        .ok_or_else(|| MeaeError::InsufficientData("no encodings".into()))?;
    let (batch, c, l) = first.dims3("encoding_l2")?;
    let h = (c * l) as f64;
    let total: f64 = encodings.per_encoder.iter().map(Tensor::sum_squares).sum();
    Ok(total / (n as f64 * h * batch as f64))
}

/// `alpha · Σ_layers Σ_{i≠j} ‖B_ij‖₁` over block-partitioned layers.
pub fn sparse_mixing_loss(layers: &[ParamLayer], n: usize, alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for layer in layers {
        total += off_diagonal_l1(&layer.weight, n)?;
    }
    Ok(alpha * total)
}

/// BCE between `decode(Z_zero)` and an all-zero target.
pub fn zero_recon_loss(params: &MeaeParams) -> Result<f64> {
    let out = params.decode(&params.zero_latent(1))?;
    bce(&out, &Tensor::zeros(out.shape()))
}

pub fn total_loss(parts: LossParts, cfg: &LossConfig) -> Result<LossBreakdown> {
    for (name, v) in [
        ("recon", parts.recon),
        ("z_reg", parts.z_reg),
        ("mixing", parts.mixing),
        ("zero_recon", parts.zero_recon),
    ] {
        if !v.is_finite() {
            return Err(MeaeError::NonFinite(format!("loss term {name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        recon: parts.recon,
        z_reg: parts.z_reg,
        mixing: parts.mixing,
        zero_recon: parts.zero_recon,
        total: parts.recon
            + cfg.lambda_mixing * parts.mixing
            + cfg.lambda_zero_recon * parts.zero_recon
            + cfg.lambda_z * parts.z_reg,
    })
}

/// Full objective evaluated without a tape.
pub fn evaluate(params: &MeaeParams, x: &Tensor, cfg: &LossConfig) -> Result<LossBreakdown> {
    let (recon, enc) = params.reconstruct(x)?;
    let parts = LossParts {
        recon: recon_loss(x, &recon)?,
        z_reg: encoding_l2(&enc)?,
        mixing: sparse_mixing_loss(params.mixing_layers(), params.config.num_encoders, cfg.alpha)?,
        zero_recon: zero_recon_loss(params)?,
    };
    total_loss(parts, cfg)
}

/// Tape nodes of one recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub recon: Var,
    pub z_reg: Var,
    pub mixing: Var,
    pub zero_recon: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |var| tape.value(var).item();
        LossBreakdown {
            recon: v(self.recon),
            z_reg: v(self.z_reg),
            mixing: v(self.mixing),
            zero_recon: v(self.zero_recon),
            total: v(self.total),
        }
    }
}

/// Records the complete training objective for batch `x` on `tape`.
pub fn record_objective(
    params: &MeaeParams,
    tape: &mut Tape,
    bound: &BoundParams,
    x: &Tensor,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let (batch, _, _) = x.dims3("record_objective")?;
    let n = params.config.num_encoders;
    let xv = tape.constant(x.clone());
    let z = params.encode_on(tape, bound, xv)?;
    let zcat = tape.concat_channels(&z)?;
    let recon_out = params.decode_on(tape, bound, zcat)?;
    let recon = tape.bce(recon_out, x)?;

    let h = params.config.encoding_size() as f64;
    let z_reg = tape.sum_squares(zcat, 1.0 / (n as f64 * h * batch as f64));

    let mut mixing_terms = Vec::new();
    for &(w, _) in &bound.decoder[..bound.decoder.len() - 1] {
        mixing_terms.push((tape.off_diagonal_l1(w, n, cfg.alpha)?, 1.0));
    }
    let mixing = tape.weighted_sum(&mixing_terms)?;

    let zeros = tape.constant(params.zero_latent(1));
    let zero_out = params.decode_on(tape, bound, zeros)?;
    let zero_target = Tensor::zeros(tape.value(zero_out).shape());
    let zero_recon = tape.bce(zero_out, &zero_target)?;

    let total = tape.weighted_sum(&[
        (recon, 1.0),
        (mixing, cfg.lambda_mixing),
        (zero_recon, cfg.lambda_zero_recon),
        (z_reg, cfg.lambda_z),
    ])?;
    Ok(LossVars {
        recon,
        z_reg,
        mixing,
        zero_recon,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MeaeConfig;
    use crate::nn::{Activation, LayerKind};
    use std::f64::consts::LN_2;

    #[test]
    fn recon_loss_values() {
        let x = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let half = Tensor::filled(&[1, 1, 2], 0.5);
        assert!((recon_loss(&x, &half).unwrap() - LN_2).abs() < 1e-12);
        let p = Tensor::new(vec![1, 1, 2], vec![0.25, 0.75]).unwrap();
        assert!((recon_loss(&x, &p).unwrap() - (-(0.75f64).ln())).abs() < 1e-12);
        assert!(recon_loss(&x, &Tensor::filled(&[1, 1, 3], 0.5)).is_err());
    }

    #[test]
    fn encoding_l2_values() {
        let ones = Encodings {
            per_encoder: vec![Tensor::filled(&[1, 2, 2], 1.0); 2],
        };
        assert_eq!(encoding_l2(&ones).unwrap(), 1.0);
        let zeros = Encodings {
            per_encoder: vec![Tensor::zeros(&[3, 2, 2]); 2],
        };
        assert_eq!(encoding_l2(&zeros).unwrap(), 0.0);
        let scaled = Encodings {
            per_encoder: ones.per_encoder.iter().map(|z| z.map(|v| 3.0 * v)).collect(),
        };
        assert!((encoding_l2(&scaled).unwrap() - 9.0).abs() < 1e-12);
    }

    fn layer(w: Tensor) -> ParamLayer {
        let c = w.shape()[0];
        ParamLayer::new(LayerKind::TransposedConv1d, w, Tensor::zeros(&[c]), 1, 0, Activation::Relu)
            .unwrap()
    }

    #[test]
    fn sparse_mixing_values() {
        let ones = layer(Tensor::filled(&[2, 2, 1], 1.0));
        assert_eq!(sparse_mixing_loss(&[ones.clone()], 2, 0.5).unwrap(), 1.0);
        assert_eq!(sparse_mixing_loss(&[ones], 2, 1.0).unwrap(), 2.0);
        let mut diag = Tensor::zeros(&[4, 4, 2]);
        for co in 0..4 {
            for ci in 0..4 {
                if co / 2 == ci / 2 {
                    diag.data_mut()[(co * 4 + ci) * 2] = 0.7;
                }
            }
        }
        assert_eq!(sparse_mixing_loss(&[layer(diag)], 2, 1.0).unwrap(), 0.0);
        assert!(sparse_mixing_loss(&[layer(Tensor::zeros(&[3, 3, 1]))], 2, 1.0).is_err());
    }

    #[test]
    fn zero_recon_of_zero_bias_decoder_is_ln2() {
        let mut p = MeaeParams::init(&MeaeConfig {
            num_encoders: 2,
            input_length: 96,
            encoder_channels: vec![3],
            seed: 5,
            ..MeaeConfig::default()
        })
        .unwrap();
        for l in &mut p.decoder {
            l.bias = Tensor::zeros(l.bias.shape());
        }
        assert!((zero_recon_loss(&p).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting() {
        let parts = LossParts {
            recon: 0.7,
            mixing: 0.1,
            zero_recon: 0.2,
            z_reg: 0.3,
        };
        let cfg = LossConfig {
            alpha: 1.0,
            lambda_mixing: 1.0,
            lambda_zero_recon: 1.0,
            lambda_z: 1.0,
        };
        assert!((total_loss(parts, &cfg).unwrap().total - 1.3).abs() < 1e-12);
        let zero = LossConfig {
            lambda_mixing: 0.0,
            lambda_zero_recon: 0.0,
            lambda_z: 0.0,
            ..cfg
        };
        assert_eq!(total_loss(parts, &zero).unwrap().total, 0.7);
        let bad = LossParts {
            zero_recon: f64::NAN,
            ..parts
        };
        let err = total_loss(bad, &cfg).unwrap_err().to_string();
        assert!(err.contains("zero_recon"), "{err}");
    }

    #[test]
    fn negative_weights_rejected() {
        let cfg = LossConfig {
            lambda_z: -1.0,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
