//! The multi-encoder autoencoder.
//!
//! `N` encoders with identical architecture read the same input. Their
//! encodings are concatenated along the channel axis and decoded by a single
//! decoder whose hidden layers are split into `N` channel groups. A source
//! estimate is obtained by zeroing every encoding except one before decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeaeError, Result};
use crate::nn::conv::{conv_output_len, transposed_output_len};
use crate::nn::{concat_channels, Activation, LayerKind, ParamLayer, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeaeConfig {
    pub num_encoders: usize,
    pub input_length: usize,
    /// Hidden channel counts of each encoder; a final layer maps to `encoding_channels`.
    pub encoder_channels: Vec<usize>,
    pub encoding_channels: usize,
    /// Channels per source group in every decoder hidden layer.
    pub decoder_group_width: usize,
    pub encoder_kernel: usize,
    pub decoder_kernel: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for MeaeConfig {
    fn default() -> Self {
        Self {
            num_encoders: 8,
            input_length: 6144,
            encoder_channels: vec![16, 32],
            encoding_channels: 4,
            decoder_group_width: 8,
            encoder_kernel: 15,
            decoder_kernel: 16,
            stride: 2,
            seed: 0,
        }
    }
}

impl MeaeConfig {
    pub fn num_layers(&self) -> usize {
        self.encoder_channels.len() + 1
    }

    pub fn encoder_padding(&self) -> usize {
        self.encoder_kernel.saturating_sub(self.stride).div_ceil(2)
    }

    pub fn decoder_padding(&self) -> usize {
        self.decoder_kernel.saturating_sub(self.stride) / 2
    }

    pub fn encoding_length(&self) -> usize {
        self.input_length / self.stride.pow(self.num_layers() as u32)
    }

    /// Elements per encoding: `C_z × encoding_length`.
    pub fn encoding_size(&self) -> usize {
        self.encoding_channels * self.encoding_length()
    }

    pub fn concat_channels(&self) -> usize {
        self.num_encoders * self.encoding_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MeaeError::Config(m));
        if self.num_encoders == 0 {
            return bad("num_encoders must be positive".into());
        }
        if self.encoding_channels == 0
            || self.decoder_group_width == 0
            || self.encoder_channels.contains(&0)
        {
            return bad("channel counts must be positive".into());
        }
        if self.stride == 0 || self.encoder_kernel == 0 || self.decoder_kernel == 0 {
            return bad("stride and kernel sizes must be positive".into());
        }
        if self.decoder_kernel < self.stride || (self.decoder_kernel - self.stride) % 2 != 0 {
            return bad(format!(
                "decoder kernel {} minus stride {} must be even and non-negative",
                self.decoder_kernel, self.stride
            ));
        }
        let total_stride = self.stride.pow(self.num_layers() as u32);
        if self.input_length == 0 || self.input_length % total_stride != 0 {
            return bad(format!(
                "input length {} is not divisible by the total stride {total_stride}",
                self.input_length
            ));
        }
        let mut len = self.input_length;
        for _ in 0..self.num_layers() {
            let out = conv_output_len(len, self.encoder_kernel, self.stride, self.encoder_padding())?;
            if out * self.stride != len {
                return bad(format!(
                    "encoder kernel {} does not halve length {len} exactly",
                    self.encoder_kernel
                ));
            }
            len = out;
        }
        for _ in 0..self.num_layers() {
            let out =
                transposed_output_len(len, self.decoder_kernel, self.stride, self.decoder_padding())?;
            if out != len * self.stride {
                return bad("decoder does not invert the encoder length".into());
            }
            len = out;
        }
        Ok(())
    }
}

/// Encoder and decoder parameter stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct MeaeParams {
    pub config: MeaeConfig,
    /// `encoders[n]` is the layer stack of encoder `n`.
    pub encoders: Vec<Vec<ParamLayer>>,
    /// Hidden transposed-conv layers followed by the pointwise output projection.
    pub decoder: Vec<ParamLayer>,
}

/// Per-encoder latents `z^0..z^{N-1}`, each `[B, C_z, encoding_length]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encodings {
    pub per_encoder: Vec<Tensor>,
}

impl Encodings {
    /// Channel-wise concatenation `Z`, preserving encoder order.
    pub fn concatenated(&self) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self.per_encoder.iter().collect();
        concat_channels(&parts)
    }

    /// `Z` with every encoding except those flagged in `keep` replaced by zeros.
    pub fn masked(&self, keep: &[bool]) -> Result<Tensor> {
        if keep.len() != self.per_encoder.len() {
            return Err(MeaeError::Shape {
                op: "Encodings::masked",
                lhs: vec![keep.len()],
                rhs: vec![self.per_encoder.len()],
            });
        }
        let zeroed: Vec<Tensor> = self
            .per_encoder
            .iter()
            .zip(keep)
            .map(|(z, &k)| if k { z.clone() } else { Tensor::zeros(z.shape()) })
            .collect();
        let parts: Vec<&Tensor> = zeroed.iter().collect();
        concat_channels(&parts)
    }
}

/// Tape handles for every parameter, in [`MeaeParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub encoders: Vec<Vec<(Var, Var)>>,
    pub decoder: Vec<(Var, Var)>,
}

impl BoundParams {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for enc in &self.encoders {
            for &(w, b) in enc {
                out.push(w);
                out.push(b);
            }
        }
        for &(w, b) in &self.decoder {
            out.push(w);
            out.push(b);
        }
        out
    }
}

fn init_layer(
    rng: &mut ChaCha8Rng,
    kind: LayerKind,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
    activation: Activation,
) -> ParamLayer {
    let bound = (1.0 / (c_in * k) as f64).sqrt();
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
    let weight = Tensor::new(vec![c_out, c_in, k], draw(c_out * c_in * k)).expect("weight shape");
    let bias = Tensor::new(vec![c_out], draw(c_out)).expect("bias shape");
    ParamLayer {
        kind,
        weight,
        bias,
        stride,
        padding,
        activation,
    }
}

impl MeaeParams {
    /// Seeded fan-in uniform initialisation, `U(±sqrt(1/(C_in·K)))` for weights and biases.
    pub fn init(config: &MeaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.num_encoders;
        let layers = config.num_layers();
        let mut enc_channels = vec![1];
        enc_channels.extend(&config.encoder_channels);
        enc_channels.push(config.encoding_channels);

        let encoders = (0..n)
            .map(|_| {
                (0..layers)
                    .map(|l| {
                        let act = if l + 1 == layers {
                            Activation::Identity
                        } else {
                            Activation::Relu
                        };
                        init_layer(
                            &mut rng,
                            LayerKind::Conv1d,
                            enc_channels[l + 1],
                            enc_channels[l],
                            config.encoder_kernel,
                            config.stride,
                            config.encoder_padding(),
                            act,
                        )
                    })
                    .collect()
            })
            .collect();

        let hidden = n * config.decoder_group_width;
        let mut decoder: Vec<ParamLayer> = (0..layers)
            .map(|l| {
                let c_in = if l == 0 { config.concat_channels() } else { hidden };
                init_layer(
                    &mut rng,
                    LayerKind::TransposedConv1d,
                    hidden,
                    c_in,
                    config.decoder_kernel,
                    config.stride,
                    config.decoder_padding(),
                    Activation::Relu,
                )
            })
            .collect();
        decoder.push(init_layer(
            &mut rng,
            LayerKind::PointwiseAffine,
            1,
            hidden,
            1,
            1,
            0,
            Activation::Sigmoid,
        ));
        Ok(Self {
            config: config.clone(),
            encoders,
            decoder,
        })
    }

    /// Decoder layers that carry an `N×N` block partition (all but the output projection).
    pub fn mixing_layers(&self) -> &[ParamLayer] {
        &self.decoder[..self.decoder.len() - 1]
    }

    /// Stable parameter names, matching [`Self::tensors`] order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (n, enc) in self.encoders.iter().enumerate() {
            for l in 0..enc.len() {
                out.push(format!("encoder.{n}.{l}.weight"));
                out.push(format!("encoder.{n}.{l}.bias"));
            }
        }
        for l in 0..self.decoder.len() {
            out.push(format!("decoder.{l}.weight"));
            out.push(format!("decoder.{l}.bias"));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.encoders
            .iter()
            .flatten()
            .chain(&self.decoder)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoders
            .iter_mut()
            .flatten()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (b, c, l) = x.dims3("encode_all")?;
        if c != 1 || l != self.config.input_length {
            return Err(MeaeError::Shape {
                op: "encode_all",
                lhs: x.shape().to_vec(),
                rhs: vec![b, 1, self.config.input_length],
            });
        }
        Ok(b)
    }

    fn check_latent(&self, z: &Tensor) -> Result<usize> {
        let (b, c, l) = z.dims3("decode")?;
        if c != self.config.concat_channels() || l != self.config.encoding_length() {
            return Err(MeaeError::Shape {
                op: "decode",
                lhs: z.shape().to_vec(),
                rhs: vec![b, self.config.concat_channels(), self.config.encoding_length()],
            });
        }
        Ok(b)
    }

    pub fn encode_one(&self, x: &Tensor, n: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let enc = self.encoders.get(n).ok_or(MeaeError::IndexOutOfRange {
            index: n,
            len: self.encoders.len(),
        })?;
        let mut h = x.clone();
        for layer in enc {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn encode_all(&self, x: &Tensor) -> Result<Encodings> {
        self.check_input(x)?;
        let per_encoder = (0..self.encoders.len())
            .map(|n| self.encode_one(x, n))
            .collect::<Result<_>>()?;
        Ok(Encodings { per_encoder })
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        let mut h = z.clone();
        for layer in &self.decoder {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// All-zero latent `Z_zero` for a batch of `batch` items.
    pub fn zero_latent(&self, batch: usize) -> Tensor {
        Tensor::zeros(&[batch, self.config.concat_channels(), self.config.encoding_length()])
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<(Tensor, Encodings)> {
        let enc = self.encode_all(x)?;
        let recon = self.decode(&enc.concatenated()?)?;
        Ok((recon, enc))
    }

    /// Source estimate `ŝ^n`: decode with every encoding except `z^n` zeroed.
    ///
    /// Masked encoders are never evaluated, so their parameters cannot influence the result.
    pub fn infer_source(&self, x: &Tensor, n: usize) -> Result<Tensor> {
        let mut keep = vec![false; self.config.num_encoders];
        *keep.get_mut(n).ok_or(MeaeError::IndexOutOfRange {
            index: n,
            len: self.config.num_encoders,
        })? = true;
        self.infer_masked(x, &keep)
    }

    /// Decodes with only the encoders flagged in `keep` active.
    pub fn infer_masked(&self, x: &Tensor, keep: &[bool]) -> Result<Tensor> {
        let batch = self.check_input(x)?;
        if keep.len() != self.config.num_encoders {
            return Err(MeaeError::Shape {
                op: "infer_masked",
                lhs: vec![keep.len()],
                rhs: vec![self.config.num_encoders],
            });
        }
        let shape = [batch, self.config.encoding_channels, self.config.encoding_length()];
        let parts = keep
            .iter()
            .enumerate()
            .map(|(n, &k)| if k { self.encode_one(x, n) } else { Ok(Tensor::zeros(&shape)) })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        self.decode(&concat_channels(&refs)?)
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut bind_layer = |l: &ParamLayer| (tape.param(l.weight.clone()), tape.param(l.bias.clone()));
        let encoders = self
            .encoders
            .iter()
            .map(|enc| enc.iter().map(&mut bind_layer).collect())
            .collect();
        let decoder = self.decoder.iter().map(&mut bind_layer).collect();
        BoundParams { encoders, decoder }
    }

    pub fn encode_on(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Vec<Var>> {
        self.check_input(tape.value(x))?;
        let mut out = Vec::with_capacity(self.encoders.len());
        for (enc, vars) in self.encoders.iter().zip(&bound.encoders) {
            let mut h = x;
            for (layer, &(w, b)) in enc.iter().zip(vars) {
                h = tape.layer(h, layer, w, b)?;
            }
            out.push(h);
        }
        Ok(out)
    }

    /// Source inference recorded on `tape`; masked encoders contribute constant zeros.
    pub fn infer_source_on(&self, tape: &mut Tape, bound: &BoundParams, x: Var, n: usize) -> Result<Var> {
        let batch = self.check_input(tape.value(x))?;
        if n >= self.encoders.len() {
            return Err(MeaeError::IndexOutOfRange {
                index: n,
                len: self.encoders.len(),
            });
        }
        let shape = [batch, self.config.encoding_channels, self.config.encoding_length()];
        let mut parts = Vec::with_capacity(self.encoders.len());
        for k in 0..self.encoders.len() {
            if k == n {
                let mut h = x;
                for (layer, &(w, b)) in self.encoders[k].iter().zip(&bound.encoders[k]) {
                    h = tape.layer(h, layer, w, b)?;
                }
                parts.push(h);
            } else {
                parts.push(tape.constant(Tensor::zeros(&shape)));
            }
        }
        let z = tape.concat_channels(&parts)?;
        self.decode_on(tape, bound, z)
    }

    pub fn decode_on(&self, tape: &mut Tape, bound: &BoundParams, z: Var) -> Result<Var> {
        self.check_latent(tape.value(z))?;
        let mut h = z;
        for (layer, &(w, b)) in self.decoder.iter().zip(&bound.decoder) {
            h = tape.layer(h, layer, w, b)?;
        }
        Ok(h)
    }
}

/// Splits a `[C_out, C_in, K]` weight into the `N×N` grid of blocks `B_ij`
/// (output group `i`, input group `j`).
pub fn block_view(layer: &ParamLayer, n: usize) -> Result<Vec<Vec<Tensor>>> {
    let (c_out, c_in, k) = (layer.out_channels(), layer.in_channels(), layer.kernel_size());
    if n == 0 || c_out % n != 0 || c_in % n != 0 {
        return Err(MeaeError::Config(format!(
            "layer with {c_out} output and {c_in} input channels is not divisible into {n} groups"
        )));
    }
    let (go, gi) = (c_out / n, c_in / n);
    let w = layer.weight.data();
    Ok((0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut data = Vec::with_capacity(go * gi * k);
                    for co in i * go..(i + 1) * go {
                        let start = (co * c_in + j * gi) * k;
                        data.extend_from_slice(&w[start..start + gi * k]);
                    }
                    Tensor::new(vec![go, gi, k], data).expect("block shape")
                })
                .collect()
        })
        .collect())
}
