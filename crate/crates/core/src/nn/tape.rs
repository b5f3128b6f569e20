//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every recorded operation appends a node holding its forward value. A single
//! [`Tape::backward`] call walks the nodes in exact reverse order of recording
//! and accumulates gradients into their inputs. Only the operations the
//! multi-encoder autoencoder needs are supported.

use crate::error::{MeaeError, Result};
use crate::nn::conv::{
    bce_term, bce_term_grad, conv1d_backward, conv1d_forward, sigmoid_scalar,
    transposed_conv1d_backward, transposed_conv1d_forward, Activation, LayerKind, ParamLayer,
};
use crate::nn::tensor::{concat_channels, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        transposed: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Bce {
        pred: Var,
        target: Tensor,
    },
    SumSquares {
        x: Var,
        scale: f64,
    },
    OffDiagonalL1 {
        w: Var,
        groups: usize,
        scale: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not reach the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a value that never receives a gradient (data, masks, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = conv1d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                stride,
                padding,
                transposed: false,
            },
            rg,
        ))
    }

    pub fn transposed_conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value =
            transposed_conv1d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                stride,
                padding,
                transposed: true,
            },
            rg,
        ))
    }

    /// Applies `layer`'s convolution and activation using `w`/`b` as its parameters.
    pub fn layer(&mut self, x: Var, layer: &ParamLayer, w: Var, b: Var) -> Result<Var> {
        let pre = match layer.kind {
            LayerKind::Conv1d | LayerKind::PointwiseAffine => {
                self.conv1d(x, w, b, layer.stride, layer.padding)?
            }
            LayerKind::TransposedConv1d => {
                self.transposed_conv1d(x, w, b, layer.stride, layer.padding)?
            }
        };
        Ok(match layer.activation {
            Activation::Relu => self.relu(pre),
            Activation::Sigmoid => self.sigmoid(pre),
            Activation::Identity => pre,
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid_scalar);
        let rg = self.needs(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = concat_channels(&tensors)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Mean clamped binary cross-entropy of `pred` against a fixed target.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        p.ensure_same_shape(target, "bce")?;
        let sum: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| bce_term(p, t))
            .sum();
        let value = Tensor::scalar(sum / p.len() as f64);
        let rg = self.needs(pred);
        Ok(self.push(
            value,
            Op::Bce {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// `scale · Σ x²`.
    pub fn sum_squares(&mut self, x: Var, scale: f64) -> Var {
        let value = Tensor::scalar(scale * self.value(x).sum_squares());
        let rg = self.needs(x);
        self.push(value, Op::SumSquares { x, scale }, rg)
    }

    /// `scale · Σ_{i≠j} ‖B_ij‖₁` over the `groups × groups` block view of a `[C_out, C_in, K]` weight.
    pub fn off_diagonal_l1(&mut self, w: Var, groups: usize, scale: f64) -> Result<Var> {
        let l1 = off_diagonal_l1(self.value(w), groups)?;
        let rg = self.needs(w);
        Ok(self.push(
            Tensor::scalar(scale * l1),
            Op::OffDiagonalL1 { w, groups, scale },
            rg,
        ))
    }

    /// `Σ cᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(MeaeError::Shape {
                    op: "weighted_sum",
                    lhs: t.shape().to_vec(),
                    rhs: vec![1],
                });
            }
            total += c * t.item();
        }
        let rg = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Reverse pass from a scalar `loss`. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(MeaeError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(MeaeError::Shape {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        self.spent = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                    transposed,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let need_dx = self.nodes[x.0].requires_grad;
                    let (dx, dw, db) = if *transposed {
                        transposed_conv1d_backward(&g, xv, wv, *stride, *padding, need_dx)
                    } else {
                        conv1d_backward(&g, xv, wv, *stride, *padding, need_dx)
                    };
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let width = self.nodes[p.0].value.shape()[1];
                        accumulate(&mut grads, p, g.channels(c0, c0 + width)?);
                        c0 += width;
                    }
                }
                Op::Bce { pred, target } => {
                    let pv = &self.nodes[pred.0].value;
                    let scale = g.item() / pv.len() as f64;
                    let data = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| scale * bce_term_grad(p, t))
                        .collect();
                    accumulate(&mut grads, *pred, Tensor::new(pv.shape().to_vec(), data)?);
                }
                Op::SumSquares { x, scale } => {
                    let factor = 2.0 * scale * g.item();
                    let dx = self.nodes[x.0].value.map(|v| factor * v);
                    accumulate(&mut grads, *x, dx);
                }
                Op::OffDiagonalL1 { w, groups, scale } => {
                    let wv = &self.nodes[w.0].value;
                    let factor = scale * g.item();
                    let mut dw = Tensor::zeros(wv.shape());
                    for_each_off_diagonal(wv, *groups, |i, v| {
                        dw.data_mut()[i] = factor * sign(v);
                    })?;
                    accumulate(&mut grads, *w, dw);
                }
                Op::WeightedSum(terms) => {
                    for &(v, c) in terms {
                        let shape = self.nodes[v.0].value.shape();
                        accumulate(&mut grads, v, Tensor::filled(shape, c * g.item()));
                    }
                }
            }
        }

        // Intermediate gradients were consumed on the way down; only leaves keep theirs.
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Visits `(flat index, value)` for every weight outside the diagonal blocks.
pub(crate) fn for_each_off_diagonal(
    weight: &Tensor,
    groups: usize,
    mut f: impl FnMut(usize, f64),
) -> Result<()> {
    let s = weight.shape();
    if s.len() != 3 || groups == 0 || s[0] % groups != 0 || s[1] % groups != 0 {
        return Err(MeaeError::Config(format!(
            "weight {s:?} cannot be partitioned into {groups}x{groups} blocks"
        )));
    }
    let (c_out, c_in, k) = (s[0], s[1], s[2]);
    let (go, gi) = (c_out / groups, c_in / groups);
    let data = weight.data();
    for co in 0..c_out {
        for ci in 0..c_in {
            if co / go == ci / gi {
                continue;
            }
            let base = (co * c_in + ci) * k;
            for i in base..base + k {
                f(i, data[i]);
            }
        }
    }
    Ok(())
}

/// Raw L1 mass of the off-diagonal blocks.
pub fn off_diagonal_l1(weight: &Tensor, groups: usize) -> Result<f64> {
    let mut total = 0.0;
    for_each_off_diagonal(weight, groups, |_, v| total += v.abs())?;
    Ok(total)
}
