use crate::error::{MeaeError, Result};

/// Dense row-major `f64` tensor. Signals use the `[batch, channels, length]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MeaeError::Shape {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `[1, 1, len]` signal tensor.
    pub fn signal(samples: &[f64]) -> Self {
        Self {
            shape: vec![1, 1, samples.len()],
            data: samples.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Returns `(batch, channels, length)` for a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, c, l] => Ok((b, c, l)),
            _ => Err(MeaeError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0, 0],
            }),
        }
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(MeaeError::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.ensure_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(MeaeError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Channel slice `[c0, c1)` of a rank-3 tensor.
    pub fn channels(&self, c0: usize, c1: usize) -> Result<Tensor> {
        let (b, c, l) = self.dims3("channels")?;
        if c0 > c1 || c1 > c {
            return Err(MeaeError::IndexOutOfRange { index: c1, len: c });
        }
        let width = c1 - c0;
        let mut data = Vec::with_capacity(b * width * l);
        for bi in 0..b {
            let start = (bi * c + c0) * l;
            data.extend_from_slice(&self.data[start..start + width * l]);
        }
        Ok(Tensor {
            shape: vec![b, width, l],
            data,
        })
    }

    /// Single batch item `[1, C, L]` of a rank-3 tensor.
    pub fn batch_item(&self, index: usize) -> Result<Tensor> {
        let (b, c, l) = self.dims3("batch_item")?;
        if index >= b {
            return Err(MeaeError::IndexOutOfRange { index, len: b });
        }
        let stride = c * l;
        Ok(Tensor {
            shape: vec![1, c, l],
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }
}

/// Concatenates rank-3 tensors along the channel axis, preserving order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| MeaeError::InsufficientData("concat of zero tensors".into()))?;
    let (b, _, l) = first.dims3("concat_channels")?;
    let mut total_c = 0;
    for p in parts {
        let (pb, pc, pl) = p.dims3("concat_channels")?;
        if pb != b || pl != l {
            return Err(MeaeError::Shape {
                op: "concat_channels",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        total_c += pc;
    }
    let mut data = Vec::with_capacity(b * total_c * l);
    for bi in 0..b {
        for p in parts {
            let pc = p.shape[1];
            let start = bi * pc * l;
            data.extend_from_slice(&p.data[start..start + pc * l]);
        }
    }
    Ok(Tensor {
        shape: vec![b, total_c, l],
        data,
    })
}

/// Stacks `[1, C, L]` items into a `[B, C, L]` batch.
pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| MeaeError::InsufficientData("empty batch".into()))?;
    let (_, c, l) = first.dims3("stack_batch")?;
    let mut data = Vec::with_capacity(items.len() * c * l);
    for it in items {
        let (ib, ic, il) = it.dims3("stack_batch")?;
        if ib != 1 || ic != c || il != l {
            return Err(MeaeError::Shape {
                op: "stack_batch",
                lhs: first.shape.clone(),
                rhs: it.shape.clone(),
            });
        }
        data.extend_from_slice(&it.data);
    }
    Ok(Tensor {
        shape: vec![items.len(), c, l],
        data,
    })
}
