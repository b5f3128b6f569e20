//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MEAE" | u32 version | config | u32 tensor count | records...
//! config  = u64 fields: num_encoders, input_length, #encoder_channels,
//!           encoder_channels..., encoding_channels, decoder_group_width,
//!           encoder_kernel, decoder_kernel, stride, seed
//! record  = u32 name length | name (UTF-8) | u32 rank | u64 dims... | f32 data...
//! ```
//!
//! Parameters are stored as 32-bit floats. Training state that must resume
//! bit-exactly uses the same record layout with 64-bit floats (see
//! [`crate::train::ResumeState`]).

use std::path::Path;

use crate::error::{MeaeError, Result};
use crate::model::{MeaeConfig, MeaeParams};
use crate::nn::Tensor;
use crate::signal::write_atomic;

pub const MAGIC: &[u8; 4] = b"MEAE";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Precision {
    F32,
    F64,
}

pub(crate) struct Writer {
    pub(crate) buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn config(&mut self, c: &MeaeConfig) {
        self.u64(c.num_encoders as u64);
        self.u64(c.input_length as u64);
        self.u64(c.encoder_channels.len() as u64);
        for &ch in &c.encoder_channels {
            self.u64(ch as u64);
        }
        for v in [
            c.encoding_channels,
            c.decoder_group_width,
            c.encoder_kernel,
            c.decoder_kernel,
            c.stride,
        ] {
            self.u64(v as u64);
        }
        self.u64(c.seed);
    }

    pub(crate) fn records<'a>(&mut self, items: impl ExactSizeIterator<Item = (String, &'a Tensor)>, p: Precision) {
        self.u32(items.len() as u32);
        for (name, t) in items {
            self.u32(name.len() as u32);
            self.buf.extend_from_slice(name.as_bytes());
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for &v in t.data() {
                match p {
                    Precision::F32 => self.buf.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => self.buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a Path,
}

impl<'a> Reader<'a> {
    /// Checks magic and version, leaving the cursor after the header.
    pub(crate) fn open(bytes: &'a [u8], source: &'a Path, magic: &[u8; 4], version: u32) -> Result<Self> {
        let mut r = Self { bytes, pos: 0, source };
        if r.take(4)? != magic {
            return Err(r.err(&format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        let found = r.u32()?;
        if found != version {
            return Err(MeaeError::UnsupportedVersion {
                found,
                expected: version,
            });
        }
        Ok(r)
    }

    pub(crate) fn err(&self, msg: &str) -> MeaeError {
        MeaeError::Checkpoint {
            path: self.source.to_path_buf(),
            msg: format!("{msg} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err("value does not fit in usize"))
    }

    pub(crate) fn config(&mut self) -> Result<MeaeConfig> {
        let num_encoders = self.usize()?;
        let input_length = self.usize()?;
        let depth = self.usize()?;
        if depth > 64 {
            return Err(self.err("implausible encoder depth"));
        }
        let encoder_channels = (0..depth).map(|_| self.usize()).collect::<Result<_>>()?;
        let config = MeaeConfig {
            num_encoders,
            input_length,
            encoder_channels,
            encoding_channels: self.usize()?,
            decoder_group_width: self.usize()?,
            encoder_kernel: self.usize()?,
            decoder_kernel: self.usize()?,
            stride: self.usize()?,
            seed: self.u64()?,
        };
        config.validate().map_err(|e| self.err(&format!("invalid config: {e}")))?;
        Ok(config)
    }

    /// Reads a record block and checks it matches `expected` names and shapes exactly.
    pub(crate) fn records(&mut self, expected: &[(String, Vec<usize>)], p: Precision) -> Result<Vec<Tensor>> {
        let count = self.u32()? as usize;
        if count != expected.len() {
            return Err(self.err(&format!("expected {} tensors, found {count}", expected.len())));
        }
        let mut out = Vec::with_capacity(count);
        for (name, shape) in expected {
            let len = self.u32()? as usize;
            let found = self.take(len)?;
            if found != name.as_bytes() {
                return Err(self.err(&format!(
                    "expected tensor {name:?}, found {:?}",
                    String::from_utf8_lossy(found)
                )));
            }
            let rank = self.u32()? as usize;
            let dims = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(self.err(&format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
            }
            let n: usize = dims.iter().product();
            let data = match p {
                Precision::F32 => self
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Precision::F64 => self
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            out.push(Tensor::new(dims, data)?);
        }
        Ok(out)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err("trailing bytes after last record"));
        }
        Ok(())
    }
}

pub(crate) fn layout(params: &MeaeParams) -> Vec<(String, Vec<usize>)> {
    params
        .names()
        .into_iter()
        .zip(params.tensors())
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect()
}

/// Builds parameters for `config` and overwrites them with `tensors` (in canonical order).
pub(crate) fn params_from(config: MeaeConfig, tensors: Vec<Tensor>) -> Result<MeaeParams> {
    let mut params = MeaeParams::init(&config)?;
    for (dst, src) in params.tensors_mut().into_iter().zip(tensors) {
        *dst = src;
    }
    Ok(params)
}

pub(crate) fn named(params: &MeaeParams) -> impl ExactSizeIterator<Item = (String, &Tensor)> {
    params.names().into_iter().zip(params.tensors())
}

pub fn encode_checkpoint(params: &MeaeParams) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.config(&params.config);
    w.records(named(params), Precision::F32);
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8], source: &Path) -> Result<MeaeParams> {
    let mut r = Reader::open(bytes, source, MAGIC, VERSION)?;
    let config = r.config()?;
    let expected = layout(&MeaeParams::init(&config)?);
    let tensors = r.records(&expected, Precision::F32)?;
    r.finish()?;
    params_from(config, tensors)
}

pub fn save_checkpoint(params: &MeaeParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<MeaeParams> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, path)
}
