//! Binary model container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "CROPMDL"                     7 bytes
//! version                       u32 (= 1)
//! metric kind                   u32 (0 accuracy, 1 balanced, 2 f1_binary)
//! number of layer dims          u64
//! layer dims                    u64 each
//! per layer: weights then bias  f64 each, weights row-major (out x in)
//! mask present                  u8 (0 or 1)
//! mask bits                     ceil(N/8) bytes, LSB first, 1 = kept
//! metadata length               u64
//! metadata                      UTF-8 bytes
//! ```
//!
//! Hidden layers are ReLU and the output layer is linear.

use std::fs;
use std::path::Path;

use crate::error::{CropError, Result};
use crate::metrics::MetricKind;
use crate::nn::{Activation, Layer, ModelParams};
use crate::pruning::Mask;

pub const MAGIC: &[u8; 7] = b"CROPMDL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: ModelParams,
    pub metric: MetricKind,
    pub mask: Option<Mask>,
    pub metadata: String,
}

impl ModelFile {
    pub fn new(model: ModelParams) -> Self {
        ModelFile {
            model,
            metric: MetricKind::Accuracy,
            mask: None,
            metadata: String::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.model.layer_dims();
        let mut out = Vec::with_capacity(64 + 8 * self.model.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.metric.code().to_le_bytes());
        out.extend_from_slice(&(dims.len() as u64).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for layer in self.model.layers() {
            for v in layer.weights.iter().chain(&layer.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.mask {
            None => out.push(0),
            Some(mask) => {
                out.push(1);
                let mut bytes = vec![0u8; mask.len().div_ceil(8)];
                for (i, keep) in mask.flat().enumerate() {
                    if keep {
                        bytes[i / 8] |= 1 << (i % 8);
                    }
                }
                out.extend_from_slice(&bytes);
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CropError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CropError::Format(format!("unsupported version {version}")));
        }
        let metric = MetricKind::from_code(r.u32()?)
            .ok_or_else(|| CropError::Format("unknown metric kind".into()))?;
        let n_dims = r.u64()? as usize;
        if !(2..=1024).contains(&n_dims) {
            return Err(CropError::Format(format!("implausible layer count {n_dims}")));
        }
        let dims = (0..n_dims)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let last = dims.len() - 2;
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (inputs, outputs) = (pair[0], pair[1]);
            let count = inputs
                .checked_mul(outputs)
                .filter(|c| c * 8 <= r.remaining())
                .ok_or_else(|| CropError::Format("layer larger than file".into()))?;
            let weights = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let bias = (0..outputs).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let activation = if i == last {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Layer::new(inputs, outputs, weights, bias, activation)?);
        }
        let model = ModelParams::new(layers)?;
        let mask = match r.take(1)?[0] {
            0 => None,
            1 => {
                let n = model.num_weights();
                let bytes = r.take(n.div_ceil(8))?;
                let bits: Vec<bool> = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
                Some(Mask::from_flat(&model, &bits)?)
            }
            other => return Err(CropError::Format(format!("bad mask flag {other}"))),
        };
        let meta_len = r.u64()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| CropError::Format("metadata is not UTF-8".into()))?;
        if r.remaining() != 0 {
            return Err(CropError::Format("trailing bytes after metadata".into()));
        }
        Ok(ModelFile {
            model,
            metric,
            mask,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(CropError::Format("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
