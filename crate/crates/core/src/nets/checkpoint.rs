//! Binary parameter checkpoint.
//!
//! All integers are little-endian `u32`, flags are single bytes, reals are
//! little-endian IEEE-754 `f64`. Layout, version 1:
//!
//! ```text
//! magic            8 bytes  "DCTLCKPT"
//! version          u32      1
//! use_batchnorm    u8       0 | 1
//! skip_first_bn    u8       0 | 1
//! input_scale      u32 len, f64 × len
//! output_scale     u32 len, f64 × len
//! subnet_count     u32
//! per subnetwork t (timestep order):
//!   head           u8       0 = linear, 1 = nonnegative
//!   layer_count    u32
//!   per layer k:
//!     in, out      u32, u32
//!     relu         u8
//!     has_bn       u8
//!     weight       f64 × (out · in), row-major [out, in]
//!     bias         f64 × out
//!     if has_bn:   epsilon f64, momentum f64,
//!                  gamma, beta, moving_mean, moving_var   (f64 × out each)
//! ```
//!
//! Entries are keyed by position: subnetwork `t`, layer `k`. Values are
//! stored bit-exactly, so a round trip is lossless.

use std::io::{Read, Write};

use super::{BatchNormLayer, DenseLayer, Layer, NetError, OutputHead, Subnetwork};
use crate::diffgraph::Tensor;

const MAGIC: &[u8; 8] = b"DCTLCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub subnets: Vec<Subnetwork>,
    pub input_scale: Vec<f64>,
    pub output_scale: Vec<f64>,
    pub use_batchnorm: bool,
    pub skip_first_batchnorm: bool,
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("length exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn put_u8(w: &mut impl Write, v: bool) -> std::io::Result<()> {
    w.write_all(&[v as u8])
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(mut w: impl Write, ckpt: &Checkpoint) -> Result<(), NetError> {
    let w = &mut w;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_u8(w, ckpt.use_batchnorm)?;
    put_u8(w, ckpt.skip_first_batchnorm)?;
    put_u32(w, ckpt.input_scale.len())?;
    put_f64s(w, &ckpt.input_scale)?;
    put_u32(w, ckpt.output_scale.len())?;
    put_f64s(w, &ckpt.output_scale)?;
    put_u32(w, ckpt.subnets.len())?;
    for net in &ckpt.subnets {
        put_u8(w, net.head == OutputHead::Nonnegative)?;
        put_u32(w, net.layers.len())?;
        for layer in &net.layers {
            put_u32(w, layer.dense.in_dim())?;
            put_u32(w, layer.dense.out_dim())?;
            put_u8(w, layer.relu)?;
            put_u8(w, layer.batch_norm.is_some())?;
            put_f64s(w, layer.dense.weight.data())?;
            put_f64s(w, layer.dense.bias.data())?;
            if let Some(bn) = &layer.batch_norm {
                put_f64s(w, &[bn.epsilon, bn.momentum])?;
                put_f64s(w, bn.gamma.data())?;
                put_f64s(w, bn.beta.data())?;
                put_f64s(w, &bn.moving_mean)?;
                put_f64s(w, &bn.moving_var)?;
            }
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], NetError> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| NetError::Checkpoint(format!("truncated file ({e})")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize, NetError> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn flag(&mut self) -> Result<bool, NetError> {
        match self.bytes::<1>()?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(NetError::Checkpoint(format!("invalid flag byte {b}"))),
        }
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NetError> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }

    fn dim(&mut self) -> Result<usize, NetError> {
        let d = self.u32()?;
        if d == 0 || d > 1 << 20 {
            return Err(NetError::Checkpoint(format!("implausible dimension {d}")));
        }
        Ok(d)
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint, NetError> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>()? != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    let use_batchnorm = r.flag()?;
    let skip_first_batchnorm = r.flag()?;
    let n = r.dim()?;
    let input_scale = r.f64s(n)?;
    let n = r.dim()?;
    let output_scale = r.f64s(n)?;
    let count = r.u32()?;
    let mut subnets = Vec::with_capacity(count);
    for _ in 0..count {
        let head = if r.flag()? { OutputHead::Nonnegative } else { OutputHead::Linear };
        let n_layers = r.dim()?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let din = r.dim()?;
            let dout = r.dim()?;
            let relu = r.flag()?;
            let has_bn = r.flag()?;
            let weight = Tensor::from_parts(vec![dout, din], r.f64s(dout * din)?);
            let bias = Tensor::vector(r.f64s(dout)?);
            let batch_norm = if has_bn {
                let eb = r.f64s(2)?;
                Some(BatchNormLayer {
                    epsilon: eb[0],
                    momentum: eb[1],
                    gamma: Tensor::vector(r.f64s(dout)?),
                    beta: Tensor::vector(r.f64s(dout)?),
                    moving_mean: r.f64s(dout)?,
                    moving_var: r.f64s(dout)?,
                })
            } else {
                None
            };
            layers.push(Layer { dense: DenseLayer { weight, bias }, batch_norm, relu });
        }
        for pair in layers.windows(2) {
            if pair[0].dense.out_dim() != pair[1].dense.in_dim() {
                return Err(NetError::Checkpoint("layer widths do not chain".into()));
            }
        }
        subnets.push(Subnetwork { layers, head });
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(NetError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { subnets, input_scale, output_scale, use_batchnorm, skip_first_batchnorm })
}
