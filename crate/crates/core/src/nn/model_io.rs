//! Little-endian binary model container.
//!
//! ```text
//! "PCNW" | version: u32 | count: u32 | network*
//! network := tag: u8 | in_channels: u32 | in_side: u32
//!            | n_trunk: u32 | layer* | n_heads: u32 | layer*
//! layer   := kind: u8 | k: u32 | s: u32 | [tensor(weight) tensor(bias)]
//! tensor  := ndims: u8 | dim: u32 * ndims | f32 * prod(dims)
//! ```
//!
//! Kinds: 1 conv, 2 max-pool, 3 inner product, 4 relu. Only conv and inner
//! product layers carry tensors. Heads are always inner product layers.

use std::io::{Read, Write};

use crate::error::{PcnError, Result};
use crate::tensor::Tensor;

use super::layers::{ConvLayer, FcLayer, Param};
use super::network::{Layer, Network};

pub const MAGIC: &[u8; 4] = b"PCNW";
pub const FORMAT_VERSION: u32 = 1;

const KIND_CONV: u8 = 1;
const KIND_POOL: u8 = 2;
const KIND_FC: u8 = 3;
const KIND_RELU: u8 = 4;

/// Writes tagged networks into one container.
pub fn write_networks<W: Write>(mut w: W, nets: &[(u8, &Network<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION)?;
    put_u32(&mut w, nets.len() as u32)?;
    for (tag, net) in nets {
        w.write_all(&[*tag])?;
        put_u32(&mut w, net.in_channels as u32)?;
        put_u32(&mut w, net.in_side as u32)?;
        put_u32(&mut w, net.trunk.len() as u32)?;
        for layer in &net.trunk {
            write_layer(&mut w, layer)?;
        }
        put_u32(&mut w, net.heads.len() as u32)?;
        for head in &net.heads {
            write_fc(&mut w, head)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_networks<R: Read>(mut r: R) -> Result<Vec<(u8, Network<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PcnError::Format("bad magic".into()));
    }
    let version = get_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(PcnError::Format(format!("unsupported version {version}")));
    }
    let count = get_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let tag = get_u8(&mut r)?;
        let in_channels = get_u32(&mut r)? as usize;
        let in_side = get_u32(&mut r)? as usize;
        let n_trunk = get_u32(&mut r)?;
        let trunk = (0..n_trunk)
            .map(|_| read_layer(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let n_heads = get_u32(&mut r)?;
        let heads = (0..n_heads)
            .map(|_| match read_layer(&mut r)? {
                Layer::Fc(f) => Ok(f),
                _ => Err(PcnError::Format("head is not an inner product layer".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((
            tag,
            Network {
                in_channels,
                in_side,
                trunk,
                heads,
            },
        ));
    }
    Ok(out)
}

fn write_layer<W: Write>(w: &mut W, layer: &Layer<f32>) -> Result<()> {
    match layer {
        Layer::Conv(c) => {
            w.write_all(&[KIND_CONV])?;
            put_u32(w, c.kernel as u32)?;
            put_u32(w, c.stride as u32)?;
            write_tensor(w, &c.weight.value)?;
            write_tensor(w, &c.bias.value)
        }
        Layer::MaxPool { k, s } => {
            w.write_all(&[KIND_POOL])?;
            put_u32(w, *k as u32)?;
            put_u32(w, *s as u32)
        }
        Layer::Fc(f) => write_fc(w, f),
        Layer::Relu => {
            w.write_all(&[KIND_RELU])?;
            put_u32(w, 0)?;
            put_u32(w, 0)
        }
    }
}

fn write_fc<W: Write>(w: &mut W, f: &FcLayer<f32>) -> Result<()> {
    w.write_all(&[KIND_FC])?;
    put_u32(w, 0)?;
    put_u32(w, 0)?;
    write_tensor(w, &f.weight.value)?;
    write_tensor(w, &f.bias.value)
}

fn read_layer<R: Read>(r: &mut R) -> Result<Layer<f32>> {
    let kind = get_u8(r)?;
    let k = get_u32(r)? as usize;
    let s = get_u32(r)? as usize;
    match kind {
        KIND_CONV => {
            let weight = read_tensor(r)?;
            let bias = read_tensor(r)?;
            let ws = weight.shape();
            if ws.len() != 4 || ws[2] != k || ws[3] != k || bias.shape() != [ws[0]] || s == 0 {
                return Err(PcnError::Format("inconsistent conv layer".into()));
            }
            Ok(Layer::Conv(ConvLayer {
                kernel: k,
                stride: s,
                weight: Param::new(weight),
                bias: Param::new(bias),
            }))
        }
        KIND_POOL => {
            if k == 0 || s == 0 {
                return Err(PcnError::Format("inconsistent pooling layer".into()));
            }
            Ok(Layer::MaxPool { k, s })
        }
        KIND_FC => {
            let weight = read_tensor(r)?;
            let bias = read_tensor(r)?;
            if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
                return Err(PcnError::Format("inconsistent inner product layer".into()));
            }
            Ok(Layer::Fc(FcLayer {
                weight: Param::new(weight),
                bias: Param::new(bias),
            }))
        }
        KIND_RELU => Ok(Layer::Relu),
        other => Err(PcnError::Format(format!("unknown layer kind {other}"))),
    }
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(&[t.shape().len() as u8])?;
    for &d in t.shape() {
        put_u32(w, d as u32)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let ndims = get_u8(r)? as usize;
    if ndims == 0 || ndims > 4 {
        return Err(PcnError::Format(format!("tensor rank {ndims}")));
    }
    let shape = (0..ndims)
        .map(|_| get_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    if n == 0 || n > 1 << 28 {
        return Err(PcnError::Format(format!("tensor shape {shape:?}")));
    }
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&shape, data).map_err(|e| PcnError::Format(e.to_string()))
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}
