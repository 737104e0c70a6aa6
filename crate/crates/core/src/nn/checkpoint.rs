//! Binary network checkpoints. Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic + version, b"NNCKPT01"
//! 8       4     layer count (u32)
//! 12      12*L  layer table: in_dim u32, out_dim u32, activation u8,
//!               residual u8, reserved u16 (zero)
//! ...     8*P   payload: per layer, weights row-major then bias, f64
//! end     32    SHA-256 over every preceding byte
//! ```

use super::{Activation, Layer, MlpNetwork};
use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::io::Write as _;
use std::path::Path;

const MAGIC: &[u8; 8] = b"NNCKPT01";

pub fn to_bytes(net: &MlpNetwork) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        buf.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        buf.push(l.activation.tag());
        buf.push(u8::from(l.residual));
        buf.extend_from_slice(&[0u8; 2]);
    }
    for l in &net.layers {
        for &w in &l.weight {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for &b in &l.bias {
            buf.extend_from_slice(&b.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn from_bytes(bytes: &[u8], path: &str) -> Result<MlpNetwork> {
    let fail = |reason: String| Error::format(path, reason);
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(fail("file too short for header and checksum".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(fail("checksum mismatch".into()));
    }
    if &body[..8] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let count = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let table_end = 12 + 12 * count;
    if body.len() < table_end {
        return Err(fail("truncated layer table".into()));
    }
    let mut specs = Vec::with_capacity(count);
    for l in 0..count {
        let at = 12 + 12 * l;
        let in_dim = u32::from_le_bytes(body[at..at + 4].try_into().unwrap()) as usize;
        let out_dim = u32::from_le_bytes(body[at + 4..at + 8].try_into().unwrap()) as usize;
        let act = Activation::from_tag(body[at + 8])
            .map_err(|e| fail(format!("layer {l}: {e}")))?;
        let residual = match body[at + 9] {
            0 => false,
            1 => true,
            other => return Err(fail(format!("layer {l}: bad residual flag {other}"))),
        };
        if in_dim == 0 || out_dim == 0 {
            return Err(fail(format!("layer {l}: zero dimension")));
        }
        if residual && in_dim != out_dim {
            return Err(fail(format!("layer {l}: residual with {in_dim}x{out_dim}")));
        }
        specs.push((in_dim, out_dim, act, residual));
    }
    for w in specs.windows(2) {
        if w[0].1 != w[1].0 {
            return Err(fail("layer table is not a valid chain".into()));
        }
    }
    let payload: usize = specs.iter().map(|&(i, o, _, _)| 8 * (i * o + o)).sum();
    if body.len() != table_end + payload {
        return Err(fail(format!(
            "payload length {} does not match layer table (expected {})",
            body.len() - table_end,
            payload
        )));
    }
    let mut at = table_end;
    let mut read_f64 = |n: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f64::from_le_bytes(body[at..at + 8].try_into().unwrap()));
            at += 8;
        }
        out
    };
    let mut layers = Vec::with_capacity(count);
    for (l, &(in_dim, out_dim, activation, residual)) in specs.iter().enumerate() {
        let weight = read_f64(in_dim * out_dim);
        let bias = read_f64(out_dim);
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(fail(format!("layer {l}: non-finite parameter")));
        }
        layers.push(Layer {
            in_dim,
            out_dim,
            weight,
            bias,
            activation,
            residual,
        });
    }
    if layers.is_empty() {
        return Err(fail("checkpoint holds no layers".into()));
    }
    Ok(MlpNetwork { layers })
}

pub fn save(net: &MlpNetwork, path: &Path) -> Result<()> {
    let bytes = to_bytes(net);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MlpNetwork> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, &path.display().to_string())
}
