//! FBM1 checkpoints: a layer-name table followed by little-endian `f64`
//! parameters and BN running statistics.
//!
//! ```text
//! "FBM1"
//! u32 n_params,  n_params  x (u32 name_len, name bytes, u64 len)
//! u32 n_buffers, n_buffers x (u32 name_len, name bytes, u64 len)
//! f64 x sum(param lens)
//! f64 x sum(buffer lens)
//! ```

use std::fs;
use std::path::Path;

use super::params::{Layout, ParameterVector, Segment};
use crate::error::{FedbmError, Result};

pub const FBM1_MAGIC: &[u8; 4] = b"FBM1";

pub fn encode(vector: &ParameterVector) -> Vec<u8> {
    let mut out = FBM1_MAGIC.to_vec();
    for table in [&vector.layout.params, &vector.layout.buffers] {
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        for s in table.iter() {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.len as u64).to_le_bytes());
        }
    }
    for v in vector.params.iter().chain(&vector.buffers) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ParameterVector> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| FedbmError::MalformedHeader("checkpoint truncated".into()))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != FBM1_MAGIC {
        return Err(FedbmError::MalformedHeader("bad checkpoint magic".into()));
    }
    let mut tables: [Vec<Segment>; 2] = [Vec::new(), Vec::new()];
    for table in tables.iter_mut() {
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| FedbmError::MalformedHeader("segment name is not UTF-8".into()))?
                .to_string();
            let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            table.push(Segment { name, len });
        }
    }
    let [params, buffers] = tables;
    let layout = Layout { params, buffers };
    let n_params = layout.param_len();
    let n_buffers = layout.buffer_len();
    let payload = &bytes[pos..];
    let expected = (n_params + n_buffers) * 8;
    if payload.len() != expected {
        return Err(FedbmError::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ParameterVector::new(
        layout,
        values[..n_params].to_vec(),
        values[n_params..].to_vec(),
    )
}

pub fn save(path: impl AsRef<Path>, vector: &ParameterVector) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(vector)).map_err(|e| FedbmError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParameterVector> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FedbmError::io(path, e))?;
    decode(&bytes)
}
