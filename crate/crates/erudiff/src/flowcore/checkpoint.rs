//! Binary checkpoint format.
//!
//! Layout, all multi-byte values little-endian:
//!
//! ```text
//! magic   "ERUD"            4 bytes
//! version u32               currently 1
//! d_embed u32
//! n_hidden u32
//! hidden widths             n_hidden x u32
//! vocab   u32
//! params  f32 x param_count embedding rows, then per layer weights
//!                           row-major followed by biases
//! ```
//!
//! Parameters are stored as f32; save -> load -> save is byte-identical.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flowcore::net::{Hyper, ModelParams};

pub const MAGIC: [u8; 4] = *b"ERUD";
pub const VERSION: u32 = 1;

pub fn params_to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    if !params.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    let h = &params.hyper;
    let mut out = Vec::with_capacity(4 + 4 * (3 + h.hidden.len()) + 4 * params.data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&h.d_embed.to_le_bytes());
    out.extend_from_slice(&(h.hidden.len() as u32).to_le_bytes());
    for &w in &h.hidden {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&h.vocab.to_le_bytes());
    for &v in &params.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format("truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = read_u32(&mut pos)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let d_embed = read_u32(&mut pos)?;
    let n_hidden = read_u32(&mut pos)? as usize;
    if n_hidden > 64 {
        return Err(Error::format("implausible hidden layer count"));
    }
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(read_u32(&mut pos)?);
    }
    let vocab = read_u32(&mut pos)?;
    let hyper = Hyper::new(vocab, d_embed, hidden);
    hyper
        .validate()
        .map_err(|e| Error::format(format!("bad checkpoint header: {e}")))?;

    let n = hyper.param_count();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let b = take(&mut pos, 4)?;
        data.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
    }
    if pos != bytes.len() {
        return Err(Error::format("trailing bytes in checkpoint"));
    }
    Ok(ModelParams { hyper, data })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, params_to_bytes(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    params_from_bytes(&std::fs::read(path)?)
}
