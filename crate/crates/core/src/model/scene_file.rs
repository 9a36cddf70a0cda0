//! `GSSC` scene container.
//!
//! Little-endian. Header: magic `GSSC`, version `u16`, frame count `u32`, SH
//! degree `u8`. Each frame: primitive count `u32`, then one record of `f64`s
//! per primitive in parameter order (position, quaternion, log-scale,
//! opacity logit, color, SH).

use std::io::{Read, Write};

use super::{GaussianFrame, GaussianPrimitive, ShDegree};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GSSC";
pub const VERSION: u16 = 1;

pub fn write_scene<W: Write>(mut w: W, frames: &[GaussianFrame]) -> Result<()> {
    let degree = frames.first().map(|f| f.sh_degree()).unwrap_or(ShDegree::ZERO);
    if frames.iter().any(|f| f.sh_degree() != degree) {
        return Err(Error::structural("scene frames disagree on SH degree"));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(frames.len() as u32).to_le_bytes())?;
    w.write_all(&[degree.get()])?;
    let len = degree.param_len();
    let mut buf = vec![0.0; len];
    for f in frames {
        w.write_all(&(f.len() as u32).to_le_bytes())?;
        for p in f.primitives() {
            p.write_params(degree, &mut buf);
            for v in &buf {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::decode(format!("scene file truncated: {e}")))?;
    Ok(b)
}

/// Reads every frame. Frame `i` gets `frame_index = group_key = i`.
pub fn read_scene<R: Read>(mut r: R) -> Result<Vec<GaussianFrame>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::decode("bad scene magic"));
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::decode(format!("unsupported scene version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let degree = ShDegree::new(read_exact::<_, 1>(&mut r)?[0])?;
    let len = degree.param_len();
    let mut frames = Vec::with_capacity(count as usize);
    let mut params = vec![0.0; len];
    for t in 0..count {
        let n = u32::from_le_bytes(read_exact(&mut r)?);
        let mut prims = Vec::with_capacity(n as usize);
        for _ in 0..n {
            for v in params.iter_mut() {
                *v = f64::from_le_bytes(read_exact(&mut r)?);
            }
            prims.push(GaussianPrimitive::from_params(degree, &params));
        }
        frames.push(GaussianFrame::new(t, t, degree, prims)?);
    }
    Ok(frames)
}
