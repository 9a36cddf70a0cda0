//! Wire formats.
//!
//! Keyframes travel as a set of attribute images: one 16-bit plane per scalar
//! parameter, with primitive `i` at pixel `i` (row-major) of every plane.
//! Each plane carries its own affine dequantization.
//!
//! `GSAI` container, little-endian:
//!
//! ```text
//! magic "GSAI" | version u16 | n u32 | m u16 | w u32 | h u32 | bit_depth u8
//! m x ( scale f64 | offset f64 | w*h x u16 )
//! ```
//!
//! Deltas travel as sparse payloads:
//!
//! ```text
//! magic "GSDP" | frame_index u32 | base_key u32 | entry_count u32
//! base_count u32 | param_len u8 | quant_step f64
//! entry_count x index (first raw, then gaps; unsigned LEB128)
//! entry_count x param_len x i32 (value = q * quant_step)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::model::{snap, DeltaTensor, GaussianFrame, ShDegree};

pub const FRAME_MAGIC: &[u8; 4] = b"GSAI";
pub const FRAME_VERSION: u16 = 1;
pub const BIT_DEPTH: u8 = 16;
pub const FRAME_HEADER_BYTES: usize = 21;
const PLANE_HEADER_BYTES: usize = 16;

pub const DELTA_MAGIC: &[u8; 4] = b"GSDP";
pub const DELTA_HEADER_BYTES: usize = 29;

const LEVELS: f64 = 65535.0;

/// One attribute plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePlane {
    /// Dequantized value is `offset + scale * pixel`; `scale` is also the
    /// quantization step of the plane.
    pub scale: f64,
    pub offset: f64,
    pub pixels: Vec<u16>,
}

impl AttributePlane {
    fn encode(values: &[f64], pixels: usize) -> AttributePlane {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if values.is_empty() || hi == lo {
            return AttributePlane {
                scale: 0.0,
                offset: if values.is_empty() { 0.0 } else { lo },
                pixels: vec![0; pixels],
            };
        }
        let scale = (hi - lo) / LEVELS;
        let mut out = vec![0u16; pixels];
        for (o, v) in out.iter_mut().zip(values) {
            *o = ((v - lo) / scale).round().clamp(0.0, LEVELS) as u16;
        }
        AttributePlane {
            scale,
            offset: lo,
            pixels: out,
        }
    }

    pub fn value(&self, i: usize) -> f64 {
        self.offset + self.scale * self.pixels[i] as f64
    }
}

/// A frame as `m` co-registered attribute images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeImageSet {
    n: u32,
    width: u32,
    height: u32,
    planes: Vec<AttributePlane>,
}

impl AttributeImageSet {
    pub fn primitive_count(&self) -> usize {
        self.n as usize
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bit_depth(&self) -> u8 {
        BIT_DEPTH
    }

    pub fn planes(&self) -> &[AttributePlane] {
        &self.planes
    }

    /// Dequantized value of pixel `i` in image `j`.
    pub fn pixel(&self, j: usize, i: usize) -> f64 {
        self.planes[j].value(i)
    }

    pub fn byte_len(&self) -> usize {
        FRAME_HEADER_BYTES + self.planes.len() * (PLANE_HEADER_BYTES + 2 * (self.width * self.height) as usize)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(FRAME_MAGIC);
        out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&(self.planes.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(BIT_DEPTH);
        for p in &self.planes {
            out.extend_from_slice(&p.scale.to_le_bytes());
            out.extend_from_slice(&p.offset.to_le_bytes());
            for px in &p.pixels {
                out.extend_from_slice(&px.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != FRAME_MAGIC {
            return Err(Error::decode("not an attribute-image container"));
        }
        let version = r.u16()?;
        if version != FRAME_VERSION {
            return Err(Error::decode(format!("unsupported container version {version}")));
        }
        let n = r.u32()?;
        let m = r.u16()? as usize;
        let width = r.u32()?;
        let height = r.u32()?;
        let depth = r.u8()?;
        if depth != BIT_DEPTH {
            return Err(Error::decode(format!("unsupported bit depth {depth}")));
        }
        ShDegree::from_param_len(m).map_err(|_| Error::decode(format!("{m} planes match no parameter layout")))?;
        let pixels = width as u64 * height as u64;
        if (n as u64) > pixels {
            return Err(Error::decode(format!("{n} primitives in a {width}x{height} image")));
        }
        let need = m as u64 * (PLANE_HEADER_BYTES as u64 + 2 * pixels);
        if need != r.remaining() as u64 {
            return Err(Error::decode(format!(
                "container body is {} bytes, expected {need}",
                r.remaining()
            )));
        }
        let mut planes = Vec::with_capacity(m);
        for _ in 0..m {
            let scale = r.f64()?;
            let offset = r.f64()?;
            if !scale.is_finite() || !offset.is_finite() || scale < 0.0 {
                return Err(Error::decode("invalid plane dequantization"));
            }
            let raw = r.take(2 * pixels as usize)?;
            let pixels = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
            planes.push(AttributePlane { scale, offset, pixels });
        }
        Ok(AttributeImageSet {
            n,
            width,
            height,
            planes,
        })
    }
}

/// Smallest square image holding `n` pixels.
pub fn square_side(n: usize) -> u32 {
    let mut s = (n as f64).sqrt().ceil() as u32;
    while (s as usize) * (s as usize) < n {
        s += 1;
    }
    s
}

/// Packs a frame into square attribute images.
pub fn encode_frame(frame: &GaussianFrame) -> Result<AttributeImageSet> {
    let s = square_side(frame.len());
    encode_frame_sized(frame, s, s)
}

/// Packs a frame into `width x height` attribute images.
pub fn encode_frame_sized(frame: &GaussianFrame, width: u32, height: u32) -> Result<AttributeImageSet> {
    let capacity = width as usize * height as usize;
    if frame.len() > capacity {
        return Err(Error::Capacity {
            count: frame.len(),
            capacity,
        });
    }
    let m = frame.param_len();
    let flat = frame.flat_params();
    let planes = exec::map_range(m, |j| {
        let values: Vec<f64> = flat.iter().skip(j).step_by(m).copied().collect();
        AttributePlane::encode(&values, capacity)
    });
    Ok(AttributeImageSet {
        n: frame.len() as u32,
        width,
        height,
        planes,
    })
}

/// Reassembles primitive `i` from pixel `i` of every plane. The result has
/// frame index and group key 0; callers set them.
pub fn decode_frame(set: &AttributeImageSet) -> Result<GaussianFrame> {
    let m = set.planes.len();
    let degree = ShDegree::from_param_len(m)?;
    let n = set.n as usize;
    let mut flat = vec![0.0; n * m];
    for (j, plane) in set.planes.iter().enumerate() {
        if plane.pixels.len() < n {
            return Err(Error::decode("plane shorter than primitive count"));
        }
        for i in 0..n {
            flat[i * m + j] = plane.value(i);
        }
    }
    GaussianFrame::from_flat_params(0, 0, degree, &flat).map_err(|e| Error::decode(format!("decoded frame invalid: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaHeader {
    pub frame_index: u32,
    pub base_key: u32,
    pub entry_count: u32,
    pub base_count: u32,
    pub param_len: u8,
    pub quant_step: f64,
}

/// A serialized sparse delta. Its length is the size the bandwidth budget
/// is charged for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaPayload {
    bytes: Vec<u8>,
}

impl DeltaPayload {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        DeltaPayload { bytes }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn payload_bytes(&self) -> usize {
        self.bytes.len()
    }

    pub fn header(&self) -> Result<DeltaHeader> {
        read_delta_header(&mut Reader::new(&self.bytes))
    }
}

/// Quantizes every component to a multiple of `quant_step`; entries that
/// round to all zeros are not sent.
pub fn encode_delta(delta: &DeltaTensor, quant_step: f64, frame_index: u32, base_key: u32) -> Result<DeltaPayload> {
    if !(quant_step > 0.0) || !quant_step.is_finite() {
        return Err(Error::validation("quantization step must be positive and finite"));
    }
    let plen = delta.param_len();
    let mut kept: Vec<(u32, Vec<i32>)> = Vec::with_capacity(delta.len());
    for (i, block) in delta.entries() {
        let mut q = Vec::with_capacity(plen);
        for v in block {
            let r = (v / quant_step).round();
            if !(r.abs() <= i32::MAX as f64) {
                return Err(Error::validation(format!(
                    "delta component {v} of primitive {i} overflows the fixed-point range at step {quant_step}"
                )));
            }
            q.push(r as i32);
        }
        if q.iter().any(|&x| x != 0) {
            kept.push((i, q));
        }
    }
    let mut out = Vec::with_capacity(DELTA_HEADER_BYTES + kept.len() * (2 + 4 * plen));
    out.extend_from_slice(DELTA_MAGIC);
    out.extend_from_slice(&frame_index.to_le_bytes());
    out.extend_from_slice(&base_key.to_le_bytes());
    out.extend_from_slice(&(kept.len() as u32).to_le_bytes());
    out.extend_from_slice(&(delta.base_count() as u32).to_le_bytes());
    out.push(plen as u8);
    out.extend_from_slice(&quant_step.to_le_bytes());
    let mut prev = 0u32;
    for (k, (i, _)) in kept.iter().enumerate() {
        let gap = if k == 0 { *i } else { i - prev };
        leb128::write::unsigned(&mut out, gap as u64)?;
        prev = *i;
    }
    for (_, q) in &kept {
        for x in q {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(DeltaPayload { bytes: out })
}

fn read_delta_header(r: &mut Reader) -> Result<DeltaHeader> {
    if r.take(4)? != DELTA_MAGIC {
        return Err(Error::decode("not a delta payload"));
    }
    let h = DeltaHeader {
        frame_index: r.u32()?,
        base_key: r.u32()?,
        entry_count: r.u32()?,
        base_count: r.u32()?,
        param_len: r.u8()?,
        quant_step: r.f64()?,
    };
    if !(h.quant_step > 0.0) || !h.quant_step.is_finite() {
        return Err(Error::decode("invalid quantization step"));
    }
    Ok(h)
}

/// Parses a payload, consuming every byte.
pub fn decode_delta(bytes: &[u8]) -> Result<(DeltaHeader, DeltaTensor)> {
    let mut r = Reader::new(bytes);
    let h = read_delta_header(&mut r)?;
    let degree = ShDegree::from_param_len(h.param_len as usize)
        .map_err(|_| Error::decode(format!("parameter length {} unknown", h.param_len)))?;
    let plen = h.param_len as usize;
    let count = h.entry_count as usize;
    if count > h.base_count as usize {
        return Err(Error::decode("more entries than primitives"));
    }
    let mut indices = Vec::with_capacity(count);
    let mut prev = 0u64;
    for k in 0..count {
        let gap = leb128::read::unsigned(&mut r).map_err(|e| Error::decode(format!("index {k}: {e}")))?;
        if k > 0 && gap == 0 {
            return Err(Error::decode("indices not strictly increasing"));
        }
        let i = if k == 0 { gap } else { prev + gap };
        if i >= h.base_count as u64 {
            return Err(Error::decode(format!("index {i} outside {} primitives", h.base_count)));
        }
        indices.push(i as u32);
        prev = i;
    }
    if r.remaining() != count * plen * 4 {
        return Err(Error::decode(format!(
            "entry block is {} bytes, expected {}",
            r.remaining(),
            count * plen * 4
        )));
    }
    let mut delta = DeltaTensor::empty(h.base_count as usize, degree);
    for i in indices {
        let mut block = Vec::with_capacity(plen);
        for _ in 0..plen {
            block.push(snap(r.i32()? as f64 * h.quant_step));
        }
        delta.insert(i, block).map_err(|e| Error::decode(e.to_string()))?;
    }
    Ok((h, delta))
}

/// Size in bytes of `delta` once encoded.
pub fn delta_size(delta: &DeltaTensor, quant_step: f64) -> Result<usize> {
    Ok(encode_delta(delta, quant_step, 0, 0)?.payload_bytes())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::decode(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.arr()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
}

impl std::io::Read for Reader<'_> {
    fn read(&mut self, out: &mut [u8]) -> std::io::Result<usize> {
        let n = out.len().min(self.remaining());
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}
