//! Gaussian primitives, frames and canonical spaces.
//!
//! Primitives are stored in pre-activation parameter space: raw quaternion,
//! log-scale, opacity logit and color logit. Activated values are computed on
//! read. All parameter arithmetic performed by the delta algebra is snapped to
//! a dyadic lattice of pitch 2^-32, which makes addition of parameter values
//! exact (and therefore associative and commutative) over the range any scene
//! uses.

mod delta;
pub mod scene_file;

pub use delta::{apply_delta, apply_to_frame, compose_deltas, diff_frames, DeltaTensor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entries of a delta whose every component is at most this are omitted.
pub const EPS_SPARSE: f64 = 1e-9;

/// Opacity logit written when a primitive is culled. Anything at or below
/// [`TOMBSTONE_THRESHOLD`] reads as opacity 0 and is skipped by the renderer.
pub const TOMBSTONE_LOGIT: f64 = -32.0;
pub const TOMBSTONE_THRESHOLD: f64 = -30.0;

const LATTICE_SCALE: f64 = 4_294_967_296.0; // 2^32

/// Rounds to the nearest multiple of 2^-32.
#[inline]
pub fn snap(x: f64) -> f64 {
    (x * LATTICE_SCALE).round() / LATTICE_SCALE
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Offsets of each attribute inside a primitive's parameter vector.
pub mod layout {
    pub const POSITION: usize = 0;
    pub const ROTATION: usize = 3;
    pub const LOG_SCALE: usize = 7;
    pub const OPACITY: usize = 10;
    pub const COLOR: usize = 11;
    pub const SH: usize = 14;
}

/// Spherical-harmonic degree, 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ShDegree(u8);

impl ShDegree {
    pub const ZERO: ShDegree = ShDegree(0);
    pub const ONE: ShDegree = ShDegree(1);

    pub fn new(degree: u8) -> Result<Self> {
        if degree > 1 {
            return Err(Error::validation(format!(
                "spherical-harmonic degree {degree} unsupported (max 1)"
            )));
        }
        Ok(ShDegree(degree))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Number of basis functions, (degree + 1)^2.
    pub fn basis_len(self) -> usize {
        let d = self.0 as usize + 1;
        d * d
    }

    /// Scalars in the SH block: three per basis function.
    pub fn sh_len(self) -> usize {
        3 * self.basis_len()
    }

    /// Scalars in a full primitive parameter vector.
    pub fn param_len(self) -> usize {
        layout::SH + self.sh_len()
    }

    pub fn from_param_len(len: usize) -> Result<Self> {
        match len {
            l if l == ShDegree::ZERO.param_len() => Ok(ShDegree::ZERO),
            l if l == ShDegree::ONE.param_len() => Ok(ShDegree::ONE),
            _ => Err(Error::structural(format!(
                "parameter length {len} matches no SH degree"
            ))),
        }
    }
}

impl TryFrom<u8> for ShDegree {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        ShDegree::new(v)
    }
}

impl From<ShDegree> for u8 {
    fn from(d: ShDegree) -> u8 {
        d.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic Gaussian in pre-activation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub position: [f64; 3],
    /// Raw quaternion `(w, x, y, z)`; normalized on read.
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    /// Base color logits; `sigmoid` maps them into `[0, 1]`.
    pub color: [f64; 3],
    /// SH coefficients, basis-major: `sh[3 * k + channel]`. Only the first
    /// `ShDegree::sh_len` entries are meaningful.
    pub sh: [f64; 12],
}

impl Default for GaussianPrimitive {
    fn default() -> Self {
        GaussianPrimitive {
            position: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [0.0; 3],
            opacity_logit: 0.0,
            color: [0.0; 3],
            sh: [0.0; 12],
        }
    }
}

impl GaussianPrimitive {
    /// Builds a primitive from activated values.
    pub fn from_activated(
        position: [f64; 3],
        rotation: [f64; 4],
        scale: [f64; 3],
        opacity: f64,
        color: [f64; 3],
    ) -> Result<Self> {
        if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::validation("scale components must be positive"));
        }
        if !(0.0..1.0).contains(&opacity) || opacity <= 0.0 {
            return Err(Error::validation("opacity must lie in (0, 1)"));
        }
        if color.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
            return Err(Error::validation("color components must lie in (0, 1)"));
        }
        let p = GaussianPrimitive {
            position,
            rotation,
            log_scale: scale.map(f64::ln),
            opacity_logit: logit(opacity),
            color: color.map(logit),
            sh: [0.0; 12],
        };
        p.validate(ShDegree::ZERO)?;
        Ok(p)
    }

    pub fn unit_rotation(&self) -> [f64; 4] {
        let q = self.rotation;
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn is_tombstone(&self) -> bool {
        self.opacity_logit <= TOMBSTONE_THRESHOLD
    }

    pub fn opacity(&self) -> f64 {
        if self.is_tombstone() {
            0.0
        } else {
            sigmoid(self.opacity_logit)
        }
    }

    /// View-independent base color in `[0, 1]^3`.
    pub fn base_color(&self) -> [f64; 3] {
        self.color.map(sigmoid)
    }

    pub fn tombstone(&mut self) {
        self.opacity_logit = TOMBSTONE_LOGIT;
    }

    pub fn validate(&self, degree: ShDegree) -> Result<()> {
        let mut buf = [0.0; 26];
        self.write_params(degree, &mut buf[..degree.param_len()]);
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite primitive parameter"));
        }
        let q = self.rotation;
        let n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
        if n2 < 1e-24 {
            return Err(Error::validation("quaternion has zero norm"));
        }
        Ok(())
    }

    /// Writes the parameter vector in file/field order: position, quaternion,
    /// log-scale, opacity logit, color, SH.
    pub fn write_params(&self, degree: ShDegree, out: &mut [f64]) {
        debug_assert_eq!(out.len(), degree.param_len());
        out[0..3].copy_from_slice(&self.position);
        out[3..7].copy_from_slice(&self.rotation);
        out[7..10].copy_from_slice(&self.log_scale);
        out[10] = self.opacity_logit;
        out[11..14].copy_from_slice(&self.color);
        let sh = degree.sh_len();
        out[14..14 + sh].copy_from_slice(&self.sh[..sh]);
    }

    pub fn params(&self, degree: ShDegree) -> Vec<f64> {
        let mut v = vec![0.0; degree.param_len()];
        self.write_params(degree, &mut v);
        v
    }

    pub fn from_params(degree: ShDegree, p: &[f64]) -> Self {
        debug_assert_eq!(p.len(), degree.param_len());
        let mut sh = [0.0; 12];
        let n = degree.sh_len();
        sh[..n].copy_from_slice(&p[14..14 + n]);
        GaussianPrimitive {
            position: [p[0], p[1], p[2]],
            rotation: [p[3], p[4], p[5], p[6]],
            log_scale: [p[7], p[8], p[9]],
            opacity_logit: p[10],
            color: [p[11], p[12], p[13]],
            sh,
        }
    }
}

/// Ordered primitive set for one time step.
///
/// Primitive order is creation order; it doubles as pixel order in every
/// attribute image derived from the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFrame {
    pub frame_index: u32,
    /// Frame index of the keyframe owning this frame.
    pub group_key: u32,
    sh_degree: ShDegree,
    primitives: Vec<GaussianPrimitive>,
}

impl GaussianFrame {
    pub fn new(
        frame_index: u32,
        group_key: u32,
        sh_degree: ShDegree,
        primitives: Vec<GaussianPrimitive>,
    ) -> Result<Self> {
        for (i, p) in primitives.iter().enumerate() {
            p.validate(sh_degree)
                .map_err(|e| Error::validation(format!("primitive {i}: {e}")))?;
        }
        Ok(GaussianFrame {
            frame_index,
            group_key,
            sh_degree,
            primitives,
        })
    }

    /// Rebuilds a frame from a flat `n * param_len` parameter buffer.
    pub fn from_flat_params(
        frame_index: u32,
        group_key: u32,
        sh_degree: ShDegree,
        params: &[f64],
    ) -> Result<Self> {
        let len = sh_degree.param_len();
        if !params.len().is_multiple_of(len) {
            return Err(Error::structural(format!(
                "flat buffer of {} is not a multiple of {len}",
                params.len()
            )));
        }
        let prims = params
            .chunks_exact(len)
            .map(|c| GaussianPrimitive::from_params(sh_degree, c))
            .collect();
        GaussianFrame::new(frame_index, group_key, sh_degree, prims)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let len = self.sh_degree.param_len();
        let mut out = vec![0.0; len * self.primitives.len()];
        for (p, chunk) in self.primitives.iter().zip(out.chunks_exact_mut(len)) {
            p.write_params(self.sh_degree, chunk);
        }
        out
    }

    pub fn sh_degree(&self) -> ShDegree {
        self.sh_degree
    }

    pub fn param_len(&self) -> usize {
        self.sh_degree.param_len()
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    /// Number of primitives that are not tombstoned.
    pub fn live_count(&self) -> usize {
        self.primitives.iter().filter(|p| !p.is_tombstone()).count()
    }

    pub fn with_index(mut self, frame_index: u32, group_key: u32) -> Self {
        self.frame_index = frame_index;
        self.group_key = group_key;
        self
    }

    /// Drops tombstoned primitives, renumbering the rest in order.
    pub fn compacted(&self) -> GaussianFrame {
        GaussianFrame {
            primitives: self
                .primitives
                .iter()
                .filter(|p| !p.is_tombstone())
                .copied()
                .collect(),
            ..self.clone()
        }
    }

    /// Appends a primitive. Creation order is the only order a frame has.
    pub fn push(&mut self, p: GaussianPrimitive) -> Result<()> {
        p.validate(self.sh_degree)?;
        self.primitives.push(p);
        Ok(())
    }

    /// Mutable access for crate-internal optimizers.
    pub(crate) fn primitives_mut(&mut self) -> &mut Vec<GaussianPrimitive> {
        &mut self.primitives
    }

    /// Returns a copy whose parameters lie on the 2^-32 lattice.
    pub fn snapped(&self) -> GaussianFrame {
        let mut flat = self.flat_params();
        flat.iter_mut().for_each(|v| *v = snap(*v));
        let len = self.param_len();
        GaussianFrame {
            primitives: flat
                .chunks_exact(len)
                .map(|c| GaussianPrimitive::from_params(self.sh_degree, c))
                .collect(),
            ..self.clone()
        }
    }
}

/// The keyframe's Gaussian set, anchoring every frame of its group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSpace {
    frame: GaussianFrame,
    capacity_u: usize,
}

impl CanonicalSpace {
    pub fn new(frame: GaussianFrame, capacity_u: usize) -> Result<Self> {
        if frame.frame_index != frame.group_key {
            return Err(Error::structural(format!(
                "keyframe {} claims group {}",
                frame.frame_index, frame.group_key
            )));
        }
        if capacity_u < frame.len() {
            return Err(Error::Capacity {
                count: frame.len(),
                capacity: capacity_u,
            });
        }
        Ok(CanonicalSpace { frame, capacity_u })
    }

    pub fn frame(&self) -> &GaussianFrame {
        &self.frame
    }

    pub fn key(&self) -> u32 {
        self.frame.frame_index
    }

    pub fn capacity_u(&self) -> usize {
        self.capacity_u
    }

    pub fn len(&self) -> usize {
        self.frame.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame.is_empty()
    }

    /// Zero-entry delta shaped for this space.
    pub fn empty_delta(&self) -> DeltaTensor {
        DeltaTensor::empty(self.frame.len(), self.frame.sh_degree())
    }
}
