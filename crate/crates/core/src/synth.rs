//! Synthetic dynamic scenes and camera rigs.
//!
//! Every frame moves an exact fraction of the current primitives by a fixed
//! step in a random direction; appearance events append new primitives at a
//! given frame. Ground truth for training is rendered from these frames by
//! the renderer itself.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaussianFrame, GaussianPrimitive, ShDegree};
use crate::render::Camera;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub cameras: usize,
    /// Distance of every camera from the origin.
    pub radius: f64,
    /// Total azimuth arc covered by the rig, degrees.
    pub arc_deg: f64,
    pub elevation_deg: f64,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec {
            cameras: 3,
            radius: 4.0,
            arc_deg: 90.0,
            elevation_deg: 15.0,
            focal: 70.0,
            width: 64,
            height: 64,
        }
    }
}

/// Cameras on an arc around the origin, all looking at it, `+z` up.
pub fn camera_rig(spec: &RigSpec) -> Result<Vec<Camera>> {
    if spec.cameras == 0 {
        return Err(Error::validation("rig needs at least one camera"));
    }
    let elev = spec.elevation_deg.to_radians();
    (0..spec.cameras)
        .map(|k| {
            let t = if spec.cameras == 1 {
                0.0
            } else {
                k as f64 / (spec.cameras - 1) as f64 - 0.5
            };
            let az = (t * spec.arc_deg).to_radians();
            let eye = [
                spec.radius * elev.cos() * az.sin(),
                -spec.radius * elev.cos() * az.cos(),
                spec.radius * elev.sin(),
            ];
            Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], spec.focal, spec.width, spec.height)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceEvent {
    pub frame: u32,
    pub count: usize,
    pub center: [f64; 3],
    /// Isotropic scale of each new primitive.
    pub scale: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub primitives: usize,
    pub frames: usize,
    pub mover_fraction: f64,
    /// Displacement of a mover per frame, scene units.
    pub motion_step: f64,
    /// Primitives are placed in `[-extent, extent]^3`.
    pub extent: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub opacity_min: f64,
    pub opacity_max: f64,
    pub sh_degree: u8,
    pub appearances: Vec<AppearanceEvent>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            primitives: 60,
            frames: 40,
            mover_fraction: 0.2,
            motion_step: 0.01,
            extent: 0.8,
            scale_min: 0.08,
            scale_max: 0.2,
            opacity_min: 0.6,
            opacity_max: 0.9,
            sh_degree: 0,
            appearances: Vec::new(),
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n: f64 = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.2 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// One random primitive drawn from the scene's parameter ranges.
pub fn random_primitive(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Result<GaussianPrimitive> {
    let e = spec.extent;
    let position = [rng.gen_range(-e..e), rng.gen_range(-e..e), rng.gen_range(-e..e)];
    let (lo, hi) = (spec.scale_min.ln(), spec.scale_max.ln());
    let scale = [
        rng.gen_range(lo..=hi).exp(),
        rng.gen_range(lo..=hi).exp(),
        rng.gen_range(lo..=hi).exp(),
    ];
    let opacity = rng.gen_range(spec.opacity_min..=spec.opacity_max);
    let color = [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ];
    let mut p = GaussianPrimitive::from_activated(position, random_quat(rng), scale, opacity, color)?;
    if spec.sh_degree == 1 {
        for v in p.sh.iter_mut().skip(3) {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    Ok(p)
}

/// Generates every frame of the scene. Frame `t` has `frame_index = t` and
/// `group_key = t`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Vec<GaussianFrame>> {
    if spec.frames == 0 || spec.primitives == 0 {
        return Err(Error::validation("scene needs at least one frame and primitive"));
    }
    if !(0.0..=1.0).contains(&spec.mover_fraction) {
        return Err(Error::validation("mover fraction must lie in [0, 1]"));
    }
    let degree = ShDegree::new(spec.sh_degree)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = (0..spec.primitives)
        .map(|_| random_primitive(&mut rng, spec))
        .collect::<Result<Vec<_>>>()?;
    let first = GaussianFrame::new(0, 0, degree, prims)?.snapped();
    let mut frames = vec![first];
    for t in 1..spec.frames as u32 {
        let mut next = frames.last().unwrap().clone().with_index(t, t);
        let n = next.len();
        let movers = (spec.mover_fraction * n as f64).round() as usize;
        for i in sample(&mut rng, n, movers) {
            let dir = random_unit(&mut rng);
            let p = &mut next.primitives_mut()[i];
            for k in 0..3 {
                p.position[k] += spec.motion_step * dir[k];
            }
        }
        for ev in spec.appearances.iter().filter(|e| e.frame == t) {
            for _ in 0..ev.count {
                let off = random_unit(&mut rng);
                let r = rng.gen_range(0.0..1.5 * ev.scale);
                let pos = [
                    ev.center[0] + r * off[0],
                    ev.center[1] + r * off[1],
                    ev.center[2] + r * off[2],
                ];
                let p = GaussianPrimitive::from_activated(
                    pos,
                    random_quat(&mut rng),
                    [ev.scale; 3],
                    0.9,
                    ev.color,
                )?;
                next.push(p)?;
            }
        }
        frames.push(next.snapped());
    }
    Ok(frames)
}
