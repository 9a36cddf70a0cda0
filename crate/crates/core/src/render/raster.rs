use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::{Camera, RenderedImage, EPS_CONTRIB};
use crate::error::{Error, Result};
use crate::model::{layout, sigmoid, GaussianFrame, ShDegree, SH_C0, SH_C1};

type M3 = [[f64; 3]; 3];

/// Squared Mahalanobis radius of the 3-sigma cutoff.
const CUTOFF_Q: f64 = 9.0;

#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub index: usize,
    pub depth: f64,
    pub mean: [f64; 2],
    /// Inverse 2D covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub rgb: [f64; 3],
    /// `x0, x1, y0, y1`, half-open.
    pub bbox: [u32; 4],
    cam_pos: [f64; 3],
    rot: M3,
    scale: [f64; 3],
    view_cov: M3,
    jac: [[f64; 3]; 2],
    dir: [f64; 3],
    dist: f64,
    basis: [f64; 4],
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Frag {
    pixel: u32,
    q: f64,
    t: f64,
}

pub(crate) struct Composite {
    pub image: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub frags: Option<Vec<Vec<Frag>>>,
    /// Contributing-fragment count per splat.
    pub usage: Option<Vec<u64>>,
}

fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    o
}

fn transpose(a: &M3) -> M3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = a[j][i];
        }
    }
    o
}

pub(crate) fn quat_to_mat(q: [f64; 4]) -> M3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn sh_basis(degree: ShDegree, dir: [f64; 3]) -> [f64; 4] {
    if degree.get() == 0 {
        [SH_C0, 0.0, 0.0, 0.0]
    } else {
        [SH_C0, -SH_C1 * dir[1], SH_C1 * dir[2], -SH_C1 * dir[0]]
    }
}

pub(crate) fn project(frame: &GaussianFrame, cam: &Camera) -> Result<Vec<Splat>> {
    let degree = frame.sh_degree();
    let nb = degree.basis_len();
    let w_rot = cam.rotation();
    let f = cam.focal();
    let [cx, cy] = cam.principal_point();
    let center = cam.center();
    let (width, height) = (cam.width() as f64, cam.height() as f64);
    let mut splats = Vec::with_capacity(frame.len());
    for (index, p) in frame.primitives().iter().enumerate() {
        if p.is_tombstone() {
            continue;
        }
        let finite = p.position.iter().chain(&p.rotation).chain(&p.log_scale).all(|v| v.is_finite())
            && p.opacity_logit.is_finite()
            && p.color.iter().chain(&p.sh).all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation(format!("primitive {index} has non-finite attributes")));
        }
        let opacity = p.opacity();
        if opacity <= 0.0 {
            continue;
        }
        let cam_pos = cam.to_camera(p.position);
        let [x, y, z] = cam_pos;
        if z <= cam.near() {
            continue;
        }
        let rot = quat_to_mat(p.unit_rotation());
        let scale = p.scale();
        let mut m = rot;
        for row in m.iter_mut() {
            for k in 0..3 {
                row[k] *= scale[k];
            }
        }
        let cov3 = mat_mul(&m, &transpose(&m));
        let view_cov = mat_mul(&mat_mul(w_rot, &cov3), &transpose(w_rot));
        let jac = [[f / z, 0.0, -f * x / (z * z)], [0.0, f / z, -f * y / (z * z)]];
        // cov2 = J V J^T
        let mut jv = [[0.0; 3]; 2];
        for i in 0..2 {
            for k in 0..3 {
                jv[i][k] = (0..3).map(|l| jac[i][l] * view_cov[l][k]).sum();
            }
        }
        let s00: f64 = (0..3).map(|k| jv[0][k] * jac[0][k]).sum();
        let s01: f64 = (0..3).map(|k| jv[0][k] * jac[1][k]).sum();
        let s11: f64 = (0..3).map(|k| jv[1][k] * jac[1][k]).sum();
        let det = s00 * s11 - s01 * s01;
        if !(det > 1e-24) {
            continue;
        }
        let conic = [s11 / det, -s01 / det, s00 / det];
        let mean = [f * x / z + cx, f * y / z + cy];
        let mid = 0.5 * (s00 + s11);
        let lambda = mid + (mid * mid - det).max(0.0).sqrt();
        let radius = 3.0 * lambda.sqrt();
        let lo_x = (mean[0] - radius - 0.5).ceil().max(0.0);
        let hi_x = ((mean[0] + radius - 0.5).floor() + 1.0).min(width);
        let lo_y = (mean[1] - radius - 0.5).ceil().max(0.0);
        let hi_y = ((mean[1] + radius - 0.5).floor() + 1.0).min(height);
        if !(lo_x < hi_x && lo_y < hi_y) {
            continue;
        }
        let v = [
            p.position[0] - center[0],
            p.position[1] - center[1],
            p.position[2] - center[2],
        ];
        let dist = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let dir = [v[0] / dist, v[1] / dist, v[2] / dist];
        let basis = sh_basis(degree, dir);
        let mut rgb = [0.0; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let mut pre = p.color[c];
            for (k, b) in basis.iter().enumerate().take(nb) {
                pre += b * p.sh[3 * k + c];
            }
            *out = sigmoid(pre);
        }
        splats.push(Splat {
            index,
            depth: z,
            mean,
            conic,
            opacity,
            rgb,
            bbox: [lo_x as u32, hi_x as u32, lo_y as u32, hi_y as u32],
            cam_pos,
            rot,
            scale,
            view_cov,
            jac,
            dir,
            dist,
            basis,
        });
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(splats)
}

pub(crate) fn composite(splats: &[Splat], cam: &Camera, keep_frags: bool, usage: bool) -> Composite {
    let w = cam.width() as usize;
    let h = cam.height() as usize;
    let mut image = vec![0.0; 3 * w * h];
    let mut trans = vec![1.0; w * h];
    let mut frags: Option<Vec<Vec<Frag>>> = keep_frags.then(|| Vec::with_capacity(splats.len()));
    let mut counts = usage.then(|| vec![0u64; splats.len()]);
    for (si, s) in splats.iter().enumerate() {
        let [a, b, c] = s.conic;
        let mut mine = Vec::new();
        let mut used = 0u64;
        for py in s.bbox[2]..s.bbox[3] {
            let dy = py as f64 + 0.5 - s.mean[1];
            for px in s.bbox[0]..s.bbox[1] {
                let dx = px as f64 + 0.5 - s.mean[0];
                let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
                if !(q < CUTOFF_Q) {
                    continue;
                }
                let alpha = s.opacity * (-0.5 * q).exp();
                let pix = py as usize * w + px as usize;
                let t = trans[pix];
                let weight = alpha * t;
                if !(weight > EPS_CONTRIB) {
                    continue;
                }
                for ch in 0..3 {
                    image[3 * pix + ch] += weight * s.rgb[ch];
                }
                trans[pix] = t * (1.0 - alpha);
                used += 1;
                if keep_frags {
                    mine.push(Frag {
                        pixel: pix as u32,
                        q,
                        t,
                    });
                }
            }
        }
        if let Some(f) = frags.as_mut() {
            f.push(mine);
        }
        if let Some(cn) = counts.as_mut() {
            cn[si] = used;
        }
    }
    Composite {
        image,
        transmittance: trans,
        frags,
        usage: counts,
    }
}

pub(crate) fn signature(splats: &[Splat], cam: &Camera) -> u64 {
    let out = composite(splats, cam, true, false);
    let mut h = DefaultHasher::new();
    for (s, frags) in splats.iter().zip(out.frags.unwrap_or_default()) {
        s.index.hash(&mut h);
        frags.len().hash(&mut h);
        for f in frags {
            f.pixel.hash(&mut h);
        }
    }
    h.finish()
}

/// Forward state retained for the backward pass of one camera.
pub(crate) struct Tape {
    splats: Vec<Splat>,
    frags: Vec<Vec<Frag>>,
    width: usize,
    focal: f64,
    cam_rot: M3,
}

impl Tape {
    pub fn record(frame: &GaussianFrame, cam: &Camera) -> Result<(RenderedImage, Tape)> {
        let splats = project(frame, cam)?;
        let out = composite(&splats, cam, true, false);
        let img = RenderedImage::new(cam.width(), cam.height(), out.image)?;
        Ok((
            img,
            Tape {
                splats,
                frags: out.frags.unwrap_or_default(),
                width: cam.width() as usize,
                focal: cam.focal(),
                cam_rot: *cam.rotation(),
            },
        ))
    }

    /// Accumulates `dL/dparams` into `grad` (`n * param_len`) given
    /// `dL/dimage` (interleaved RGB).
    pub fn backward(&self, frame: &GaussianFrame, dl_dimg: &[f64], grad: &mut [f64]) {
        let degree = frame.sh_degree();
        let plen = degree.param_len();
        let nb = degree.basis_len();
        let w = self.width;
        let mut behind = vec![0.0; dl_dimg.len()];
        let f = self.focal;
        for (s, frags) in self.splats.iter().zip(&self.frags).rev() {
            let [a, b, c] = s.conic;
            let o = s.opacity;
            let mut d_mean = [0.0; 2];
            let mut d_conic = [0.0; 3];
            let mut d_op = 0.0;
            let mut d_rgb = [0.0; 3];
            for fr in frags {
                let pix = fr.pixel as usize;
                let dx = (pix % w) as f64 + 0.5 - s.mean[0];
                let dy = (pix / w) as f64 + 0.5 - s.mean[1];
                let g = (-0.5 * fr.q).exp();
                let alpha = o * g;
                let dl = &dl_dimg[3 * pix..3 * pix + 3];
                let r = &mut behind[3 * pix..3 * pix + 3];
                let wgt = fr.t * alpha;
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    d_rgb[ch] += wgt * dl[ch];
                    d_alpha += (s.rgb[ch] - r[ch]) * dl[ch];
                    r[ch] = alpha * s.rgb[ch] + (1.0 - alpha) * r[ch];
                }
                d_alpha *= fr.t;
                d_op += g * d_alpha;
                let dq = -0.5 * g * o * d_alpha;
                d_mean[0] += dq * (-2.0 * (a * dx + b * dy));
                d_mean[1] += dq * (-2.0 * (b * dx + c * dy));
                d_conic[0] += dq * dx * dx;
                d_conic[1] += dq * 2.0 * dx * dy;
                d_conic[2] += dq * dy * dy;
            }
            if frags.is_empty() {
                continue;
            }
            let prim = &frame.primitives()[s.index];
            let g = &mut grad[s.index * plen..(s.index + 1) * plen];
            let mut d_pos = [0.0; 3];

            // Color and SH.
            let mut d_dir = [0.0; 3];
            for ch in 0..3 {
                let dz = d_rgb[ch] * s.rgb[ch] * (1.0 - s.rgb[ch]);
                g[layout::COLOR + ch] += dz;
                for k in 0..nb {
                    g[layout::SH + 3 * k + ch] += s.basis[k] * dz;
                }
                if nb > 1 {
                    d_dir[0] += dz * -SH_C1 * prim.sh[9 + ch];
                    d_dir[1] += dz * -SH_C1 * prim.sh[3 + ch];
                    d_dir[2] += dz * SH_C1 * prim.sh[6 + ch];
                }
            }
            if nb > 1 {
                let dd = s.dir[0] * d_dir[0] + s.dir[1] * d_dir[1] + s.dir[2] * d_dir[2];
                for k in 0..3 {
                    d_pos[k] += (d_dir[k] - s.dir[k] * dd) / s.dist;
                }
            }

            // Opacity logit.
            g[layout::OPACITY] += d_op * o * (1.0 - o);

            // Conic -> 2D covariance: H = -M G M with G carrying half the
            // off-diagonal gradient.
            let mc = [[a, b], [b, c]];
            let gm = [[d_conic[0], 0.5 * d_conic[1]], [0.5 * d_conic[1], d_conic[2]]];
            let mut mg = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    mg[i][j] = mc[i][0] * gm[0][j] + mc[i][1] * gm[1][j];
                }
            }
            let mut hcov = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    hcov[i][j] = -(mg[i][0] * mc[0][j] + mg[i][1] * mc[1][j]);
                }
            }

            // cov2 = J V J^T: dJ = 2 H J V, dV = J^T H J.
            let jac = &s.jac;
            let v = &s.view_cov;
            let mut hj = [[0.0; 3]; 2];
            for i in 0..2 {
                for k in 0..3 {
                    hj[i][k] = hcov[i][0] * jac[0][k] + hcov[i][1] * jac[1][k];
                }
            }
            let mut d_jac = [[0.0; 3]; 2];
            for i in 0..2 {
                for k in 0..3 {
                    d_jac[i][k] = 2.0 * (0..3).map(|l| hj[i][l] * v[l][k]).sum::<f64>();
                }
            }
            let mut d_v = [[0.0; 3]; 3];
            for k in 0..3 {
                for l in 0..3 {
                    d_v[k][l] = jac[0][k] * hj[0][l] + jac[1][k] * hj[1][l];
                }
            }
            // V = W cov3 W^T.
            let d_cov3 = mat_mul(&mat_mul(&transpose(&self.cam_rot), &d_v), &self.cam_rot);
            // cov3 = M M^T with M = R diag(s): dM = 2 dcov3 M.
            let mut mm = s.rot;
            for row in mm.iter_mut() {
                for k in 0..3 {
                    row[k] *= s.scale[k];
                }
            }
            let d_m = mat_mul(&d_cov3, &mm);
            let mut d_rot = [[0.0; 3]; 3];
            for r in 0..3 {
                for k in 0..3 {
                    let dmk = 2.0 * d_m[r][k];
                    d_rot[r][k] = dmk * s.scale[k];
                    g[layout::LOG_SCALE + k] += dmk * s.rot[r][k] * s.scale[k];
                }
            }
            let q = prim.unit_rotation();
            let dq_hat = quat_grad(q, &d_rot);
            let raw = prim.rotation;
            let norm = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2] + raw[3] * raw[3]).sqrt();
            let proj: f64 = (0..4).map(|k| q[k] * dq_hat[k]).sum();
            for k in 0..4 {
                g[layout::ROTATION + k] += (dq_hat[k] - q[k] * proj) / norm;
            }

            // Mean and Jacobian -> camera-space center.
            let [x, y, z] = s.cam_pos;
            let z2 = z * z;
            let z3 = z2 * z;
            let d_cam = [
                d_mean[0] * f / z + d_jac[0][2] * (-f / z2),
                d_mean[1] * f / z + d_jac[1][2] * (-f / z2),
                d_mean[0] * (-f * x / z2) + d_mean[1] * (-f * y / z2)
                    + (d_jac[0][0] + d_jac[1][1]) * (-f / z2)
                    + d_jac[0][2] * (2.0 * f * x / z3)
                    + d_jac[1][2] * (2.0 * f * y / z3),
            ];
            for k in 0..3 {
                d_pos[k] += (0..3).map(|r| self.cam_rot[r][k] * d_cam[r]).sum::<f64>();
                g[layout::POSITION + k] += d_pos[k];
            }
        }
    }
}

/// Gradient w.r.t. the unit quaternion given `dL/dR`.
fn quat_grad(q: [f64; 4], d_rot: &M3) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dw = [[0.0, -2.0 * z, 2.0 * y], [2.0 * z, 0.0, -2.0 * x], [-2.0 * y, 2.0 * x, 0.0]];
    let dx = [[0.0, 2.0 * y, 2.0 * z], [2.0 * y, -4.0 * x, -2.0 * w], [2.0 * z, 2.0 * w, -4.0 * x]];
    let dy = [[-4.0 * y, 2.0 * x, 2.0 * w], [2.0 * x, 0.0, 2.0 * z], [-2.0 * w, 2.0 * z, -4.0 * y]];
    let dz = [[-4.0 * z, -2.0 * w, 2.0 * x], [2.0 * w, -4.0 * z, 2.0 * y], [2.0 * x, 2.0 * y, 0.0]];
    let dot = |m: &M3| -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += m[i][j] * d_rot[i][j];
            }
        }
        s
    };
    [dot(&dw), dot(&dx), dot(&dy), dot(&dz)]
}
