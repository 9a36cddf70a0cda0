use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera, OpenCV axes (x right, y down, z forward).
///
/// `rotation` and `translation` map world points into camera space; the
/// principal point sits at the image center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    focal: f64,
    width: u32,
    height: u32,
    near: f64,
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-12).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

impl Camera {
    pub fn new(
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        focal: f64,
        width: u32,
        height: u32,
        near: f64,
    ) -> Result<Self> {
        if width < 8 || height < 8 {
            return Err(Error::validation(format!(
                "resolution {width}x{height} below 8x8"
            )));
        }
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(Error::validation("focal length must be positive"));
        }
        if !(near > 0.0) {
            return Err(Error::validation("near clip must be positive"));
        }
        Ok(Camera {
            rotation,
            translation,
            focal,
            width,
            height,
            near,
        })
    }

    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let fwd = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]])
            .ok_or_else(|| Error::validation("eye and target coincide"))?;
        let right = normalize(cross(fwd, up))
            .ok_or_else(|| Error::validation("up vector parallel to view direction"))?;
        let down = cross(fwd, right);
        let rotation = [right, down, fwd];
        let mut translation = [0.0; 3];
        for (t, row) in translation.iter_mut().zip(&rotation) {
            *t = -(row[0] * eye[0] + row[1] * eye[1] + row[2] * eye[2]);
        }
        Camera::new(rotation, translation, focal, width, height, 0.01)
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn principal_point(&self) -> [f64; 2] {
        [self.width as f64 * 0.5, self.height as f64 * 0.5]
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for (o, row) in out.iter_mut().zip(r) {
            *o += row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
        }
        out
    }

    /// Optical center in world coordinates, `-R^T t`.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = self.translation;
        let mut c = [0.0; 3];
        for (j, cj) in c.iter_mut().enumerate() {
            *cj = -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]);
        }
        c
    }
}
