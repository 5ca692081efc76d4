use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numkernel::{CustomOp, Graph, Tensor, Var};

/// Points with camera-space depth at or below this are not projected.
pub const MIN_DEPTH: f64 = 1e-6;

/// Fixed-intrinsics pinhole camera `x = Π(K(X + T))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point `(c_x, c_y)` in pixels.
    pub principal: [f64; 2],
    /// Camera translation `T` in meters.
    pub translation: [f64; 3],
    pub height: usize,
    pub width: usize,
}

impl CameraSpec {
    /// Default intrinsics for an image: `f = 2 max(H, W)`, principal point at
    /// the image center.
    pub fn for_image(height: usize, width: usize, translation: [f64; 3]) -> Self {
        Self {
            focal: 2.0 * height.max(width) as f64,
            principal: [width as f64 / 2.0, height as f64 / 2.0],
            translation,
            height,
            width,
        }
    }

    pub fn with_translation(&self, translation: [f64; 3]) -> Self {
        Self { translation, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(invalid!("camera focal length must be positive, got {}", self.focal));
        }
        if self.height == 0 || self.width == 0 {
            return Err(invalid!("camera resolution must be nonzero"));
        }
        if !self.principal.iter().chain(&self.translation).all(|v| v.is_finite()) {
            return Err(invalid!("camera principal point and translation must be finite"));
        }
        Ok(())
    }

    /// Camera-space coordinates `X + T` of one point.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        [p[0] + self.translation[0], p[1] + self.translation[1], p[2] + self.translation[2]]
    }

    /// Pixel coordinates of a camera-space point, `None` behind the camera.
    pub fn pixel_of_camera_point(&self, c: [f64; 3]) -> Option<[f64; 2]> {
        (c[2] > MIN_DEPTH).then(|| [self.focal * c[0] / c[2] + self.principal[0], self.focal * c[1] / c[2] + self.principal[1]])
    }
}

/// Result of [`project`]: `n x 2` pixels; invalid rows hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub pixels: Tensor,
    pub valid: Vec<bool>,
}

/// Projects `n x 3` points to pixel coordinates.
pub fn project(points: &Tensor, camera: &CameraSpec) -> Result<Projection> {
    camera.validate()?;
    if points.ndim() != 2 || points.cols() != 3 {
        return Err(invalid!("project expects n x 3 points, got {:?}", points.shape()));
    }
    let mut pixels = Vec::with_capacity(points.rows() * 2);
    let mut valid = Vec::with_capacity(points.rows());
    for p in points.data().chunks_exact(3) {
        match camera.pixel_of_camera_point(camera.to_camera([p[0], p[1], p[2]])) {
            Some(px) => {
                pixels.extend_from_slice(&px);
                valid.push(true);
            }
            None => {
                pixels.extend_from_slice(&[0.0, 0.0]);
                valid.push(false);
            }
        }
    }
    Ok(Projection { pixels: Tensor::matrix(points.rows(), 2, pixels), valid })
}

/// `(points n x 3, T 1 x 3) -> pixels n x 2`; points at nonpositive depth
/// map to zero with zero gradient.
#[derive(Debug)]
struct ProjectOp {
    focal: f64,
    principal: [f64; 2],
}

impl CustomOp for ProjectOp {
    fn name(&self) -> &'static str {
        "project"
    }

    fn forward(&self, inputs: &[&Tensor]) -> std::result::Result<Tensor, String> {
        let (x, t) = (inputs[0], inputs[1]);
        if x.ndim() != 2 || x.cols() != 3 || t.len() != 3 {
            return Err(format!("project of {:?} with translation {:?}", x.shape(), t.shape()));
        }
        let t = t.data();
        let mut out = Vec::with_capacity(x.rows() * 2);
        for p in x.data().chunks_exact(3) {
            let z = p[2] + t[2];
            if z > MIN_DEPTH {
                out.push(self.focal * (p[0] + t[0]) / z + self.principal[0]);
                out.push(self.focal * (p[1] + t[1]) / z + self.principal[1]);
            } else {
                out.extend_from_slice(&[0.0, 0.0]);
            }
        }
        Ok(Tensor::matrix(x.rows(), 2, out))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (x, t) = (inputs[0], inputs[1]);
        let t = t.data();
        let mut gx = vec![0.0; x.len()];
        let mut gt = [0.0; 3];
        for (i, p) in x.data().chunks_exact(3).enumerate() {
            let c = [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
            if c[2] <= MIN_DEPTH {
                continue;
            }
            let (gu, gv) = (grad.data()[2 * i], grad.data()[2 * i + 1]);
            let fz = self.focal / c[2];
            let d = [gu * fz, gv * fz, -(gu * c[0] + gv * c[1]) * fz / c[2]];
            for a in 0..3 {
                gx[3 * i + a] = d[a];
                gt[a] += d[a];
            }
        }
        vec![Tensor::matrix(x.rows(), 3, gx), Tensor::new(inputs[1].shape().to_vec(), gt.to_vec()).expect("translation shape")]
    }
}

/// Records the projection of `points` (n x 3) under translation `t` (1 x 3).
pub fn project_graph(g: &mut Graph, points: Var, translation: Var, camera: &CameraSpec) -> Var {
    g.custom(Arc::new(ProjectOp { focal: camera.focal, principal: camera.principal }), &[points, translation])
}
