use serde::{Deserialize, Serialize};

use super::projection::{CameraSpec, MIN_DEPTH};
use crate::error::{invalid, Result};
use crate::numkernel::Tensor;

/// Default tolerance (meters) of the `d_k <= d_p` visibility comparison.
pub const VISIBILITY_TOLERANCE: f64 = 1e-4;

/// Binary `H x W` image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self { height, width, data: (0..height * width).map(|i| f(i / width, i % width)).collect() }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// The mask as an `H x W` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.height, self.width, self.data.iter().map(|&b| f64::from(u8::from(b))).collect())
    }
}

/// Rasterizer output: coverage and nearest camera-space depth (`+inf` on
/// background).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderBuffers {
    pub mask: Mask,
    pub depth: Vec<f64>,
}

impl RenderBuffers {
    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn depth_at(&self, row: usize, col: usize) -> f64 {
        self.depth[row * self.mask.width + col]
    }
}

fn edge(a: [f64; 2], b: [f64; 2], q: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
}

/// Top-left rule for a triangle whose interior has positive edge values:
/// pixels exactly on a top or left edge belong to the triangle.
fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let e = [b[0] - a[0], b[1] - a[1]];
    (e[1] == 0.0 && e[0] > 0.0) || e[1] < 0.0
}

/// Z-buffered triangle fill with pixel centers at `(col + 0.5, row + 0.5)`.
/// Triangles with a vertex at or behind the camera plane are skipped.
pub fn rasterize(vertices: &Tensor, faces: &[[usize; 3]], camera: &CameraSpec) -> Result<RenderBuffers> {
    camera.validate()?;
    if vertices.ndim() != 2 || vertices.cols() != 3 {
        return Err(invalid!("rasterize expects n x 3 vertices, got {:?}", vertices.shape()));
    }
    let n = vertices.rows();
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
        return Err(invalid!("face {f:?} references a vertex beyond {n}"));
    }
    let (h, w) = (camera.height, camera.width);
    let cam: Vec<[f64; 3]> = vertices.data().chunks_exact(3).map(|p| camera.to_camera([p[0], p[1], p[2]])).collect();
    let mut mask = Mask::empty(h, w);
    let mut depth = vec![f64::INFINITY; h * w];

    for face in faces {
        let c = [cam[face[0]], cam[face[1]], cam[face[2]]];
        if c.iter().any(|p| p[2] <= MIN_DEPTH) {
            continue;
        }
        let mut p = c.map(|q| camera.pixel_of_camera_point(q).expect("depth checked"));
        let mut z = c.map(|q| q[2]);
        let mut area = edge(p[0], p[1], p[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            p.swap(1, 2);
            z.swap(1, 2);
            area = -area;
        }
        let min_x = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
        let max_x = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
        let max_y = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max);
        let c0 = (min_x - 0.5).floor().max(0.0) as usize;
        let r0 = (min_y - 0.5).floor().max(0.0) as usize;
        if max_x - 0.5 < 0.0 || max_y - 0.5 < 0.0 {
            continue;
        }
        let c1 = ((max_x - 0.5).ceil() as usize).min(w.saturating_sub(1));
        let r1 = ((max_y - 0.5).ceil() as usize).min(h.saturating_sub(1));
        if c0 >= w || r0 >= h {
            continue;
        }
        let top_left = [is_top_left(p[1], p[2]), is_top_left(p[2], p[0]), is_top_left(p[0], p[1])];
        for row in r0..=r1 {
            for col in c0..=c1 {
                let q = [col as f64 + 0.5, row as f64 + 0.5];
                let e = [edge(p[1], p[2], q), edge(p[2], p[0], q), edge(p[0], p[1], q)];
                let inside = (0..3).all(|i| e[i] > 0.0 || (e[i] == 0.0 && top_left[i]));
                if !inside {
                    continue;
                }
                // Barycentrics are affine in screen space; 1/z is too.
                let inv_z = (e[0] / z[0] + e[1] / z[1] + e[2] / z[2]) / area;
                let d = 1.0 / inv_z;
                let idx = row * w + col;
                if d < depth[idx] {
                    depth[idx] = d;
                    mask.data[idx] = true;
                }
            }
        }
    }
    Ok(RenderBuffers { mask, depth })
}

/// The paper's visibility rule: a keypoint is visible iff its camera-space
/// depth is at most the rendered depth at its (nearest) pixel, plus a
/// tolerance. Off-image and behind-camera keypoints are invisible.
pub fn keypoint_visibility(keypoints3d: &Tensor, camera: &CameraSpec, buffers: &RenderBuffers, tolerance: f64) -> Result<Vec<bool>> {
    if keypoints3d.ndim() != 2 || keypoints3d.cols() != 3 {
        return Err(invalid!("keypoint_visibility expects n x 3 keypoints, got {:?}", keypoints3d.shape()));
    }
    if buffers.height() != camera.height || buffers.width() != camera.width {
        return Err(invalid!("render buffers do not match the camera resolution"));
    }
    Ok(keypoints3d
        .data()
        .chunks_exact(3)
        .map(|k| {
            let c = camera.to_camera([k[0], k[1], k[2]]);
            let Some(px) = camera.pixel_of_camera_point(c) else { return false };
            let (col, row) = (px[0].floor(), px[1].floor());
            if col < 0.0 || row < 0.0 || col >= camera.width as f64 || row >= camera.height as f64 {
                return false;
            }
            c[2] <= buffers.depth_at(row as usize, col as usize) + tolerance
        })
        .collect())
}

/// Intersection over union; two empty masks have IoU 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(invalid!("mask resolutions differ: {}x{} vs {}x{}", a.height, a.width, b.height, b.width));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
