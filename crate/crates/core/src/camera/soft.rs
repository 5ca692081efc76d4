use std::sync::Arc;

use super::projection::{CameraSpec, MIN_DEPTH};
use crate::numkernel::{CustomOp, Graph, Tensor, Var};

/// Default silhouette sharpness, per pixel.
pub const SOFT_SHARPNESS: f64 = 50.0;

/// Faces contribute only within this many `1/k` units of their bounding box;
/// beyond it `sigmoid(-36) < 3e-16`.
const CUTOFF_SHARPNESS_UNITS: f64 = 36.0;

/// Differentiable silhouette of a projected triangle mesh.
///
/// For each face `f` and pixel center `q`, `d_f(q)` is the minimum over the
/// face's edges of the signed distance from `q` to the edge line (positive
/// inside). Coverage is `sigma_f = sigmoid(k d_f)` and the pixel value is
/// `1 - prod_f (1 - sigma_f)`. Inputs are `pixels n x 2` and camera-space
/// depth `n x 1`; faces with a vertex at or behind the camera plane and
/// degenerate faces are skipped. Depth receives zero gradient.
#[derive(Debug)]
pub struct SoftSilhouetteOp {
    faces: Vec<[usize; 3]>,
    height: usize,
    width: usize,
    sharpness: f64,
}

impl SoftSilhouetteOp {
    pub fn new(faces: Vec<[usize; 3]>, height: usize, width: usize, sharpness: f64) -> Self {
        Self { faces, height, width, sharpness }
    }
}

/// Per-face geometry reused by forward and backward.
struct FaceGeom {
    p: [[f64; 2]; 3],
    orient: f64,
    rows: (usize, usize),
    cols: (usize, usize),
}

impl SoftSilhouetteOp {
    fn face_geom(&self, pixels: &Tensor, depth: &Tensor, face: &[usize; 3]) -> Option<FaceGeom> {
        if face.iter().any(|&i| depth.data()[i] <= MIN_DEPTH) {
            return None;
        }
        let p = face.map(|i| [pixels.data()[2 * i], pixels.data()[2 * i + 1]]);
        let area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
        let lens_ok = (0..3).all(|e| {
            let (a, b) = (p[e], p[(e + 1) % 3]);
            (b[0] - a[0]).hypot(b[1] - a[1]) > 1e-12
        });
        if area.abs() < 1e-12 || !area.is_finite() || !lens_ok {
            return None;
        }
        let cut = CUTOFF_SHARPNESS_UNITS / self.sharpness;
        let lo_x = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min) - cut;
        let hi_x = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max) + cut;
        let lo_y = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min) - cut;
        let hi_y = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max) + cut;
        // Pixel centers c + 0.5 inside [lo, hi].
        let first = |lo: f64| (lo - 0.5).ceil().max(0.0);
        let last = |hi: f64, n: usize| (hi - 0.5).floor().min(n as f64 - 1.0);
        let (c0, c1) = (first(lo_x), last(hi_x, self.width));
        let (r0, r1) = (first(lo_y), last(hi_y, self.height));
        if c0 > c1 || r0 > r1 {
            return None;
        }
        Some(FaceGeom { p, orient: area.signum(), rows: (r0 as usize, r1 as usize), cols: (c0 as usize, c1 as usize) })
    }

    /// Signed distance to the nearest edge line and that edge's index.
    fn min_edge(geom: &FaceGeom, q: [f64; 2]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for e in 0..3 {
            let (a, b) = (geom.p[e], geom.p[(e + 1) % 3]);
            let ex = b[0] - a[0];
            let ey = b[1] - a[1];
            let cr = ex * (q[1] - a[1]) - ey * (q[0] - a[0]);
            let d = geom.orient * cr / ex.hypot(ey);
            if d < best.0 {
                best = (d, e);
            }
        }
        best
    }

    fn for_each_coverage(&self, pixels: &Tensor, depth: &Tensor, mut f: impl FnMut(usize, &FaceGeom, usize, [f64; 2], f64, usize)) {
        for (fi, face) in self.faces.iter().enumerate() {
            let Some(geom) = self.face_geom(pixels, depth, face) else { continue };
            for row in geom.rows.0..=geom.rows.1 {
                for col in geom.cols.0..=geom.cols.1 {
                    let q = [col as f64 + 0.5, row as f64 + 0.5];
                    let (d, e) = Self::min_edge(&geom, q);
                    f(fi, &geom, row * self.width + col, q, d, e);
                }
            }
        }
    }

    /// Product of `(1 - sigma)` over factors that are not exactly zero, and
    /// the number of exactly-zero factors, per pixel.
    fn products(&self, pixels: &Tensor, depth: &Tensor) -> (Vec<f64>, Vec<u32>) {
        let n = self.height * self.width;
        let mut prod = vec![1.0; n];
        let mut zeros = vec![0u32; n];
        self.for_each_coverage(pixels, depth, |_, _, idx, _, d, _| {
            let keep = 1.0 - sigmoid(self.sharpness * d);
            if keep == 0.0 {
                zeros[idx] += 1;
            } else {
                prod[idx] *= keep;
            }
        });
        (prod, zeros)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl CustomOp for SoftSilhouetteOp {
    fn name(&self) -> &'static str {
        "soft_silhouette"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, String> {
        let (px, z) = (inputs[0], inputs[1]);
        if px.ndim() != 2 || px.cols() != 2 || z.len() != px.rows() {
            return Err(format!("soft silhouette of pixels {:?} with depth {:?}", px.shape(), z.shape()));
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= px.rows())) {
            return Err(format!("face {f:?} references a vertex beyond {}", px.rows()));
        }
        let (prod, zeros) = self.products(px, z);
        let out = prod.iter().zip(&zeros).map(|(&p, &nz)| if nz > 0 { 1.0 } else { 1.0 - p }).collect();
        Ok(Tensor::matrix(self.height, self.width, out))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (px, z) = (inputs[0], inputs[1]);
        let (prod, zeros) = self.products(px, z);
        let mut gp = vec![0.0; px.len()];
        let k = self.sharpness;
        self.for_each_coverage(px, z, |fi, geom, idx, q, d, e| {
            let s = sigmoid(k * d);
            let keep = 1.0 - s;
            // Product of the other faces' (1 - sigma) at this pixel.
            let others = match (zeros[idx], keep == 0.0) {
                (0, _) => prod[idx] / keep,
                (1, true) => prod[idx],
                _ => 0.0,
            };
            let g_d = grad.data()[idx] * others * s * keep * k;
            if g_d == 0.0 {
                return;
            }
            let (ia, ib) = (e, (e + 1) % 3);
            let (a, b) = (geom.p[ia], geom.p[ib]);
            let ex = b[0] - a[0];
            let ey = b[1] - a[1];
            let wx = q[0] - a[0];
            let wy = q[1] - a[1];
            let len = ex.hypot(ey);
            let cr = ex * wy - ey * wx;
            // d = orient * cr / len
            let dcr_a = [ey - wy, wx - ex];
            let dcr_b = [wy, -wx];
            let dlen_b = [ex / len, ey / len];
            let face = self.faces[fi];
            let scale = g_d * geom.orient;
            for c in 0..2 {
                let da = (dcr_a[c] * len + cr * dlen_b[c]) / (len * len);
                let db = (dcr_b[c] * len - cr * dlen_b[c]) / (len * len);
                gp[2 * face[ia] + c] += scale * da;
                gp[2 * face[ib] + c] += scale * db;
            }
        });
        vec![Tensor::matrix(px.rows(), 2, gp), Tensor::zeros(z.shape())]
    }
}

/// Records the soft silhouette of mesh `vertices` (n x 3, model space) under
/// camera translation `translation` (1 x 3). Returns an `H x W` node.
pub fn soft_silhouette_graph(g: &mut Graph, vertices: Var, translation: Var, faces: &[[usize; 3]], camera: &CameraSpec, sharpness: f64) -> Var {
    let pixels = super::project_graph(g, vertices, translation, camera);
    let cam = g.add(vertices, translation);
    let z = g.slice_cols(cam, 2, 3);
    g.custom(Arc::new(SoftSilhouetteOp::new(faces.to_vec(), camera.height, camera.width, sharpness)), &[pixels, z])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{grad_check, GradCheckConfig};
    use std::collections::BTreeMap;

    #[test]
    fn interior_is_one_exterior_is_zero_edge_is_half() {
        let op = SoftSilhouetteOp::new(vec![[0, 1, 2]], 16, 16, SOFT_SHARPNESS);
        // Right triangle with a vertical edge through x = 8 (a pixel boundary).
        let px = Tensor::from_rows(&[[2.0, 2.0], [8.0, 2.0], [8.0, 14.0]]);
        let z = Tensor::col(vec![1.0; 3]);
        let m = op.forward(&[&px, &z]).unwrap();
        assert!((m.at(10, 7) - 1.0).abs() < 1e-9);
        assert!(m.at(10, 12) < 1e-12);
        // Pixel center 0.5 px outside the vertical edge.
        let expect = 1.0 / (1.0 + (0.5f64 * SOFT_SHARPNESS).exp());
        assert!((m.at(10, 8) - expect).abs() < 1e-15);
        // Behind-camera faces are ignored.
        let z = Tensor::col(vec![1.0, -1.0, 1.0]);
        assert_eq!(op.forward(&[&px, &z]).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Low sharpness keeps many pixels in the smooth band.
        let faces = vec![[0, 1, 2], [1, 3, 2], [0, 2, 4]];
        let cam = CameraSpec::for_image(12, 12, [0.05, -0.02, 3.0]);
        let mut g = Graph::new();
        let v = g.param(
            "v",
            Tensor::from_rows(&[[-0.2, -0.15, 0.1], [0.13, -0.11, 0.0], [0.01, 0.17, -0.1], [0.21, 0.12, 0.05], [-0.19, 0.14, 0.2]]),
        );
        let t = g.param("t", Tensor::row(cam.translation.to_vec()));
        let m = soft_silhouette_graph(&mut g, v, t, &faces, &cam, 2.0);
        let target = g.constant(Tensor::matrix(12, 12, (0..144).map(|i| ((i * 37) % 11) as f64 / 10.0).collect()));
        let diff = g.sub(m, target);
        let sq = g.square(diff);
        let y = g.mean(sq);
        let rep = grad_check(&g, y, &BTreeMap::new(), &GradCheckConfig::default()).unwrap();
        assert!(rep.max_rel_error() < 1e-5, "{rep:?}");
    }
}
