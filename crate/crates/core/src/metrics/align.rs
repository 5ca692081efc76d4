use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numkernel::Tensor;

/// A similarity transform `x ↦ s R x + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub scale: f64,
    /// Row-major, orthogonal with determinant +1.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Alignment {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) + self.translation[i])
    }

    /// Applies the transform to every row of an `n x 3` tensor.
    pub fn apply(&self, points: &Tensor) -> Tensor {
        let data = points.data().chunks_exact(3).flat_map(|p| self.apply_point([p[0], p[1], p[2]])).collect();
        Tensor::matrix(points.rows(), 3, data)
    }
}

pub(crate) fn rows3(points: &Tensor, what: &str) -> Result<Vec<Vector3<f64>>> {
    if points.ndim() != 2 || points.cols() != 3 {
        return Err(invalid!("{what} must be n x 3, got {:?}", points.shape()));
    }
    if !points.all_finite() {
        return Err(invalid!("{what} contains non-finite coordinates"));
    }
    Ok(points.data().chunks_exact(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect())
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// Similarity Procrustes (Umeyama): the `(s, R, t)` minimizing
/// `‖s R X + t − Y‖_F`, with a reflection correction so that det R = +1.
pub fn procrustes_align(x: &Tensor, y: &Tensor) -> Result<Alignment> {
    let xs = rows3(x, "prediction")?;
    let ys = rows3(y, "reference")?;
    if xs.len() != ys.len() {
        return Err(invalid!("Procrustes needs matched point sets, got {} and {}", xs.len(), ys.len()));
    }
    procrustes_vectors(&xs, &ys)
}

pub(crate) fn procrustes_vectors(xs: &[Vector3<f64>], ys: &[Vector3<f64>]) -> Result<Alignment> {
    if xs.len() < 3 {
        return Err(invalid!("Procrustes needs at least 3 points, got {}", xs.len()));
    }
    let (mx, my) = (centroid(xs), centroid(ys));
    let var_x: f64 = xs.iter().map(|p| (p - mx).norm_squared()).sum();
    let scale_ref = xs.iter().map(|p| p.norm_squared()).sum::<f64>().max(1e-300);
    if var_x <= 1e-24 * scale_ref || var_x == 0.0 {
        return Err(invalid!("Procrustes prediction is degenerate (zero variance)"));
    }
    let mut cov = Matrix3::zeros();
    for (p, q) in xs.iter().zip(ys) {
        cov += (q - my) * (p - mx).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    // nalgebra sorts singular values in descending order, so index 2 is the
    // smallest one.
    let r = u * d * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let s = trace / var_x;
    let t = my - s * r * mx;
    Ok(Alignment { scale: s, rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])), translation: [t.x, t.y, t.z] })
}

/// Mean Euclidean distance after aligning `pred` to `gt`; PA-MPJPE on
/// joints and PA-MPVPE on vertices.
pub fn pa_point_error(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let a = procrustes_align(pred, gt)?;
    let aligned = a.apply(pred);
    Ok(mean_distance(&aligned, gt))
}

pub(crate) fn mean_distance(a: &Tensor, b: &Tensor) -> f64 {
    let total: f64 = a
        .data()
        .chunks_exact(3)
        .zip(b.data().chunks_exact(3))
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .sum();
    total / a.rows() as f64
}
