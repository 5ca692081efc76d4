use std::sync::Arc;

use crate::numkernel::{CustomOp, Graph, Tensor, Var};

/// Below this angle the trigonometric coefficients switch to series.
const SERIES_BELOW: f64 = 1e-2;

/// Coefficients of `R = I + a K + b K^2` together with `c = a'(t)/t` and
/// `d = b'(t)/t`, which the backward pass needs.
fn coefficients(theta: f64) -> (f64, f64, f64, f64) {
    if theta < SERIES_BELOW {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        let a = 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0;
        let b = 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0;
        let c = -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45360.0;
        let d = -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453600.0;
        (a, b, c, d)
    } else {
        let (s, co) = theta.sin_cos();
        let half = (0.5 * theta).sin();
        let one_minus_cos = 2.0 * half * half;
        let t2 = theta * theta;
        let a = s / theta;
        let b = one_minus_cos / t2;
        let c = (theta * co - s) / (t2 * theta);
        let d = (theta * s - 2.0 * one_minus_cos) / (t2 * t2);
        (a, b, c, d)
    }
}

fn skew(w: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mat_mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn inner(a: &[[f64; 3]; 3], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += a[i][j] * b[i * 3 + j];
        }
    }
    s
}

/// Rotation matrix of an axis-angle vector (Rodrigues' formula).
pub fn rodrigues(w: [f64; 3]) -> [[f64; 3]; 3] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, _, _) = coefficients(theta);
    let k = skew(w);
    let k2 = mat_mul3(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Row-wise Rodrigues map: `n x 3` axis-angle rows to `n x 9` row-major
/// rotation matrices.
#[derive(Debug)]
pub struct RodriguesOp;

impl CustomOp for RodriguesOp {
    fn name(&self) -> &'static str {
        "rodrigues"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, String> {
        let w = inputs[0];
        if w.ndim() != 2 || w.cols() != 3 {
            return Err(format!("expected n x 3 axis-angle rows, got {:?}", w.shape()));
        }
        let mut out = Vec::with_capacity(w.rows() * 9);
        for row in w.data().chunks_exact(3) {
            let r = rodrigues([row[0], row[1], row[2]]);
            out.extend(r.iter().flatten());
        }
        Ok(Tensor::matrix(w.rows(), 9, out))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let w = inputs[0];
        let mut gw = Vec::with_capacity(w.len());
        for (row, g) in w.data().chunks_exact(3).zip(grad.data().chunks_exact(9)) {
            let om = [row[0], row[1], row[2]];
            let theta = (om[0] * om[0] + om[1] * om[1] + om[2] * om[2]).sqrt();
            let (a, b, c, d) = coefficients(theta);
            let k = skew(om);
            let k2 = mat_mul3(&k, &k);
            let gk = inner(&k, g);
            let gk2 = inner(&k2, g);
            for axis in 0..3 {
                let mut e = [0.0; 3];
                e[axis] = 1.0;
                let ek = skew(e);
                let ekk = mat_mul3(&ek, &k);
                let kek = mat_mul3(&k, &ek);
                let mut sym = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        sym[i][j] = ekk[i][j] + kek[i][j];
                    }
                }
                gw.push(c * om[axis] * gk + a * inner(&ek, g) + d * om[axis] * gk2 + b * inner(&sym, g));
            }
        }
        vec![Tensor::matrix(w.rows(), 3, gw)]
    }
}

/// Records the Rodrigues map of an `n x 3` node.
pub fn rodrigues_rows(g: &mut Graph, theta: Var) -> Var {
    g.custom(Arc::new(RodriguesOp), &[theta])
}
