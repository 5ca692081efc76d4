use nalgebra::Vector3;

use super::align::{procrustes_vectors, rows3, Alignment};
use crate::error::{invalid, Result};
use crate::numkernel::Tensor;

/// Iterations of the closest-point alignment used when topologies differ.
pub const ICP_ITERATIONS: usize = 20;

fn nearest(p: &Vector3<f64>, cloud: &[Vector3<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, q) in cloud.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, best.1.sqrt())
}

/// Symmetric Chamfer distance `mean_x min_y ‖x−y‖ + mean_y min_x ‖x−y‖`.
pub fn chamfer(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (a, b) = (rows3(a, "first cloud")?, rows3(b, "second cloud")?);
    Ok(chamfer_vectors(&a, &b))
}

fn chamfer_vectors(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let ab: f64 = a.iter().map(|p| nearest(p, b).1).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|p| nearest(p, a).1).sum::<f64>() / b.len() as f64;
    ab + ba
}

fn apply(a: &Alignment, p: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    p.iter().map(|v| Vector3::from(a.apply_point([v.x, v.y, v.z]))).collect()
}

fn compose(outer: &Alignment, inner: &Alignment) -> Alignment {
    let r = |a: &Alignment| nalgebra::Matrix3::from_fn(|i, j| a.rotation[i][j]);
    let rot = r(outer) * r(inner);
    let t = outer.apply_point(inner.translation);
    Alignment { scale: outer.scale * inner.scale, rotation: std::array::from_fn(|i| std::array::from_fn(|j| rot[(i, j)])), translation: t }
}

/// Aligns `pred` onto `gt`: matched Procrustes when the point counts agree
/// (same topology), otherwise closest-point iterations starting from
/// centroid and RMS-radius matching.
pub fn chamfer_alignment(pred: &Tensor, gt: &Tensor) -> Result<Alignment> {
    let (p, g) = (rows3(pred, "prediction")?, rows3(gt, "reference")?);
    if p.len() < 3 || g.len() < 3 {
        return Err(invalid!("Chamfer distance needs at least 3 points per cloud"));
    }
    if p.len() == g.len() {
        return procrustes_vectors(&p, &g);
    }
    let c = |v: &[Vector3<f64>]| v.iter().sum::<Vector3<f64>>() / v.len() as f64;
    let rms = |v: &[Vector3<f64>], m: Vector3<f64>| (v.iter().map(|x| (x - m).norm_squared()).sum::<f64>() / v.len() as f64).sqrt();
    let (cp, cg) = (c(&p), c(&g));
    let (rp, rg) = (rms(&p, cp), rms(&g, cg));
    if !(rp > 0.0) || !(rg > 0.0) {
        return Err(invalid!("Chamfer distance on a degenerate cloud"));
    }
    let s = rg / rp;
    let mut current = Alignment { scale: s, translation: (cg - s * cp).into(), ..Alignment::identity() };
    for _ in 0..ICP_ITERATIONS {
        let moved = apply(&current, &p);
        let matched: Vec<Vector3<f64>> = moved.iter().map(|x| g[nearest(x, &g).0]).collect();
        let Ok(step) = procrustes_vectors(&moved, &matched) else { break };
        current = compose(&step, &current);
    }
    Ok(current)
}

/// PA-CD: Chamfer distance after aligning `pred` onto `gt`.
pub fn chamfer_pa(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let a = chamfer_alignment(pred, gt)?;
    let moved = apply(&a, &rows3(pred, "prediction")?);
    Ok(chamfer_vectors(&moved, &rows3(gt, "reference")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::rodrigues;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::matrix(n, 3, (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn brute(a: &Tensor, b: &Tensor) -> f64 {
        let d = |x: &[f64], y: &[f64]| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt();
        let one = |a: &Tensor, b: &Tensor| {
            a.data().chunks_exact(3).map(|x| b.data().chunks_exact(3).map(|y| d(x, y)).fold(f64::INFINITY, f64::min)).sum::<f64>() / a.rows() as f64
        };
        one(a, b) + one(b, a)
    }

    #[test]
    fn identical_is_zero_and_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cloud(&mut rng, 25);
        assert!(chamfer_pa(&a, &a).unwrap() < 1e-12);
        let rev = Tensor::matrix(25, 3, a.data().chunks_exact(3).rev().flatten().copied().collect());
        let b = cloud(&mut rng, 25);
        assert!((chamfer(&rev, &b).unwrap() - chamfer(&a, &b).unwrap()).abs() < 1e-12);
        assert!((chamfer(&a, &b).unwrap() - chamfer(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn outlier_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = cloud(&mut rng, 12);
        let mut extra = gt.data().to_vec();
        extra.extend([5.0, 5.0, 5.0]);
        let pred = Tensor::matrix(13, 3, extra);
        assert!((chamfer(&pred, &gt).unwrap() - brute(&pred, &gt)).abs() < 1e-12);
        // The outlier only contributes its nearest distance over n points.
        let nn = gt.data().chunks_exact(3).map(|y| ((5.0 - y[0]).powi(2) + (5.0 - y[1]).powi(2) + (5.0 - y[2]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
        assert!((chamfer(&pred, &gt).unwrap() - nn / 13.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_transformed_clouds_align() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = cloud(&mut rng, 40);
        let r = rodrigues([0.1, 0.2, -0.15]);
        let t = Alignment { scale: 1.7, rotation: r, translation: [0.5, -0.2, 3.0] };
        let pred = t.apply(&gt);
        assert!(chamfer_pa(&pred, &gt).unwrap() < 1e-9);
        // Different topology: a subset of a transformed cloud still aligns.
        let sub = Tensor::matrix(30, 3, pred.data()[..90].to_vec());
        assert!(chamfer_pa(&sub, &gt).unwrap() < 0.3);
    }
}
