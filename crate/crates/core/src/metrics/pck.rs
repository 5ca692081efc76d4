use crate::camera::Mask;
use crate::error::{invalid, Result};
use crate::numkernel::Tensor;

/// Thresholds of the AUC curve: 0.01, 0.02, ..., 1.00.
pub fn default_auc_grid() -> Vec<f64> {
    (1..=100).map(|i| i as f64 / 100.0).collect()
}

/// `sqrt` of the silhouette pixel count; `None` for an empty mask.
pub fn silhouette_normalizer(mask: &Mask) -> Option<f64> {
    let n = mask.count();
    (n > 0).then(|| (n as f64).sqrt())
}

/// 2D head-to-tail distance; `None` when head and tail coincide.
pub fn head_tail_normalizer(gt2d: &Tensor, head: usize, tail: usize) -> Option<f64> {
    let (h, t) = (gt2d.data().get(2 * head..2 * head + 2)?, gt2d.data().get(2 * tail..2 * tail + 2)?);
    let d = ((h[0] - t[0]).powi(2) + (h[1] - t[1]).powi(2)).sqrt();
    (d > 0.0).then_some(d)
}

/// Euclidean distances of the visible keypoints, in keypoint order.
pub fn visible_distances(pred2d: &Tensor, gt2d: &Tensor, visible: &[bool]) -> Result<Vec<f64>> {
    if pred2d.shape() != gt2d.shape() || gt2d.cols() != 2 || visible.len() != gt2d.rows() {
        return Err(invalid!("PCK inputs {:?} vs {:?} with {} flags", pred2d.shape(), gt2d.shape(), visible.len()));
    }
    Ok(pred2d
        .data()
        .chunks_exact(2)
        .zip(gt2d.data().chunks_exact(2))
        .zip(visible)
        .filter(|(_, &v)| v)
        .map(|((p, q), _)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .collect())
}

/// Fraction of visible keypoints with `‖pred − gt‖ ≤ threshold · normalizer`.
/// PCK@HTH is `pck(.., head_tail_normalizer, 0.5)`.
pub fn pck(pred2d: &Tensor, gt2d: &Tensor, visible: &[bool], normalizer: f64, threshold: f64) -> Result<f64> {
    let d = visible_distances(pred2d, gt2d, visible)?;
    if d.is_empty() {
        return Err(invalid!("PCK needs at least one visible keypoint"));
    }
    if !(normalizer > 0.0) {
        return Err(invalid!("PCK normalizer must be positive, got {normalizer}"));
    }
    Ok(fraction_within(&d, &vec![normalizer; d.len()], threshold))
}

pub(crate) fn fraction_within(distances: &[f64], normalizers: &[f64], threshold: f64) -> f64 {
    let hits = distances.iter().zip(normalizers).filter(|(&d, &n)| d <= threshold * n).count();
    hits as f64 / distances.len() as f64
}

/// Mean PCK over `grid` for keypoints with individual normalizers; a
/// Riemann approximation of the area under the PCK–threshold curve.
pub fn auc_from_pck(distances: &[f64], normalizers: &[f64], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(invalid!("AUC grid is empty"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) || grid[0] < 0.0 {
        return Err(invalid!("AUC grid must be increasing and nonnegative"));
    }
    if distances.is_empty() || distances.len() != normalizers.len() {
        return Err(invalid!("AUC needs matched, nonempty distances and normalizers"));
    }
    Ok(grid.iter().map(|&t| fraction_within(distances, normalizers, t)).sum::<f64>() / grid.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_examples() {
        let gt = Tensor::from_rows(&[[10.0, 10.0], [20.0, 20.0], [5.0, 5.0]]);
        assert_eq!(pck(&gt, &gt, &[true, true, false], 8.0, 0.01).unwrap(), 1.0);
        let mut pred = gt.clone();
        pred.set(1, 0, 20.0 + 0.2 * 8.0);
        pred.set(2, 0, 100.0);
        assert_eq!(pck(&pred, &gt, &[true, true, false], 8.0, 0.1).unwrap(), 0.5);
        assert!(pck(&pred, &gt, &[false; 3], 8.0, 0.1).is_err());
        // Closed comparison: exactly at the threshold counts (values chosen
        // to be exact in binary).
        pred.set(1, 0, 22.0);
        assert_eq!(pck(&pred, &gt, &[true, true, false], 8.0, 0.25).unwrap(), 1.0);
    }

    #[test]
    fn auc_examples() {
        let grid = default_auc_grid();
        assert_eq!(auc_from_pck(&[0.0, 0.0], &[1.0, 1.0], &grid).unwrap(), 1.0);
        assert_eq!(auc_from_pck(&[5.0], &[1.0], &grid).unwrap(), 0.0);
        assert!((auc_from_pck(&[0.5], &[1.0], &grid).unwrap() - 0.51).abs() < 1e-12);
        assert!((auc_from_pck(&[0.505], &[1.0], &grid).unwrap() - 0.50).abs() < 1e-12);
        assert!(auc_from_pck(&[0.5], &[1.0], &[]).is_err());
    }

    #[test]
    fn normalizers() {
        let m = Mask::from_fn(4, 4, |r, c| r < 2 && c < 2);
        assert_eq!(silhouette_normalizer(&m), Some(2.0));
        assert_eq!(silhouette_normalizer(&Mask::empty(4, 4)), None);
        let k = Tensor::from_rows(&[[0.0, 0.0], [3.0, 4.0], [3.0, 4.0]]);
        assert_eq!(head_tail_normalizer(&k, 0, 1), Some(5.0));
        assert_eq!(head_tail_normalizer(&k, 1, 2), None);
    }

    #[test]
    fn monotone_in_threshold() {
        let d = [0.1, 0.3, 0.35, 0.9, 2.0];
        let n = [1.0, 2.0, 0.5, 1.0, 1.0];
        let mut last = 0.0;
        for t in default_auc_grid() {
            let p = fraction_within(&d, &n, t);
            assert!(p >= last);
            last = p;
        }
    }
}
