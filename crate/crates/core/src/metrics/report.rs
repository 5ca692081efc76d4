use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::align::pa_point_error;
use super::chamfer::chamfer_pa;
use super::pck::{auc_from_pck, default_auc_grid, fraction_within, head_tail_normalizer, visible_distances};
use crate::error::Result;
use crate::numkernel::Tensor;

/// Silhouette-normalized PCK thresholds reported by default.
pub const PCK_THRESHOLDS: [f64; 2] = [0.1, 0.15];

/// Model units are meters; reports are in millimeters.
const MM_PER_UNIT: f64 = 1000.0;

/// Predicted and ground-truth 3D geometry of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryPair {
    pub pred_joints: Tensor,
    pub gt_joints: Tensor,
    pub pred_vertices: Tensor,
    pub gt_vertices: Tensor,
}

/// Predictions and ground truth of one evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEvaluation {
    /// `None` for samples without 3D annotations: they contribute to the
    /// 2D metrics only.
    pub geometry: Option<GeometryPair>,
    /// `n_K x 2` pixels.
    pub pred_keypoints2d: Tensor,
    pub gt_keypoints2d: Tensor,
    pub visible: Vec<bool>,
    /// Ground-truth silhouette pixel count.
    pub mask_area: usize,
    /// Keypoint indices of head and tail for PCK@HTH.
    pub head_tail: (usize, usize),
}

/// Aggregated metrics. PA errors are means over samples with 3D
/// annotations; PCK and AUC pool all visible keypoints of all samples. A
/// metric with no contributing sample is absent (`None`, JSON `null`),
/// never zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub samples_3d: usize,
    pub pa_mpjpe_mm: Option<f64>,
    pub pa_mpvpe_mm: Option<f64>,
    pub pa_cd_mm: Option<f64>,
    /// Keys `"0.1"`, `"0.15"`, `"hth"`.
    pub pck: BTreeMap<String, Option<f64>>,
    pub auc: Option<f64>,
    pub pck_keypoints: usize,
    /// Samples left out of silhouette PCK/AUC (empty mask or no visible keypoint).
    pub skipped_silhouette: usize,
    /// Samples left out of PCK@HTH (coincident head and tail, or no visible keypoint).
    pub skipped_hth: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat `key value` table, one metric per line.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {}", "samples", self.samples);
        let _ = writeln!(out, "{:<14} {}", "samples_3d", self.samples_3d);
        let _ = writeln!(out, "{:<14} {}", "pa_mpjpe_mm", fmt(self.pa_mpjpe_mm));
        let _ = writeln!(out, "{:<14} {}", "pa_mpvpe_mm", fmt(self.pa_mpvpe_mm));
        let _ = writeln!(out, "{:<14} {}", "pa_cd_mm", fmt(self.pa_cd_mm));
        for (k, v) in &self.pck {
            let _ = writeln!(out, "{:<14} {}", format!("pck@{k}"), fmt(*v));
        }
        let _ = writeln!(out, "{:<14} {}", "auc", fmt(self.auc));
        let _ = writeln!(out, "{:<14} {}", "pck_keypoints", self.pck_keypoints);
        let _ = writeln!(out, "{:<14} {}", "skipped_sil", self.skipped_silhouette);
        let _ = write!(out, "{:<14} {}", "skipped_hth", self.skipped_hth);
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    samples: usize,
    samples_3d: usize,
    mpjpe: f64,
    mpvpe: f64,
    cd: f64,
    sil_distances: Vec<f64>,
    sil_normalizers: Vec<f64>,
    hth_hits: usize,
    hth_total: usize,
    skipped_silhouette: usize,
    skipped_hth: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, s: &SampleEvaluation) -> Result<()> {
        let d = visible_distances(&s.pred_keypoints2d, &s.gt_keypoints2d, &s.visible)?;
        if let Some(g) = &s.geometry {
            let mpjpe = pa_point_error(&g.pred_joints, &g.gt_joints)?;
            let mpvpe = pa_point_error(&g.pred_vertices, &g.gt_vertices)?;
            let cd = chamfer_pa(&g.pred_vertices, &g.gt_vertices)?;
            self.samples_3d += 1;
            self.mpjpe += mpjpe;
            self.mpvpe += mpvpe;
            self.cd += cd;
        }
        self.samples += 1;
        if s.mask_area > 0 && !d.is_empty() {
            let n = (s.mask_area as f64).sqrt();
            self.sil_normalizers.extend(std::iter::repeat_n(n, d.len()));
            self.sil_distances.extend_from_slice(&d);
        } else {
            self.skipped_silhouette += 1;
        }
        match head_tail_normalizer(&s.gt_keypoints2d, s.head_tail.0, s.head_tail.1) {
            Some(n) if !d.is_empty() => {
                self.hth_hits += d.iter().filter(|&&x| x <= 0.5 * n).count();
                self.hth_total += d.len();
            }
            _ => self.skipped_hth += 1,
        }
        Ok(())
    }

    pub fn finish(&self) -> MetricsReport {
        let mean_3d = |sum: f64| (self.samples_3d > 0).then(|| MM_PER_UNIT * sum / self.samples_3d as f64);
        let has_sil = !self.sil_distances.is_empty();
        let mut pck = BTreeMap::new();
        for t in PCK_THRESHOLDS {
            pck.insert(format!("{t}"), has_sil.then(|| fraction_within(&self.sil_distances, &self.sil_normalizers, t)));
        }
        pck.insert("hth".into(), (self.hth_total > 0).then(|| self.hth_hits as f64 / self.hth_total as f64));
        let auc = has_sil.then(|| auc_from_pck(&self.sil_distances, &self.sil_normalizers, &default_auc_grid()).expect("valid grid"));
        MetricsReport {
            samples: self.samples,
            samples_3d: self.samples_3d,
            pa_mpjpe_mm: mean_3d(self.mpjpe),
            pa_mpvpe_mm: mean_3d(self.mpvpe),
            pa_cd_mm: mean_3d(self.cd),
            pck,
            auc,
            pck_keypoints: self.sil_distances.len(),
            skipped_silhouette: self.skipped_silhouette,
            skipped_hth: self.skipped_hth,
        }
    }
}
