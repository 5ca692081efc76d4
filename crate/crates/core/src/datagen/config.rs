use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bodymodel::Taxon;
use crate::camera::CameraSpec;
use crate::error::{invalid, Result};

/// Simulated segmentation of a generated image, standing in for the
/// segmenter of the paper's cycle-consistency check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPerturbation {
    /// Morphological dilation radius (Chebyshev, pixels).
    pub dilation_radius: usize,
    /// Per record, a flip probability is drawn uniformly from this range;
    /// each pixel within `boundary_band` of the silhouette boundary is then
    /// flipped with that probability.
    pub boundary_flip_range: [f64; 2],
    pub boundary_band: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub name: String,
    /// Kept records per taxon.
    pub quadruped_count: usize,
    pub avian_count: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub families_per_taxon: usize,
    /// Spread of the family centers in β space.
    pub family_center_sigma: f64,
    /// Seeds the family centers, independent of the master seed so that
    /// train and test sets share families.
    pub family_seed: u64,
    pub beta_sigma: f64,
    pub theta_sigma: f64,
    pub alpha_range: [f64; 2],
    /// Root rotation components are drawn from `(-r, r)`.
    pub rotation_range: f64,
    pub position_min: [f64; 3],
    pub position_max: [f64; 3],
    pub iou_threshold: f64,
    pub perturbation: MaskPerturbation,
    /// Give up after this many attempts per requested record.
    pub max_attempts_factor: usize,
    pub records_per_shard: usize,
    /// Write one PGM mask and one depth raster per kept record.
    pub write_rasters: bool,
    /// `false` marks the dataset as 2D-only (like Animal Pose or CUB): the
    /// records carry the generating parameters on disk, but training and
    /// evaluation treat them as unannotated in 3D.
    pub has_3d: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            quadruped_count: 100,
            avian_count: 100,
            image_height: 64,
            image_width: 64,
            families_per_taxon: 4,
            family_center_sigma: 1.0,
            family_seed: 7,
            beta_sigma: 0.3,
            theta_sigma: 0.3,
            alpha_range: [-0.5, 3.5],
            rotation_range: PI,
            position_min: [-0.5, -0.5, 4.0],
            position_max: [0.5, 0.5, 8.0],
            iou_threshold: 0.85,
            perturbation: MaskPerturbation { dilation_radius: 0, boundary_flip_range: [0.0, 0.1], boundary_band: 1 },
            max_attempts_factor: 20,
            records_per_shard: 256,
            write_rasters: true,
            has_3d: true,
        }
    }
}

impl GenConfig {
    pub fn count(&self, taxon: Taxon) -> usize {
        match taxon {
            Taxon::Quadruped => self.quadruped_count,
            Taxon::Avian => self.avian_count,
        }
    }

    /// Depth-channel normalization range: the z extent of the position box.
    pub fn near_far(&self) -> (f64, f64) {
        (self.position_min[2], self.position_max[2])
    }

    /// Intrinsics shared by every record (translation zero).
    pub fn camera(&self) -> CameraSpec {
        CameraSpec::for_image(self.image_height, self.image_width, [0.0; 3])
    }

    /// Family label of the `k`-th family of `taxon`; labels are global
    /// across taxa.
    pub fn family_label(&self, taxon: Taxon, k: usize) -> usize {
        taxon.index() * self.families_per_taxon + k
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 {
            return Err(invalid!("image size must be nonzero"));
        }
        if self.families_per_taxon == 0 {
            return Err(invalid!("need at least one family per taxon"));
        }
        let nonneg = [self.family_center_sigma, self.beta_sigma, self.theta_sigma, self.rotation_range];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid!("sampling spreads must be finite and nonnegative"));
        }
        let [lo, hi] = self.perturbation.boundary_flip_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(invalid!("boundary_flip_range {:?} must be an ordered sub-range of [0, 1]", [lo, hi]));
        }
        if !(self.alpha_range[0] <= self.alpha_range[1]) || self.alpha_range[0] <= -1.0 {
            return Err(invalid!("alpha range {:?} must be ordered with lower bound above -1", self.alpha_range));
        }
        if (0..3).any(|i| !(self.position_min[i] <= self.position_max[i])) || self.position_min[2] <= 0.0 {
            return Err(invalid!("position box must be ordered and in front of the camera"));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(invalid!("iou_threshold must be in (0, 1], got {}", self.iou_threshold));
        }
        if self.records_per_shard == 0 || self.max_attempts_factor == 0 {
            return Err(invalid!("records_per_shard and max_attempts_factor must be positive"));
        }
        Ok(())
    }
}
