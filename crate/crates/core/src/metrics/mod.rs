//! Evaluation battery of §V: Procrustes-aligned point errors, PCK with
//! silhouette-area and head-to-tail normalization, AUC, and PA-CD.

mod align;
mod chamfer;
mod pck;
mod report;

pub use align::{pa_point_error, procrustes_align, Alignment};
pub use chamfer::{chamfer, chamfer_alignment, chamfer_pa, ICP_ITERATIONS};
pub use pck::{auc_from_pck, default_auc_grid, head_tail_normalizer, pck, silhouette_normalizer, visible_distances};
pub use report::{GeometryPair, MetricsAccumulator, MetricsReport, SampleEvaluation, PCK_THRESHOLDS};
