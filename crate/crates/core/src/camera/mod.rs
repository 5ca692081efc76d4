//! Fixed-intrinsics camera: projection, exact rasterization to mask and
//! depth buffers, depth-based keypoint visibility, mask IoU, and the
//! differentiable soft silhouette used by the 2D loss.

mod projection;
mod raster;
mod soft;

pub use projection::{project, project_graph, CameraSpec, Projection, MIN_DEPTH};
pub use raster::{keypoint_visibility, mask_iou, rasterize, Mask, RenderBuffers, VISIBILITY_TOLERANCE};
pub use soft::{soft_silhouette_graph, SoftSilhouetteOp, SOFT_SHARPNESS};
