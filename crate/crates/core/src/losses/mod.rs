//! Training objectives: Eq. 1 (family contrastive), Eq. 4 (3D), Eq. 5 (2D
//! keypoints + soft mask), Eq. 6 (SMAL prior), Eq. 7 (AVES prior) and the
//! gated total of Eq. 3.

mod prior;
mod sample;
mod terms;
mod weights;

pub use prior::{load_priors, save_priors, PriorDistribution};
pub use sample::{batch_loss_graph, sample_loss_graph, BatchLossVars, LossContext, SampleLossVars, SampleTargets};
pub use terms::{
    aves_prior_graph, loss_2d, loss_2d_graph, loss_3d, loss_3d_graph, loss_aves_prior, loss_con, loss_con_graph, loss_smal_prior, loss_total,
    smal_prior_graph, PredictedBody, SampleComponents, Targets2d, Targets3d, UNIT_NORM_TOLERANCE,
};
pub use weights::{AvesPriorWeights, Loss2dWeights, Loss3dWeights, LossWeights, SmalPriorWeights};
