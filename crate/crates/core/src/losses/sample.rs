//! Wires network predictions through the body model, the camera and the
//! soft rasterizer into the gated per-sample objective of Eq. 3, and the
//! whole-batch objective including Eq. 1.

use super::prior::PriorDistribution;
use super::terms::{aves_prior_graph, loss_2d_graph, loss_3d_graph, loss_con_graph, smal_prior_graph, PredictedBody, SampleComponents, Targets2d, Targets3d};
use super::weights::LossWeights;
use crate::bodymodel::{model_forward_graph, BodyParamVars, MeshVars, ModelTemplate, Taxon};
use crate::camera::{project_graph, soft_silhouette_graph, CameraSpec, SOFT_SHARPNESS};
use crate::error::{invalid, Result};
use crate::network::{network_forward_graph, NetworkConfig, NetworkState, PredictionVars};
use crate::numkernel::{Graph, Tensor, Var};

/// Everything a training sample supervises.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTargets {
    pub taxon: Taxon,
    /// Family label for Eq. 1.
    pub family: usize,
    /// Present only for samples with 3D annotations.
    pub targets_3d: Option<Targets3d>,
    pub targets_2d: Targets2d,
}

/// Graph nodes of one sample's loss terms (unweighted) and its weighted
/// objective.
#[derive(Clone, Copy, Debug)]
pub struct SampleLossVars {
    pub objective: Var,
    pub loss_3d: Option<Var>,
    pub loss_2d: Var,
    pub smal_prior: Option<Var>,
    pub aves_prior: Option<Var>,
    pub mesh: MeshVars,
    pub keypoints2d: Var,
    pub soft_mask: Var,
}

impl SampleLossVars {
    pub fn components(&self, g: &Graph) -> SampleComponents {
        let val = |v: Option<Var>| v.map(|v| g.value(v).item());
        SampleComponents { loss_3d: val(self.loss_3d), loss_2d: g.value(self.loss_2d).item(), smal_prior: val(self.smal_prior), aves_prior: val(self.aves_prior) }
    }
}

/// Per-sample part of Eq. 3. The mesh is posed at the origin (γ = 0);
/// the predicted camera translation places it. `camera` supplies the
/// intrinsics and the image size of the targets.
pub fn sample_loss_graph(
    g: &mut Graph,
    pred: &PredictionVars,
    template: &ModelTemplate,
    targets: &SampleTargets,
    camera: &CameraSpec,
    prior: &PriorDistribution,
    weights: &LossWeights,
) -> Result<SampleLossVars> {
    if template.taxon != targets.taxon || prior.taxon != targets.taxon {
        return Err(invalid!("sample of taxon {} paired with template {} and prior {}", targets.taxon, template.taxon, prior.taxon));
    }
    if [camera.height, camera.width] != [targets.targets_2d.mask.rows(), targets.targets_2d.mask.cols()] {
        return Err(invalid!("camera image {}x{} does not match the target mask {:?}", camera.height, camera.width, targets.targets_2d.mask.shape()));
    }
    let gamma = g.constant(Tensor::zeros(&[1, 3]));
    let body = BodyParamVars { beta: pred.beta, theta: pred.theta, alpha: pred.alpha, gamma };
    let mesh = model_forward_graph(g, template, &body);
    let keypoints2d = project_graph(g, mesh.keypoints3d, pred.camera, camera);
    let soft_mask = soft_silhouette_graph(g, mesh.vertices, pred.camera, &template.faces, camera, SOFT_SHARPNESS);

    let loss_2d = loss_2d_graph(g, keypoints2d, soft_mask, &targets.targets_2d, &weights.loss2d)?;
    let mut objective = g.scale(loss_2d, weights.lambda_2d);
    let loss_3d = match &targets.targets_3d {
        Some(t3) => {
            let predicted = PredictedBody { beta: pred.beta, theta: pred.theta, alpha: pred.alpha, keypoints3d: mesh.keypoints3d };
            let l = loss_3d_graph(g, &predicted, t3, &weights.loss3d, targets.taxon)?;
            let s = g.scale(l, weights.lambda_3d);
            objective = g.add(objective, s);
            Some(l)
        }
        None => None,
    };
    let (smal_prior, aves_prior) = if targets.taxon.has_bone_scale() {
        let l = aves_prior_graph(g, pred.beta, pred.theta, pred.alpha, prior, &weights.aves_prior)?;
        let s = g.scale(l, weights.lambda_aves_prior);
        objective = g.add(objective, s);
        (None, Some(l))
    } else {
        let l = smal_prior_graph(g, pred.beta, pred.theta, prior, &weights.smal_prior)?;
        let s = g.scale(l, weights.lambda_smal_prior);
        objective = g.add(objective, s);
        (Some(l), None)
    };
    Ok(SampleLossVars { objective, loss_3d, loss_2d, smal_prior, aves_prior, mesh, keypoints2d, soft_mask })
}

/// Models and statistics shared by every sample of a batch.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    /// Indexed by [`Taxon::index`].
    pub templates: &'a [ModelTemplate],
    /// Indexed by [`Taxon::index`].
    pub priors: &'a [PriorDistribution],
    pub camera: &'a CameraSpec,
    pub weights: &'a LossWeights,
}

impl LossContext<'_> {
    pub fn template(&self, taxon: Taxon) -> Result<&ModelTemplate> {
        self.templates.get(taxon.index()).ok_or(crate::Error::UnknownTaxon(taxon.index()))
    }

    pub fn prior(&self, taxon: Taxon) -> Result<&PriorDistribution> {
        self.priors.get(taxon.index()).ok_or(crate::Error::UnknownTaxon(taxon.index()))
    }
}

/// A whole batch recorded in one graph.
#[derive(Clone, Debug)]
pub struct BatchLossVars {
    pub total: Var,
    pub loss_con: Var,
    pub samples: Vec<SampleLossVars>,
    pub predictions: Vec<PredictionVars>,
}

/// Eq. 3 over a batch in a single graph: network forward per sample
/// (sharing parameter leaves by name), gated per-sample objectives
/// averaged, plus `λ_con · L_con` over the stacked features.
pub fn batch_loss_graph(
    g: &mut Graph,
    state: &NetworkState,
    config: &NetworkConfig,
    batch: &[(Tensor, SampleTargets)],
    ctx: &LossContext,
) -> Result<BatchLossVars> {
    if batch.len() < 2 {
        return Err(invalid!("a training batch needs at least 2 samples, got {}", batch.len()));
    }
    let mut samples = Vec::with_capacity(batch.len());
    let mut predictions = Vec::with_capacity(batch.len());
    for (i, (patches, targets)) in batch.iter().enumerate() {
        let x = g.input(format!("batch.{i}.patches"), patches.clone());
        let pred = network_forward_graph(g, state, config, x, targets.taxon)?;
        let s = sample_loss_graph(g, &pred, ctx.template(targets.taxon)?, targets, ctx.camera, ctx.prior(targets.taxon)?, ctx.weights)?;
        samples.push(s);
        predictions.push(pred);
    }
    let objectives: Vec<Var> = samples.iter().map(|s| s.objective).collect();
    let stacked = g.concat_rows(&objectives);
    let mean = g.mean(stacked);
    let zs: Vec<Var> = predictions.iter().map(|p| p.z).collect();
    let z = g.concat_rows(&zs);
    let labels: Vec<usize> = batch.iter().map(|(_, t)| t.family).collect();
    let loss_con = loss_con_graph(g, z, &labels, ctx.weights.tau)?;
    let con = g.scale(loss_con, ctx.weights.lambda_con);
    let total = g.add(mean, con);
    Ok(BatchLossVars { total, loss_con, samples, predictions })
}
