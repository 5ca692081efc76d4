//! Quadruped and avian parametric body models.
//!
//! A [`ModelTemplate`] holds rest geometry, shape blendshapes, skinning
//! weights, the joint regressor and the kinematic tree of one taxon.
//! [`model_forward`] maps [`BodyParams`] to a posed mesh; every stage also
//! exists as a graph builder so losses can differentiate through it.

mod forward;
mod rotation;
mod template;

pub use forward::{
    kinematic_forward, kinematic_forward_graph, lbs_pose, lbs_pose_graph, model_forward, model_forward_graph, regress_joints, rest_shape,
    rest_shape_graph, BodyParamVars, BodyParams, JointTransform, MeshOutput, MeshVars,
};
pub use rotation::{rodrigues, rodrigues_rows, RodriguesOp};
pub use template::{build_toy_template, toy_template, KeypointSource, ModelTemplate, Taxon};
