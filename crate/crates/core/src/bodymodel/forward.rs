use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::rotation::rodrigues_rows;
use super::template::{KeypointSource, ModelTemplate, Taxon};
use crate::error::{invalid, Result};
use crate::numkernel::{CustomOp, Graph, Tensor, Var};

/// Full parametric state of one animal instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub beta: Vec<f64>,
    /// Per-joint axis-angle, radians.
    pub theta: Vec<[f64; 3]>,
    /// Bone-length coefficients, avian only.
    pub alpha: Option<Vec<f64>>,
    /// Root translation, meters.
    pub gamma: [f64; 3],
}

impl BodyParams {
    /// The rest configuration of a template.
    pub fn zeros(template: &ModelTemplate) -> Self {
        Self {
            beta: vec![0.0; template.n_betas()],
            theta: vec![[0.0; 3]; template.n_joints()],
            alpha: template.taxon.has_bone_scale().then(|| vec![0.0; template.n_bones()]),
            gamma: [0.0; 3],
        }
    }

    pub fn validate(&self, template: &ModelTemplate) -> Result<()> {
        if self.beta.len() != template.n_betas() {
            return Err(invalid!("beta has {} entries, template expects {}", self.beta.len(), template.n_betas()));
        }
        if self.theta.len() != template.n_joints() {
            return Err(invalid!("theta has {} rows, template expects {}", self.theta.len(), template.n_joints()));
        }
        match (&self.alpha, template.taxon.has_bone_scale()) {
            (Some(a), true) if a.len() == template.n_bones() => {}
            (Some(a), true) => return Err(invalid!("alpha has {} entries, template expects {}", a.len(), template.n_bones())),
            (None, true) => return Err(invalid!("avian parameters need alpha")),
            (Some(_), false) => return Err(invalid!("alpha is only defined for avian templates")),
            (None, false) => {}
        }
        Ok(())
    }

    pub fn theta_tensor(&self) -> Tensor {
        Tensor::matrix(self.theta.len(), 3, self.theta.iter().flatten().copied().collect())
    }

    /// Records the parameters as named graph leaves (`prefix.beta`, ...).
    pub fn bind(&self, g: &mut Graph, prefix: &str, trainable: bool) -> BodyParamVars {
        let mut leaf = |name: &str, t: Tensor| {
            let name = format!("{prefix}.{name}");
            if trainable {
                g.param(name, t)
            } else {
                g.input(name, t)
            }
        };
        BodyParamVars {
            beta: leaf("beta", Tensor::row(self.beta.clone())),
            theta: leaf("theta", self.theta_tensor()),
            alpha: self.alpha.as_ref().map(|a| leaf("alpha", Tensor::row(a.clone()))),
            gamma: leaf("gamma", Tensor::row(self.gamma.to_vec())),
        }
    }
}

/// Graph nodes holding body parameters: `beta` 1 x n_beta, `theta` n_J x 3,
/// `alpha` 1 x n_bone, `gamma` 1 x 3.
#[derive(Clone, Copy, Debug)]
pub struct BodyParamVars {
    pub beta: Var,
    pub theta: Var,
    pub alpha: Option<Var>,
    pub gamma: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshOutput {
    pub vertices: Tensor,
    pub joints: Tensor,
    pub keypoints3d: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct MeshVars {
    pub vertices: Var,
    pub joints: Var,
    pub keypoints3d: Var,
}

/// World transform of one joint as graph nodes: rotation `3 x 3`,
/// origin `3 x 1`.
#[derive(Clone, Copy, Debug)]
pub struct JointTransform {
    pub rotation: Var,
    pub origin: Var,
}

/// Applies per-row affine maps: `out_i = M_i[:, :3] v_i + M_i[:, 3]` with
/// `M_i` the `i`-th row of an `n x 12` input read as row-major `3 x 4`.
#[derive(Debug)]
struct AffineRowsOp;

impl CustomOp for AffineRowsOp {
    fn name(&self) -> &'static str {
        "affine_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> std::result::Result<Tensor, String> {
        let (m, v) = (inputs[0], inputs[1]);
        if m.cols() != 12 || v.cols() != 3 || m.rows() != v.rows() {
            return Err(format!("affine rows {:?} with points {:?}", m.shape(), v.shape()));
        }
        let mut out = Vec::with_capacity(v.len());
        for (mr, p) in m.data().chunks_exact(12).zip(v.data().chunks_exact(3)) {
            for r in 0..3 {
                out.push(mr[4 * r] * p[0] + mr[4 * r + 1] * p[1] + mr[4 * r + 2] * p[2] + mr[4 * r + 3]);
            }
        }
        Ok(Tensor::matrix(v.rows(), 3, out))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (m, v) = (inputs[0], inputs[1]);
        let mut gm = vec![0.0; m.len()];
        let mut gv = vec![0.0; v.len()];
        for i in 0..v.rows() {
            let mr = &m.data()[12 * i..12 * i + 12];
            let p = &v.data()[3 * i..3 * i + 3];
            let gr = &grad.data()[3 * i..3 * i + 3];
            for r in 0..3 {
                for c in 0..3 {
                    gm[12 * i + 4 * r + c] = gr[r] * p[c];
                    gv[3 * i + c] += gr[r] * mr[4 * r + c];
                }
                gm[12 * i + 4 * r + 3] = gr[r];
            }
        }
        vec![Tensor::matrix(m.rows(), 12, gm), Tensor::matrix(v.rows(), 3, gv)]
    }
}

/// Gathers keypoint rows from joints and vertices in keypoint-map order.
#[derive(Debug)]
struct KeypointGatherOp {
    map: Vec<KeypointSource>,
}

impl CustomOp for KeypointGatherOp {
    fn name(&self) -> &'static str {
        "keypoint_gather"
    }

    fn forward(&self, inputs: &[&Tensor]) -> std::result::Result<Tensor, String> {
        let (j, v) = (inputs[0], inputs[1]);
        let mut out = Vec::with_capacity(3 * self.map.len());
        for k in &self.map {
            let (src, i) = match *k {
                KeypointSource::Joint(i) => (j, i),
                KeypointSource::Vertex(i) => (v, i),
            };
            if i >= src.rows() {
                return Err(format!("keypoint source row {i} out of range"));
            }
            out.extend_from_slice(&src.data()[3 * i..3 * i + 3]);
        }
        Ok(Tensor::matrix(self.map.len(), 3, out))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let mut gj = Tensor::zeros(inputs[0].shape());
        let mut gv = Tensor::zeros(inputs[1].shape());
        for (k, src) in self.map.iter().enumerate() {
            let (t, i) = match *src {
                KeypointSource::Joint(i) => (&mut gj, i),
                KeypointSource::Vertex(i) => (&mut gv, i),
            };
            for a in 0..3 {
                t.data_mut()[3 * i + a] += grad.data()[3 * k + a];
            }
        }
        vec![gj, gv]
    }
}

fn incidence_and_ancestry(parents: &[Option<usize>]) -> (Tensor, Tensor) {
    let n = parents.len();
    let mut inc = Tensor::zeros(&[n, n]);
    let mut anc = Tensor::zeros(&[n, n]);
    for j in 0..n {
        inc.set(j, j, 1.0);
        if let Some(p) = parents[j] {
            inc.set(j, p, -1.0);
        }
        let mut k = Some(j);
        while let Some(i) = k {
            anc.set(j, i, 1.0);
            k = parents[i];
        }
    }
    (inc, anc)
}

/// Shaped rest geometry: blendshapes on the template, then (avian) every
/// bone vector scaled by `1 + alpha_b` with descendant subtrees carried
/// along. Vertices follow the joint displacements through the skin weights.
pub fn rest_shape_graph(g: &mut Graph, template: &ModelTemplate, beta: Var, alpha: Option<Var>) -> (Var, Var) {
    let nv = template.n_vertices();
    let basis = g.constant(template.shape_basis.clone());
    let offsets = g.matmul(beta, basis);
    let offsets = g.reshape(offsets, &[nv, 3]);
    let rest = g.constant(template.rest_vertices.clone());
    let verts = g.add(rest, offsets);
    let regressor = g.constant(template.joint_regressor.clone());
    let joints = g.matmul(regressor, verts);

    match alpha {
        Some(alpha) => {
            let (inc, anc) = incidence_and_ancestry(&template.parents);
            let inc = g.constant(inc);
            let anc = g.constant(anc);
            let bones = g.matmul(inc, joints);
            let scale = g.add_scalar(alpha, 1.0);
            let scale = g.transpose(scale);
            let root = g.constant(Tensor::scalar(1.0));
            let scale = g.concat_rows(&[root, scale]);
            let scaled = g.mul(bones, scale);
            let scaled_joints = g.matmul(anc, scaled);
            let delta = g.sub(scaled_joints, joints);
            let skin = g.constant(template.skin_weights.clone());
            let vdelta = g.matmul(skin, delta);
            let verts = g.add(verts, vdelta);
            (verts, scaled_joints)
        }
        None => (verts, joints),
    }
}

/// Per-joint world transforms. The root is placed at `gamma + J_0` and
/// rotated by `theta_0`; each child composes its parent's transform with
/// its rest offset and its own rotation.
pub fn kinematic_forward_graph(g: &mut Graph, theta: Var, rest_joints: Var, parents: &[Option<usize>], gamma: Var) -> Vec<JointTransform> {
    let rots = rodrigues_rows(g, theta);
    let mut out: Vec<JointTransform> = Vec::with_capacity(parents.len());
    for (j, parent) in parents.iter().enumerate() {
        let r = g.slice_rows(rots, j, j + 1);
        let local = g.reshape(r, &[3, 3]);
        let jrow = g.slice_rows(rest_joints, j, j + 1);
        let t = match parent {
            None => {
                let root = g.add(jrow, gamma);
                let origin = g.transpose(root);
                JointTransform { rotation: local, origin }
            }
            Some(p) => {
                let parent = out[*p];
                let prow = g.slice_rows(rest_joints, *p, p + 1);
                let off = g.sub(jrow, prow);
                let off = g.transpose(off);
                let moved = g.matmul(parent.rotation, off);
                let origin = g.add(moved, parent.origin);
                let rotation = g.matmul(parent.rotation, local);
                JointTransform { rotation, origin }
            }
        };
        out.push(t);
    }
    out
}

/// Linear blend skinning of rest vertices by joint world transforms.
pub fn lbs_pose_graph(g: &mut Graph, rest_vertices: Var, transforms: &[JointTransform], rest_joints: Var, skin_weights: Var) -> Var {
    let mut rows = Vec::with_capacity(transforms.len());
    for (j, t) in transforms.iter().enumerate() {
        let jrow = g.slice_rows(rest_joints, j, j + 1);
        let jcol = g.transpose(jrow);
        let rj = g.matmul(t.rotation, jcol);
        let trans = g.sub(t.origin, rj);
        let a = g.concat_cols(&[t.rotation, trans]);
        rows.push(g.reshape(a, &[1, 12]));
    }
    let stacked = g.concat_rows(&rows);
    let blended = g.matmul(skin_weights, stacked);
    g.custom(Arc::new(AffineRowsOp), &[blended, rest_vertices])
}

/// Full model: shape, pose, skin, regress joints, extract keypoints.
pub fn model_forward_graph(g: &mut Graph, template: &ModelTemplate, params: &BodyParamVars) -> MeshVars {
    let (rest_v, rest_j) = rest_shape_graph(g, template, params.beta, params.alpha);
    let transforms = kinematic_forward_graph(g, params.theta, rest_j, &template.parents, params.gamma);
    let skin = g.constant(template.skin_weights.clone());
    let vertices = lbs_pose_graph(g, rest_v, &transforms, rest_j, skin);
    let regressor = g.constant(template.joint_regressor.clone());
    let joints = g.matmul(regressor, vertices);
    let keypoints3d = g.custom(Arc::new(KeypointGatherOp { map: template.keypoint_map.clone() }), &[joints, vertices]);
    MeshVars { vertices, joints, keypoints3d }
}

pub fn rest_shape(template: &ModelTemplate, beta: &[f64], alpha: Option<&[f64]>) -> Result<(Tensor, Tensor)> {
    if beta.len() != template.n_betas() {
        return Err(invalid!("beta has {} entries, template expects {}", beta.len(), template.n_betas()));
    }
    match (alpha, template.taxon) {
        (Some(a), Taxon::Avian) if a.len() == template.n_bones() => {}
        (None, Taxon::Quadruped) => {}
        (Some(a), Taxon::Avian) => return Err(invalid!("alpha has {} entries, template expects {}", a.len(), template.n_bones())),
        (None, Taxon::Avian) => return Err(invalid!("avian rest shape needs alpha")),
        (Some(_), Taxon::Quadruped) => return Err(invalid!("alpha is only defined for avian templates")),
    }
    let mut g = Graph::new();
    let b = g.input("beta", Tensor::row(beta.to_vec()));
    let a = alpha.map(|a| g.input("alpha", Tensor::row(a.to_vec())));
    let (v, j) = rest_shape_graph(&mut g, template, b, a);
    Ok((g.value(v).clone(), g.value(j).clone()))
}

/// World transforms as homogeneous `4 x 4` matrices.
pub fn kinematic_forward(theta: &[[f64; 3]], rest_joints: &Tensor, parents: &[Option<usize>], gamma: [f64; 3]) -> Result<Vec<[[f64; 4]; 4]>> {
    if theta.len() != parents.len() || rest_joints.rows() != parents.len() || rest_joints.cols() != 3 {
        return Err(invalid!("theta, rest joints and parents disagree on the joint count"));
    }
    let mut g = Graph::new();
    let th = g.input("theta", Tensor::matrix(theta.len(), 3, theta.iter().flatten().copied().collect()));
    let rj = g.input("rest_joints", rest_joints.clone());
    let gm = g.input("gamma", Tensor::row(gamma.to_vec()));
    let ts = kinematic_forward_graph(&mut g, th, rj, parents, gm);
    Ok(ts
        .iter()
        .map(|t| {
            let r = g.value(t.rotation);
            let o = g.value(t.origin);
            let mut m = [[0.0; 4]; 4];
            for i in 0..3 {
                for k in 0..3 {
                    m[i][k] = r.at(i, k);
                }
                m[i][3] = o.data()[i];
            }
            m[3][3] = 1.0;
            m
        })
        .collect())
}

/// Skins `rest_vertices` by homogeneous joint transforms.
pub fn lbs_pose(rest_vertices: &Tensor, transforms: &[[[f64; 4]; 4]], rest_joints: &Tensor, skin_weights: &Tensor) -> Result<Tensor> {
    let nj = transforms.len();
    if skin_weights.shape() != [rest_vertices.rows(), nj] || rest_joints.rows() != nj {
        return Err(invalid!("skin weights {:?} do not match {} vertices and {nj} joints", skin_weights.shape(), rest_vertices.rows()));
    }
    let mut rows = Vec::with_capacity(nj * 12);
    for (t, j) in transforms.iter().zip(rest_joints.data().chunks_exact(3)) {
        for r in 0..3 {
            let rj: f64 = (0..3).map(|c| t[r][c] * j[c]).sum();
            rows.extend_from_slice(&[t[r][0], t[r][1], t[r][2], t[r][3] - rj]);
        }
    }
    let blended = skin_weights.matmul(&Tensor::matrix(nj, 12, rows));
    AffineRowsOp.forward(&[&blended, rest_vertices]).map_err(crate::Error::Shape)
}

pub fn regress_joints(regressor: &Tensor, vertices: &Tensor) -> Result<Tensor> {
    if regressor.cols() != vertices.rows() || vertices.cols() != 3 {
        return Err(invalid!("regressor {:?} cannot act on vertices {:?}", regressor.shape(), vertices.shape()));
    }
    Ok(regressor.matmul(vertices))
}

pub fn model_forward(template: &ModelTemplate, params: &BodyParams) -> Result<MeshOutput> {
    params.validate(template)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, "params", false);
    let mesh = model_forward_graph(&mut g, template, &vars);
    Ok(MeshOutput {
        vertices: g.value(mesh.vertices).clone(),
        joints: g.value(mesh.joints).clone(),
        keypoints3d: g.value(mesh.keypoints3d).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::build_toy_template;
    use crate::numkernel::{grad_check, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn random_params(t: &ModelTemplate, rng: &mut ChaCha8Rng) -> BodyParams {
        BodyParams {
            beta: (0..t.n_betas()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            theta: (0..t.n_joints()).map(|_| [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)]).collect(),
            alpha: t.taxon.has_bone_scale().then(|| (0..t.n_bones()).map(|_| rng.random_range(-0.3..0.3)).collect()),
            gamma: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        }
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_pose_is_identity_and_bones_stay_rigid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..6 {
            for taxon in Taxon::ALL {
                let t = build_toy_template(taxon, 6, 4, 200, seed).unwrap();
                let mut p = random_params(&t, &mut rng);
                let (rest_v, rest_j) = rest_shape(&t, &p.beta, p.alpha.as_deref()).unwrap();
                let theta = p.theta.clone();
                p.theta = vec![[0.0; 3]; t.n_joints()];
                p.gamma = [0.0; 3];
                let out = model_forward(&t, &p).unwrap();
                assert!(out.vertices.zip_map(&rest_v, |a, b| a - b).max_abs() < 1e-12);
                assert!(out.joints.zip_map(&rest_j, |a, b| a - b).max_abs() < 1e-12);
                p.theta = theta;
                let posed = model_forward(&t, &p).unwrap();
                for (j, parent) in t.parents.iter().enumerate() {
                    if let Some(q) = parent {
                        let r = dist(&rest_j.data()[3 * j..3 * j + 3], &rest_j.data()[3 * q..3 * q + 3]);
                        let s = dist(&posed.joints.data()[3 * j..3 * j + 3], &posed.joints.data()[3 * q..3 * q + 3]);
                        assert!((r - s).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn single_bone_alpha_scales_only_that_bone() {
        let t = build_toy_template(Taxon::Avian, 6, 4, 200, 1).unwrap();
        let beta = vec![0.2, -0.1, 0.3, 0.0];
        let zero = vec![0.0; t.n_bones()];
        let (_, j0) = rest_shape(&t, &beta, Some(&zero)).unwrap();
        for b in 0..t.n_bones() {
            let mut a = zero.clone();
            a[b] = 0.37;
            let (_, j1) = rest_shape(&t, &beta, Some(&a)).unwrap();
            for c in 1..t.n_joints() {
                let p = t.parents[c].unwrap();
                let l0 = dist(&j0.data()[3 * c..3 * c + 3], &j0.data()[3 * p..3 * p + 3]);
                let l1 = dist(&j1.data()[3 * c..3 * c + 3], &j1.data()[3 * p..3 * p + 3]);
                let want = if c - 1 == b { 1.37 } else { 1.0 };
                assert!((l1 / l0 - want).abs() < 1e-9, "bone {b}, child {c}");
            }
        }
    }

    #[test]
    fn value_path_matches_graph_path() {
        let t = build_toy_template(Taxon::Quadruped, 6, 4, 200, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&t, &mut rng);
        let out = model_forward(&t, &p).unwrap();
        let (rv, rj) = rest_shape(&t, &p.beta, None).unwrap();
        let tr = kinematic_forward(&p.theta, &rj, &t.parents, p.gamma).unwrap();
        let v = lbs_pose(&rv, &tr, &rj, &t.skin_weights).unwrap();
        assert!(v.zip_map(&out.vertices, |a, b| a - b).max_abs() < 1e-12);
        let j = regress_joints(&t.joint_regressor, &v).unwrap();
        assert!(j.zip_map(&out.joints, |a, b| a - b).max_abs() < 1e-12);
        assert_eq!(out.keypoints3d.rows(), t.n_keypoints());
    }

    #[test]
    fn wrong_parameter_sizes_are_rejected() {
        let t = build_toy_template(Taxon::Avian, 6, 4, 200, 2).unwrap();
        let mut p = BodyParams::zeros(&t);
        p.alpha = None;
        assert!(model_forward(&t, &p).is_err());
        let mut p = BodyParams::zeros(&t);
        p.beta.push(0.0);
        assert!(model_forward(&t, &p).is_err());
    }

    #[test]
    fn model_forward_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for taxon in Taxon::ALL {
            let t = build_toy_template(taxon, 6, 4, 120, 4).unwrap();
            let p = random_params(&t, &mut rng);
            let mut g = Graph::new();
            let vars = p.bind(&mut g, "p", true);
            let mesh = model_forward_graph(&mut g, &t, &vars);
            let wv = g.constant(Tensor::new(g.value(mesh.vertices).shape().to_vec(), (0..t.n_vertices() * 3).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect()).unwrap());
            let wk = g.constant(Tensor::full(g.value(mesh.keypoints3d).shape(), 0.3));
            let a = g.mul(mesh.vertices, wv);
            let a = g.sum(a);
            let b = g.mul(mesh.keypoints3d, wk);
            let b = g.sum(b);
            let y = g.add(a, b);
            let rep = grad_check(&g, y, &BTreeMap::new(), &GradCheckConfig::default()).unwrap();
            assert!(rep.max_rel_error() < 1e-6, "{taxon}: {rep:?}");
        }
    }
}
