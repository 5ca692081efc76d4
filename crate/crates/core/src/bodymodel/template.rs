use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numkernel::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Taxon {
    Quadruped,
    Avian,
}

impl Taxon {
    pub const ALL: [Taxon; 2] = [Taxon::Quadruped, Taxon::Avian];

    pub fn index(self) -> usize {
        match self {
            Taxon::Quadruped => 0,
            Taxon::Avian => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Taxon::Quadruped => "quadruped",
            Taxon::Avian => "avian",
        }
    }

    /// Only the avian model carries per-bone length coefficients.
    pub fn has_bone_scale(self) -> bool {
        matches!(self, Taxon::Avian)
    }
}

impl std::fmt::Display for Taxon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Taxon {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadruped" => Ok(Taxon::Quadruped),
            "avian" => Ok(Taxon::Avian),
            _ => Err(invalid!("unknown taxon {s:?}")),
        }
    }
}

/// Where an evaluation keypoint is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeypointSource {
    Joint(usize),
    Vertex(usize),
}

/// Geometric prior of one taxon.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTemplate {
    pub taxon: Taxon,
    /// `n_V x 3`, meters.
    pub rest_vertices: Tensor,
    pub faces: Vec<[usize; 3]>,
    /// `n_beta x (3 n_V)`; row `i` is blendshape `i` flattened row-major.
    pub shape_basis: Tensor,
    /// `n_V x n_J`.
    pub skin_weights: Tensor,
    /// `n_J x n_V`.
    pub joint_regressor: Tensor,
    /// `parents[0]` is `None`; every other parent index precedes its child.
    pub parents: Vec<Option<usize>>,
    pub keypoint_map: Vec<KeypointSource>,
    /// Keypoint indices of the head and tail markers used by PCK@HTH.
    pub head_tail: (usize, usize),
}

impl ModelTemplate {
    pub fn n_vertices(&self) -> usize {
        self.rest_vertices.rows()
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn n_betas(&self) -> usize {
        self.shape_basis.rows()
    }

    /// Bone-length coefficients: one per non-root joint for avian models.
    pub fn n_bones(&self) -> usize {
        if self.taxon.has_bone_scale() {
            self.n_joints() - 1
        } else {
            0
        }
    }

    pub fn n_keypoints(&self) -> usize {
        self.keypoint_map.len()
    }

    /// Rest joints as regressed from the rest vertices.
    pub fn rest_joints(&self) -> Tensor {
        self.joint_regressor.matmul(&self.rest_vertices)
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.rest_vertices.rows();
        let nj = self.parents.len();
        if self.rest_vertices.ndim() != 2 || self.rest_vertices.cols() != 3 {
            return Err(invalid!("rest_vertices must be n_V x 3"));
        }
        if nj < 2 {
            return Err(invalid!("need at least two joints"));
        }
        if self.parents[0].is_some() {
            return Err(invalid!("joint 0 must be the root"));
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                Some(p) => return Err(invalid!("joint {j} has parent {p}: parents must precede children (cycle or unordered tree)")),
                None => return Err(invalid!("joint {j} has no parent; only joint 0 may be a root")),
            }
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= nv)) {
            return Err(invalid!("face {f:?} references a vertex beyond {nv}"));
        }
        if self.shape_basis.ndim() != 2 || self.shape_basis.cols() != 3 * nv {
            return Err(invalid!("shape_basis must be n_beta x {}", 3 * nv));
        }
        if self.skin_weights.shape() != [nv, nj] {
            return Err(invalid!("skin_weights must be {nv} x {nj}, got {:?}", self.skin_weights.shape()));
        }
        for (v, row) in self.skin_weights.data().chunks_exact(nj).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(invalid!("skin weights of vertex {v} must be nonnegative and sum to 1 (sum {s})"));
            }
        }
        if self.joint_regressor.shape() != [nj, nv] {
            return Err(invalid!("joint_regressor must be {nj} x {nv}"));
        }
        for k in &self.keypoint_map {
            match *k {
                KeypointSource::Joint(j) if j >= nj => return Err(invalid!("keypoint joint {j} out of range")),
                KeypointSource::Vertex(v) if v >= nv => return Err(invalid!("keypoint vertex {v} out of range")),
                _ => {}
            }
        }
        let nk = self.keypoint_map.len();
        if self.head_tail.0 >= nk || self.head_tail.1 >= nk {
            return Err(invalid!("head/tail keypoints out of range"));
        }
        Ok(())
    }
}

struct Slot {
    parent: usize,
    offset: [f64; 3],
    radius: f64,
}

/// Fixed leading skeleton slots; later joints extend earlier chains.
fn skeleton_slots(taxon: Taxon) -> (Vec<Slot>, usize, usize, usize) {
    let s = |parent, offset, radius| Slot { parent, offset, radius };
    match taxon {
        // pelvis, chest, head, tail, legs
        Taxon::Quadruped => (
            vec![
                s(0, [0.0, 0.0, 0.0], 0.0),
                s(0, [0.55, 0.05, 0.0], 0.15),
                s(1, [0.25, 0.22, 0.0], 0.09),
                s(0, [-0.4, 0.08, 0.0], 0.05),
                s(1, [0.02, -0.42, 0.1], 0.06),
                s(0, [-0.02, -0.42, 0.1], 0.065),
                s(1, [0.02, -0.42, -0.1], 0.06),
                s(0, [-0.02, -0.42, -0.1], 0.065),
            ],
            6,
            2,
            3,
        ),
        // rump, chest, head, tail, wings, legs
        Taxon::Avian => (
            vec![
                s(0, [0.0, 0.0, 0.0], 0.0),
                s(0, [0.4, 0.12, 0.0], 0.15),
                s(1, [0.15, 0.28, 0.0], 0.08),
                s(0, [-0.35, 0.0, 0.0], 0.06),
                s(1, [-0.12, 0.05, 0.45], 0.05),
                s(1, [-0.12, 0.05, -0.45], 0.05),
                s(0, [0.1, -0.32, 0.0], 0.05),
            ],
            5,
            2,
            3,
        ),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalized(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Triangulates the band between two closed vertex loops by merging them
/// in order of angular position.
fn zipper(a: &[usize], b: &[usize], faces: &mut Vec<[usize; 3]>) {
    let (na, nb) = (a.len(), b.len());
    let (mut ia, mut ib) = (0, 0);
    while ia < na || ib < nb {
        let next_a = (ia + 1) as f64 / na as f64;
        let next_b = (ib + 1) as f64 / nb as f64;
        if ib >= nb || (ia < na && next_a <= next_b) {
            faces.push([a[ia % na], a[(ia + 1) % na], b[ib % nb]]);
            ia += 1;
        } else {
            faces.push([a[ia % na], b[(ib + 1) % nb], b[ib % nb]]);
            ib += 1;
        }
    }
}

/// Builds a deterministic stand-in template: a branched skeleton with a
/// closed tube around every bone.
///
/// Vertex `j < n_J` sits exactly on joint `j` and is the only vertex its
/// regressor row reads, so `W * rest_vertices` reproduces the rest joints.
/// Tube vertices on the bone from `p` to `c` at fraction `t` are skinned
/// `(1 - t)` to `p` and `t` to `c`.
pub fn build_toy_template(taxon: Taxon, n_joints: usize, n_betas: usize, n_vertices: usize, seed: u64) -> Result<ModelTemplate> {
    if n_joints < 2 {
        return Err(invalid!("toy template needs at least 2 joints, got {n_joints}"));
    }
    if n_vertices < 4 * n_joints {
        return Err(invalid!("toy template needs n_V >= 4 n_J ({} < {})", n_vertices, 4 * n_joints));
    }
    if n_betas == 0 {
        return Err(invalid!("toy template needs at least one shape coefficient"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((taxon.index() as u64 + 1) << 56));
    let (slots, chain_step, head_joint, tail_joint) = skeleton_slots(taxon);

    // Skeleton.
    let mut parents = vec![None];
    let mut offsets = vec![[0.0; 3]];
    let mut radii = vec![0.0];
    for j in 1..n_joints {
        let (parent, base, radius) = if j < slots.len() {
            (slots[j].parent, slots[j].offset, slots[j].radius)
        } else {
            let p = j - chain_step;
            (p, offsets[p].map(|x| 0.7 * x), 0.7 * radii[p])
        };
        let off = base.map(|x| x * (1.0 + 0.08 * normal(&mut rng)));
        parents.push(Some(parent));
        offsets.push(off);
        radii.push(radius.max(0.02) * (1.0 + 0.05 * normal(&mut rng)));
    }
    let mut joints = vec![[0.0; 3]; n_joints];
    for j in 1..n_joints {
        let p = parents[j].unwrap();
        joints[j] = [joints[p][0] + offsets[j][0], joints[p][1] + offsets[j][1], joints[p][2] + offsets[j][2]];
    }

    // Tube mesh.
    let n_bones = n_joints - 1;
    let budget = n_vertices - n_joints;
    let mut verts: Vec<[f64; 3]> = joints.clone();
    let mut skin: Vec<Vec<(usize, f64)>> = (0..n_joints).map(|j| vec![(j, 1.0)]).collect();
    // (bone, t, radial unit offset scaled by radius) for shape-basis construction
    let mut ring_info: Vec<(usize, f64, [f64; 3])> = Vec::new();
    let mut faces = Vec::new();
    let mut bone_rings: Vec<Vec<Vec<usize>>> = Vec::with_capacity(n_bones);
    for bone in 0..n_bones {
        let c = bone + 1;
        let p = parents[c].unwrap();
        let b = budget / n_bones + usize::from(bone < budget % n_bones);
        let n_rings = ((b + 4) / 8).clamp(1, b / 3);
        let dir = normalized(sub(joints[c], joints[p]));
        let helper = if dir[1].abs() < 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
        let u = normalized(cross(dir, helper));
        let w = cross(dir, u);
        let mut rings = Vec::with_capacity(n_rings);
        for r in 0..n_rings {
            let size = b / n_rings + usize::from(r < b % n_rings);
            let t = (r + 1) as f64 / (n_rings + 1) as f64;
            let radius = radii[c] * (PI * t).sin().sqrt();
            let centre = [
                joints[p][0] + t * (joints[c][0] - joints[p][0]),
                joints[p][1] + t * (joints[c][1] - joints[p][1]),
                joints[p][2] + t * (joints[c][2] - joints[p][2]),
            ];
            let mut ring = Vec::with_capacity(size);
            for k in 0..size {
                let phi = 2.0 * PI * k as f64 / size as f64;
                let (s, co) = phi.sin_cos();
                let radial = [radius * (co * u[0] + s * w[0]), radius * (co * u[1] + s * w[1]), radius * (co * u[2] + s * w[2])];
                ring.push(verts.len());
                verts.push([centre[0] + radial[0], centre[1] + radial[1], centre[2] + radial[2]]);
                skin.push(vec![(p, 1.0 - t), (c, t)]);
                ring_info.push((bone, t, radial));
            }
            rings.push(ring);
        }
        let first = &rings[0];
        for k in 0..first.len() {
            faces.push([p, first[(k + 1) % first.len()], first[k]]);
        }
        for r in 0..n_rings - 1 {
            zipper(&rings[r], &rings[r + 1], &mut faces);
        }
        let last = &rings[n_rings - 1];
        for k in 0..last.len() {
            faces.push([c, last[k], last[(k + 1) % last.len()]]);
        }
        bone_rings.push(rings);
    }
    debug_assert_eq!(verts.len(), n_vertices);

    // Shape basis: smooth per-joint displacements interpolated along bones
    // plus per-bone radial thickness changes.
    let mut basis = vec![0.0; n_betas * 3 * n_vertices];
    for i in 0..n_betas {
        let disp: Vec<[f64; 3]> = (0..n_joints).map(|_| [0.04 * normal(&mut rng), 0.04 * normal(&mut rng), 0.02 * normal(&mut rng)]).collect();
        let thick: Vec<f64> = (0..n_bones).map(|_| 0.2 * normal(&mut rng)).collect();
        let row = &mut basis[i * 3 * n_vertices..(i + 1) * 3 * n_vertices];
        for j in 0..n_joints {
            row[3 * j..3 * j + 3].copy_from_slice(&disp[j]);
        }
        for (k, &(bone, t, radial)) in ring_info.iter().enumerate() {
            let v = n_joints + k;
            let c = bone + 1;
            let p = parents[c].unwrap();
            for a in 0..3 {
                row[3 * v + a] = (1.0 - t) * disp[p][a] + t * disp[c][a] + thick[bone] * radial[a];
            }
        }
    }

    let mut skin_weights = Tensor::zeros(&[n_vertices, n_joints]);
    for (v, ws) in skin.iter().enumerate() {
        for &(j, w) in ws {
            let cur = skin_weights.at(v, j);
            skin_weights.set(v, j, cur + w);
        }
    }
    let mut joint_regressor = Tensor::zeros(&[n_joints, n_vertices]);
    for j in 0..n_joints {
        joint_regressor.set(j, j, 1.0);
    }

    // Keypoints: every joint, then a nose and a tail marker vertex.
    let head = head_joint.min(n_joints - 1);
    let tail = tail_joint.min(n_joints - 1);
    let nose_vertex = *bone_rings[head - 1].last().unwrap().first().unwrap();
    let tail_vertex = if tail != head {
        *bone_rings[tail - 1].last().unwrap().first().unwrap()
    } else {
        *bone_rings[head - 1][0].first().unwrap()
    };
    let mut keypoint_map: Vec<KeypointSource> = (0..n_joints).map(KeypointSource::Joint).collect();
    keypoint_map.push(KeypointSource::Vertex(nose_vertex));
    keypoint_map.push(KeypointSource::Vertex(tail_vertex));

    let rest = verts.iter().flat_map(|v| v.iter().copied()).collect();
    let template = ModelTemplate {
        taxon,
        rest_vertices: Tensor::matrix(n_vertices, 3, rest),
        faces,
        shape_basis: Tensor::matrix(n_betas, 3 * n_vertices, basis),
        skin_weights,
        joint_regressor,
        parents,
        keypoint_map,
        head_tail: (n_joints, n_joints + 1),
    };
    template.validate()?;
    Ok(template)
}

/// Toy preset used by the acceptance run and the CLI defaults.
pub fn toy_template(taxon: Taxon) -> ModelTemplate {
    build_toy_template(taxon, 6, 4, 200, 7).expect("toy preset is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let a = build_toy_template(Taxon::Quadruped, 6, 4, 200, 7).unwrap();
        let b = build_toy_template(Taxon::Quadruped, 6, 4, 200, 7).unwrap();
        assert_eq!(a, b);
        let c = build_toy_template(Taxon::Quadruped, 6, 4, 200, 8).unwrap();
        assert_ne!(a.rest_vertices, c.rest_vertices);
    }

    #[test]
    fn regressor_reproduces_rest_joints() {
        for (taxon, nj, nv) in [(Taxon::Quadruped, 6, 200), (Taxon::Avian, 9, 400), (Taxon::Quadruped, 2, 8), (Taxon::Avian, 6, 24)] {
            let t = build_toy_template(taxon, nj, 3, nv, 11).unwrap();
            let j = t.rest_joints();
            assert_eq!(t.n_vertices(), nv);
            for k in 0..nj {
                for a in 0..3 {
                    assert!((j.at(k, a) - t.rest_vertices.at(k, a)).abs() <= 1e-9);
                }
            }
            for row in t.skin_weights.data().chunks_exact(nj) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rejects_infeasible_sizes() {
        assert!(build_toy_template(Taxon::Quadruped, 1, 4, 200, 0).is_err());
        assert!(build_toy_template(Taxon::Quadruped, 6, 4, 23, 0).is_err());
        assert!(build_toy_template(Taxon::Quadruped, 6, 0, 200, 0).is_err());
    }

    #[test]
    fn paper_scale_counts_build() {
        let q = build_toy_template(Taxon::Quadruped, 35, 41, 3889, 1).unwrap();
        assert_eq!((q.n_vertices(), q.n_joints(), q.n_betas()), (3889, 35, 41));
        let a = build_toy_template(Taxon::Avian, 25, 15, 8210, 1).unwrap();
        assert_eq!(a.n_bones(), 24);
    }

    #[test]
    fn validation_rejects_cycles() {
        let mut t = toy_template(Taxon::Quadruped);
        t.parents[2] = Some(4);
        assert!(t.validate().is_err());
        let mut t = toy_template(Taxon::Quadruped);
        t.faces.push([0, 1, 10_000]);
        assert!(t.validate().is_err());
    }
}
