use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::config::{GenConfig, MaskPerturbation};
use crate::bodymodel::{model_forward, BodyParams, ModelTemplate, Taxon};
use crate::camera::{keypoint_visibility, mask_iou, project, rasterize, CameraSpec, Mask, VISIBILITY_TOLERANCE};
use crate::error::{invalid, Result};
use crate::numkernel::Tensor;

/// One synthetic, fully annotated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub taxon: Taxon,
    pub family: usize,
    /// `γ` is always zero; the placement lives in the camera translation.
    pub params: BodyParams,
    pub camera: CameraSpec,
    pub keypoints3d: Tensor,
    pub keypoints2d: Tensor,
    pub visible: Vec<bool>,
    pub mask: Mask,
    /// Camera-space depth per pixel, `+inf` off the silhouette.
    pub depth: Vec<f64>,
    /// `H x W x 2`: channel 0 mask, channel 1 depth normalized to [0, 1].
    pub image: Tensor,
    pub has_3d: bool,
    /// Empty silhouette: always dropped by the filter.
    pub degenerate: bool,
    /// Some vertex projects outside the image.
    pub truncated: bool,
}

/// β centers of the `families_per_taxon` families of `taxon`, a pure
/// function of the config's family seed.
pub fn family_centers(config: &GenConfig, taxon: Taxon, n_betas: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.family_seed);
    rng.set_stream(1 + taxon.index() as u64);
    (0..config.families_per_taxon)
        .map(|_| (0..n_betas).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); config.family_center_sigma * z }).collect::<Vec<f64>>())
        .collect()
}

/// Maps an axis-angle vector to the equivalent one with norm `<= π`.
pub fn fold_axis_angle(w: [f64; 3]) -> [f64; 3] {
    let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if n <= PI {
        return w;
    }
    // Rotation by n about u equals rotation by n - 2πk about u; pick the
    // representative in [-π, π].
    let folded = n - 2.0 * PI * ((n + PI) / (2.0 * PI)).floor();
    let s = folded / n;
    [w[0] * s, w[1] * s, w[2] * s]
}

/// Draws body parameters, camera placement and family label.
pub fn sample_body_params(rng: &mut ChaCha8Rng, taxon: Taxon, template: &ModelTemplate, config: &GenConfig) -> Result<(BodyParams, CameraSpec, usize)> {
    if template.taxon != taxon {
        return Err(invalid!("template of taxon {} used to sample {}", template.taxon, taxon));
    }
    let centers = family_centers(config, taxon, template.n_betas());
    let k = rng.random_range(0..centers.len());
    let beta_noise = Normal::new(0.0, config.beta_sigma).map_err(|e| invalid!("beta_sigma: {e}"))?;
    let beta: Vec<f64> = centers[k].iter().map(|c| c + beta_noise.sample(rng)).collect();
    let joint_noise = Normal::new(0.0, config.theta_sigma).map_err(|e| invalid!("theta_sigma: {e}"))?;
    let mut theta = Vec::with_capacity(template.n_joints());
    let r = config.rotation_range;
    let root = [rng.random_range(-r..=r), rng.random_range(-r..=r), rng.random_range(-r..=r)];
    theta.push(fold_axis_angle(root));
    for _ in 1..template.n_joints() {
        // Truncation by rejection: redraw rows with norm >= π.
        let row = loop {
            let v = [joint_noise.sample(rng), joint_noise.sample(rng), joint_noise.sample(rng)];
            if (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() < PI {
                break v;
            }
        };
        theta.push(row);
    }
    let alpha = taxon.has_bone_scale().then(|| {
        let [lo, hi] = config.alpha_range;
        (0..template.n_bones()).map(|_| rng.random_range(lo..=hi)).collect()
    });
    let position: [f64; 3] = std::array::from_fn(|i| rng.random_range(config.position_min[i]..=config.position_max[i]));
    let params = BodyParams { beta, theta, alpha, gamma: [0.0; 3] };
    Ok((params, config.camera().with_translation(position), config.family_label(taxon, k)))
}

/// Renders and annotates one sample.
pub fn synthesize_sample(params: &BodyParams, camera: &CameraSpec, family: usize, template: &ModelTemplate, config: &GenConfig) -> Result<SampleRecord> {
    params.validate(template)?;
    if [camera.height, camera.width] != [config.image_height, config.image_width] {
        return Err(invalid!("camera resolution does not match the configured image size"));
    }
    let mesh = model_forward(template, params)?;
    let buffers = rasterize(&mesh.vertices, &template.faces, camera)?;
    let proj = project(&mesh.keypoints3d, camera)?;
    let visible = keypoint_visibility(&mesh.keypoints3d, camera, &buffers, VISIBILITY_TOLERANCE)?;
    let vproj = project(&mesh.vertices, camera)?;
    let (h, w) = (camera.height as f64, camera.width as f64);
    let truncated = vproj.valid.iter().zip(vproj.pixels.data().chunks_exact(2)).any(|(&ok, p)| !ok || p[0] < 0.0 || p[1] < 0.0 || p[0] >= w || p[1] >= h);
    let (near, far) = config.near_far();
    let mut image = Vec::with_capacity(2 * buffers.depth.len());
    for (&m, &d) in buffers.mask.data.iter().zip(&buffers.depth) {
        image.push(if m { 1.0 } else { 0.0 });
        image.push(if m { ((d - near) / (far - near)).clamp(0.0, 1.0) } else { 0.0 });
    }
    let degenerate = buffers.mask.count() == 0;
    Ok(SampleRecord {
        taxon: template.taxon,
        family,
        params: params.clone(),
        camera: camera.clone(),
        keypoints3d: mesh.keypoints3d,
        keypoints2d: proj.pixels,
        visible,
        image: Tensor::new(vec![camera.height, camera.width, 2], image)?,
        mask: buffers.mask,
        depth: buffers.depth,
        has_3d: config.has_3d,
        degenerate,
        truncated,
    })
}

/// Chebyshev dilation by `radius` pixels.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height, mask.width);
    // Separable: rows then columns.
    let mut rows = Mask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(w - 1);
            rows.data[r * w + c] = (lo..=hi).any(|cc| mask.get(r, cc));
        }
    }
    Mask::from_fn(h, w, |r, c| {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(h - 1);
        (lo..=hi).any(|rr| rows.get(rr, c))
    })
}

/// Simulated segmentation: dilation followed by random flips within a band
/// around the silhouette boundary.
pub fn perturb_mask(mask: &Mask, p: &MaskPerturbation, rng: &mut ChaCha8Rng) -> Mask {
    let mut out = dilate(mask, p.dilation_radius);
    let [lo, hi] = p.boundary_flip_range;
    let flip = if hi > lo { rng.random_range(lo..hi) } else { lo };
    if flip > 0.0 {
        let grown = dilate(&out, p.boundary_band);
        let inverted = Mask { data: out.data.iter().map(|b| !b).collect(), ..out.clone() };
        let shrunk_bg = dilate(&inverted, p.boundary_band);
        for i in 0..out.data.len() {
            // Pixels within the band on either side of the boundary.
            let near_boundary = grown.data[i] && shrunk_bg.data[i];
            if near_boundary && rng.random_bool(flip) {
                out.data[i] = !out.data[i];
            }
        }
    }
    out
}

/// The paper's cycle-consistency check: keep iff the simulated
/// segmentation agrees with the rendered mask to `iou_threshold` and the
/// record is not degenerate. Returns the decision and the IoU.
pub fn cycle_consistency_filter(record: &SampleRecord, perturbed: &Mask, iou_threshold: f64) -> Result<(bool, f64)> {
    let iou = mask_iou(&record.mask, perturbed)?;
    Ok((!record.degenerate && iou >= iou_threshold, iou))
}
