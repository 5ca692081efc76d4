use super::config::NetworkConfig;
use super::state::NetworkState;
use crate::bodymodel::Taxon;
use crate::error::{invalid, Result};
use crate::numkernel::{Graph, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Parameters are recorded into a graph on first use under their state
/// name, so a forward pass only ever touches the tensors it routes through.
fn param(g: &mut Graph, state: &NetworkState, name: &str) -> Result<Var> {
    if let Some(v) = g.var(name) {
        return Ok(v);
    }
    Ok(g.param(name, state.get(name)?.clone()))
}

fn linear(g: &mut Graph, state: &NetworkState, name: &str, x: Var) -> Result<Var> {
    let w = param(g, state, &format!("{name}.weight"))?;
    let b = param(g, state, &format!("{name}.bias"))?;
    Ok(g.linear(x, w, b))
}

fn layer_norm(g: &mut Graph, state: &NetworkState, name: &str, x: Var) -> Result<Var> {
    let gamma = param(g, state, &format!("{name}.gamma"))?;
    let beta = param(g, state, &format!("{name}.beta"))?;
    let n = g.layer_norm_rows(x, LN_EPS);
    let s = g.mul(n, gamma);
    Ok(g.add(s, beta))
}

fn mlp(g: &mut Graph, state: &NetworkState, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, state, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, state, &format!("{name}.fc2"), h)
}

/// Multi-head attention of `queries` over `context` (self-attention when
/// they coincide), followed by the output projection.
fn attention(g: &mut Graph, state: &NetworkState, name: &str, queries: Var, context: Var, n_heads: usize) -> Result<Var> {
    let q = linear(g, state, &format!("{name}.q"), queries)?;
    let k = linear(g, state, &format!("{name}.k"), context)?;
    let v = linear(g, state, &format!("{name}.v"), context)?;
    let d = g.value(q).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        heads.push(g.matmul(attn, vh));
    }
    let joined = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads) };
    linear(g, state, &format!("{name}.o"), joined)
}

/// Splits an `H x W x C` image into row-major `p x p` patches, each
/// flattened in `(dy, dx, c)` order: `n_patches x (p p C)`.
pub fn patchify(image: &Tensor, config: &NetworkConfig) -> Result<Tensor> {
    let (h, w, c, p) = (config.image_height, config.image_width, config.channels, config.patch);
    if image.shape() != [h, w, c] {
        return Err(invalid!("image shape {:?} does not match the configured {h}x{w}x{c}", image.shape()));
    }
    let (ph, pw) = (h / p, w / p);
    let mut out = Vec::with_capacity(image.len());
    for by in 0..ph {
        for bx in 0..pw {
            for dy in 0..p {
                let start = ((by * p + dy) * w + bx * p) * c;
                out.extend_from_slice(&image.data()[start..start + p * c]);
            }
        }
    }
    Ok(Tensor::matrix(ph * pw, p * p * c, out))
}

/// Linear patch projection plus positional embeddings, with the class
/// token prepended at row 0.
pub fn patch_embed_graph(g: &mut Graph, state: &NetworkState, patches: Var) -> Result<Var> {
    let x = linear(g, state, "patch_embed", patches)?;
    let pos = param(g, state, "pos_embed")?;
    let x = g.add(x, pos);
    let cls = param(g, state, "cls_token")?;
    Ok(g.concat_rows(&[cls, x]))
}

/// Eq. 2: the second FFN layer split into a taxa-shared part (first
/// `shared_dim` features) and the routed taxon's expert.
pub fn moe_ffn_graph(g: &mut Graph, state: &NetworkState, block: usize, hidden: Var, taxon: Taxon) -> Result<Var> {
    let shared = linear(g, state, &format!("blocks.{block}.fc2_shared"), hidden)?;
    let name = format!("blocks.{block}.fc2_specific.{taxon}");
    if state.params.get(&format!("{name}.weight")).is_none() {
        return Err(crate::Error::UnknownTaxon(taxon.index()));
    }
    let specific = linear(g, state, &name, hidden)?;
    Ok(g.concat_cols(&[shared, specific]))
}

/// Encoder output: patch feature tokens `F` and the class feature.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub tokens: Var,
    pub features: Var,
    pub class_feature: Var,
}

pub fn encoder_graph(g: &mut Graph, state: &NetworkState, config: &NetworkConfig, patches: Var, taxon: Taxon) -> Result<EncoderVars> {
    config.taxon_dims(taxon)?;
    let mut x = patch_embed_graph(g, state, patches)?;
    for b in 0..config.n_blocks {
        let p = format!("blocks.{b}");
        let n1 = layer_norm(g, state, &format!("{p}.norm1"), x)?;
        let a = attention(g, state, &format!("{p}.attn"), n1, n1, config.n_heads)?;
        x = g.add(x, a);
        let n2 = layer_norm(g, state, &format!("{p}.norm2"), x)?;
        let h = linear(g, state, &format!("{p}.fc1"), n2)?;
        let h = g.gelu(h);
        let f = moe_ffn_graph(g, state, b, h, taxon)?;
        x = g.add(x, f);
    }
    let x = layer_norm(g, state, "encoder_norm", x)?;
    let class_feature = g.slice_rows(x, 0, 1);
    let features = g.slice_rows(x, 1, config.n_tokens());
    Ok(EncoderVars { tokens: x, features, class_feature })
}

/// A single learnable query cross-attends to `features`; output `1 x
/// decoder_dim`.
pub fn decoder_graph(g: &mut Graph, state: &NetworkState, config: &NetworkConfig, features: Var) -> Result<Var> {
    let mut q = param(g, state, "decoder.query")?;
    for b in 0..config.decoder_blocks {
        let p = format!("decoder.blocks.{b}");
        let nq = layer_norm(g, state, &format!("{p}.norm_q"), q)?;
        let nkv = layer_norm(g, state, &format!("{p}.norm_kv"), features)?;
        let a = attention(g, state, &format!("{p}.attn"), nq, nkv, config.n_heads)?;
        q = g.add(q, a);
        let n2 = layer_norm(g, state, &format!("{p}.norm2"), q)?;
        let m = mlp(g, state, &format!("{p}.mlp"), n2)?;
        q = g.add(q, m);
    }
    let q = layer_norm(g, state, "decoder.norm", q)?;
    linear(g, state, "decoder.proj", q)
}

/// Regressed parameters as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `1 x n_beta`.
    pub beta: Var,
    /// `n_J x 3` axis-angle.
    pub theta: Var,
    /// `1 x n_bone`, avian only.
    pub alpha: Option<Var>,
    /// `1 x 3` camera translation `(t_x, t_y, exp(r))`.
    pub camera: Var,
    /// `1 x feature_dim`, unit norm.
    pub z: Var,
}

pub fn heads_graph(g: &mut Graph, state: &NetworkState, config: &NetworkConfig, f: Var, class_feature: Var, taxon: Taxon) -> Result<PredictionVars> {
    let dims = config.taxon_dims(taxon)?.clone();
    let beta = mlp(g, state, &format!("heads.{taxon}.beta"), f)?;
    let theta = mlp(g, state, &format!("heads.{taxon}.theta"), f)?;
    let theta = g.reshape(theta, &[dims.n_joints, 3]);
    let alpha = if dims.n_bones > 0 { Some(mlp(g, state, &format!("heads.{taxon}.alpha"), f)?) } else { None };
    let cam = mlp(g, state, &format!("heads.{taxon}.camera"), f)?;
    let txy = g.slice_cols(cam, 0, 2);
    let r = g.slice_cols(cam, 2, 3);
    let tz = g.exp(r);
    let camera = g.concat_cols(&[txy, tz]);
    let z = mlp(g, state, "predictor", class_feature)?;
    let z = g.l2_normalize_rows(z);
    Ok(PredictionVars { beta, theta, alpha, camera, z })
}

/// Whole network on one image given as patches (`n_patches x patch_dim`).
pub fn network_forward_graph(g: &mut Graph, state: &NetworkState, config: &NetworkConfig, patches: Var, taxon: Taxon) -> Result<PredictionVars> {
    let enc = encoder_graph(g, state, config, patches, taxon)?;
    let f = decoder_graph(g, state, config, enc.features)?;
    heads_graph(g, state, config, f, enc.class_feature, taxon)
}

/// Regressed parameters as values.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedParams {
    pub beta: Vec<f64>,
    pub theta: Vec<[f64; 3]>,
    pub alpha: Option<Vec<f64>>,
    pub camera: [f64; 3],
    pub z: Vec<f64>,
}

/// Inference on one `H x W x C` image.
pub fn predict(state: &NetworkState, config: &NetworkConfig, image: &Tensor, taxon: Taxon) -> Result<PredictedParams> {
    let patches = patchify(image, config)?;
    let mut g = Graph::new();
    let x = g.input("image_patches", patches);
    let p = network_forward_graph(&mut g, state, config, x, taxon)?;
    let cam = g.value(p.camera).data();
    Ok(PredictedParams {
        beta: g.value(p.beta).data().to_vec(),
        theta: g.value(p.theta).to_rows3(),
        alpha: p.alpha.map(|a| g.value(a).data().to_vec()),
        camera: [cam[0], cam[1], cam[2]],
        z: g.value(p.z).data().to_vec(),
    })
}
