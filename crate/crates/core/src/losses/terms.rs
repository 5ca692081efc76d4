//! Eqs. 1 and 4–7 as graph builders, plus value-level wrappers that build a
//! throwaway graph of constants.

use super::prior::PriorDistribution;
use super::weights::{AvesPriorWeights, Loss2dWeights, Loss3dWeights, LossWeights, SmalPriorWeights};
use crate::bodymodel::{BodyParams, Taxon};
use crate::error::{invalid, Result};
use crate::numkernel::{Graph, Tensor, Var};

/// Rows of `z` must have unit norm within this tolerance.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

fn sum_of_squares(g: &mut Graph, a: Var) -> Var {
    let s = g.square(a);
    g.sum(s)
}

fn sum_of_abs(g: &mut Graph, a: Var) -> Var {
    let s = g.abs(a);
    g.sum(s)
}

fn check_shape(g: &Graph, v: Var, shape: &[usize], what: &str) -> Result<()> {
    if g.value(v).shape() != shape {
        return Err(invalid!("{what} has shape {:?}, expected {shape:?}", g.value(v).shape()));
    }
    Ok(())
}

/// Eq. 1 in the log form of supervised contrastive learning:
/// `Σ_{i: |P(i)|>0} −1/|P(i)| Σ_{p∈P(i)} [s_ip − log Σ_{o≠i} exp s_io]`
/// with `s = z zᵀ / τ`.
pub fn loss_con_graph(g: &mut Graph, z: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let zt = g.value(z);
    let b = zt.rows();
    if b < 2 {
        return Err(invalid!("contrastive loss needs a batch of at least 2, got {b}"));
    }
    if labels.len() != b {
        return Err(invalid!("{} labels for a batch of {b}", labels.len()));
    }
    if !(tau > 0.0) {
        return Err(invalid!("temperature must be positive, got {tau}"));
    }
    for (i, row) in zt.data().chunks_exact(zt.cols()).enumerate() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
            return Err(invalid!("feature row {i} has norm {n}, expected 1"));
        }
    }
    let mut coeff = Tensor::zeros(&[b, b]);
    let mut gate = Tensor::zeros(&[b, 1]);
    for i in 0..b {
        let positives: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        gate.set(i, 0, 1.0);
        for &p in &positives {
            coeff.set(i, p, 1.0 / positives.len() as f64);
        }
    }
    let mask: Vec<bool> = (0..b * b).map(|k| k / b != k % b).collect();
    let zt = g.transpose(z);
    let s = g.matmul(z, zt);
    let s = g.scale(s, 1.0 / tau);
    let lse = g.logsumexp_rows(s, mask);
    let gate = g.constant(gate);
    let coeff = g.constant(coeff);
    let a = g.mul(lse, gate);
    let a = g.sum(a);
    let p = g.mul(s, coeff);
    let p = g.sum(p);
    Ok(g.sub(a, p))
}

pub fn loss_con(z: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(z.clone());
    let l = loss_con_graph(&mut g, z, labels, tau)?;
    Ok(g.value(l).item())
}

/// Ground truth for Eq. 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets3d {
    pub params: BodyParams,
    /// `n_K x 3`.
    pub keypoints3d: Tensor,
}

/// Predicted quantities entering Eqs. 4, 6 and 7.
#[derive(Clone, Copy, Debug)]
pub struct PredictedBody {
    /// `1 x n_beta`.
    pub beta: Var,
    /// `n_J x 3`.
    pub theta: Var,
    /// `1 x n_bone`, avian only.
    pub alpha: Option<Var>,
    /// `n_K x 3`.
    pub keypoints3d: Var,
}

/// Eq. 4: `λ_β‖β̂−β‖² + λ_θ‖θ̂−θ‖² + Σ|K̂−K|/n_K + λ_α‖α̂−α‖₁`, λ_α = 0
/// unless avian.
pub fn loss_3d_graph(g: &mut Graph, pred: &PredictedBody, gt: &Targets3d, w: &Loss3dWeights, taxon: Taxon) -> Result<Var> {
    let nb = gt.params.beta.len();
    let nj = gt.params.theta.len();
    let nk = gt.keypoints3d.rows();
    check_shape(g, pred.beta, &[1, nb], "predicted beta")?;
    check_shape(g, pred.theta, &[nj, 3], "predicted theta")?;
    check_shape(g, pred.keypoints3d, &[nk, 3], "predicted keypoints")?;
    let beta = g.constant(Tensor::row(gt.params.beta.clone()));
    let theta = g.constant(gt.params.theta_tensor());
    let kp = g.constant(gt.keypoints3d.clone());
    let db = g.sub(pred.beta, beta);
    let lb = sum_of_squares(g, db);
    let lb = g.scale(lb, w.lambda_beta);
    let dt = g.sub(pred.theta, theta);
    let lt = sum_of_squares(g, dt);
    let lt = g.scale(lt, w.lambda_theta);
    let dk = g.sub(pred.keypoints3d, kp);
    let lk = sum_of_abs(g, dk);
    let lk = g.scale(lk, 1.0 / nk as f64);
    let mut total = g.add(lb, lt);
    total = g.add(total, lk);
    let la = w.lambda_alpha(taxon);
    if la != 0.0 {
        let (Some(pa), Some(ga)) = (pred.alpha, gt.params.alpha.as_ref()) else {
            return Err(invalid!("avian 3D loss needs predicted and ground-truth alpha"));
        };
        check_shape(g, pa, &[1, ga.len()], "predicted alpha")?;
        let ga = g.constant(Tensor::row(ga.clone()));
        let da = g.sub(pa, ga);
        let l = sum_of_abs(g, da);
        let l = g.scale(l, la);
        total = g.add(total, l);
    }
    Ok(total)
}

/// Ground truth for Eq. 5.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets2d {
    /// `n_K x 2` pixel coordinates.
    pub keypoints2d: Tensor,
    pub visible: Vec<bool>,
    /// `H x W` with entries in {0, 1}.
    pub mask: Tensor,
}

/// Eq. 5: mean over visible keypoints of the L1 distance between
/// `[−1, 1]`-normalized pixel coordinates, plus `λ_M · mean((M̂ − M)²)`.
/// `keypoints2d` are predicted pixels `n_K x 2`; `soft_mask` is `H x W`.
pub fn loss_2d_graph(g: &mut Graph, keypoints2d: Var, soft_mask: Var, gt: &Targets2d, w: &Loss2dWeights) -> Result<Var> {
    let nk = gt.keypoints2d.rows();
    if gt.keypoints2d.cols() != 2 || gt.visible.len() != nk {
        return Err(invalid!("2D targets: {:?} keypoints with {} visibility flags", gt.keypoints2d.shape(), gt.visible.len()));
    }
    check_shape(g, keypoints2d, &[nk, 2], "predicted 2D keypoints")?;
    check_shape(g, soft_mask, gt.mask.shape(), "soft mask")?;
    let (h, wd) = (gt.mask.rows() as f64, gt.mask.cols() as f64);
    let n_vis = gt.visible.iter().filter(|&&v| v).count();
    let kp_term = if n_vis == 0 {
        g.scalar(0.0)
    } else {
        // Normalization u -> 2u/W - 1 turns a pixel difference into 2Δ/W.
        let mut weights = Tensor::zeros(&[nk, 2]);
        for (k, &v) in gt.visible.iter().enumerate() {
            if v {
                weights.set(k, 0, 2.0 / wd / n_vis as f64);
                weights.set(k, 1, 2.0 / h / n_vis as f64);
            }
        }
        let target = g.constant(gt.keypoints2d.clone());
        let d = g.sub(keypoints2d, target);
        let d = g.abs(d);
        let weights = g.constant(weights);
        let d = g.mul(d, weights);
        g.sum(d)
    };
    let target = g.constant(gt.mask.clone());
    let dm = g.sub(soft_mask, target);
    let dm = g.square(dm);
    let dm = g.mean(dm);
    let dm = g.scale(dm, w.lambda_mask);
    Ok(g.add(kp_term, dm))
}

/// Eq. 6: `λ_β dβᵀ Σ_β⁻¹ dβ + dθᵀ Σ_θ⁻¹ dθ` with θ flattened row-major.
pub fn smal_prior_graph(g: &mut Graph, beta: Var, theta: Var, prior: &PriorDistribution, w: &SmalPriorWeights) -> Result<Var> {
    let nb = prior.mu_beta.len();
    let nt = prior.mu_theta.len();
    check_shape(g, beta, &[1, nb], "predicted beta")?;
    if g.value(theta).len() != nt {
        return Err(invalid!("predicted theta has {} entries, prior expects {nt}", g.value(theta).len()));
    }
    let mahalanobis = |g: &mut Graph, x: Var, mu: &[f64], precision: &Tensor| {
        let mu = g.constant(Tensor::row(mu.to_vec()));
        let d = g.sub(x, mu);
        let p = g.constant(precision.clone());
        let dp = g.matmul(d, p);
        let dp = g.mul(dp, d);
        g.sum(dp)
    };
    let lb = mahalanobis(g, beta, &prior.mu_beta, prior.precision_beta());
    let lb = g.scale(lb, w.lambda_beta);
    let flat = g.reshape(theta, &[1, nt]);
    let lt = mahalanobis(g, flat, &prior.mu_theta, prior.precision_theta());
    Ok(g.add(lb, lt))
}

/// Eq. 7: `λ_β‖β̂‖² + λ_θ‖θ̂ − θ̄‖² + ‖α̂ − ᾱ‖²`.
pub fn aves_prior_graph(g: &mut Graph, beta: Var, theta: Var, alpha: Option<Var>, prior: &PriorDistribution, w: &AvesPriorWeights) -> Result<Var> {
    let (Some(theta_bar), Some(alpha_bar)) = (&prior.theta_bar, &prior.alpha_bar) else {
        return Err(invalid!("AVES prior needs theta_bar and alpha_bar"));
    };
    let alpha = alpha.ok_or_else(|| invalid!("AVES prior needs predicted alpha"))?;
    check_shape(g, alpha, &[1, alpha_bar.len()], "predicted alpha")?;
    if g.value(theta).len() != theta_bar.len() {
        return Err(invalid!("predicted theta has {} entries, prior expects {}", g.value(theta).len(), theta_bar.len()));
    }
    let lb = sum_of_squares(g, beta);
    let lb = g.scale(lb, w.lambda_beta);
    let flat = g.reshape(theta, &[1, theta_bar.len()]);
    let tb = g.constant(Tensor::row(theta_bar.clone()));
    let dt = g.sub(flat, tb);
    let lt = sum_of_squares(g, dt);
    let lt = g.scale(lt, w.lambda_theta);
    let ab = g.constant(Tensor::row(alpha_bar.clone()));
    let da = g.sub(alpha, ab);
    let la = sum_of_squares(g, da);
    let s = g.add(lb, lt);
    Ok(g.add(s, la))
}

/// Value-level Eq. 4.
pub fn loss_3d(pred: &Targets3d, gt: &Targets3d, w: &Loss3dWeights, taxon: Taxon) -> Result<f64> {
    let mut g = Graph::new();
    let vars = PredictedBody {
        beta: g.constant(Tensor::row(pred.params.beta.clone())),
        theta: g.constant(pred.params.theta_tensor()),
        alpha: pred.params.alpha.as_ref().map(|a| g.constant(Tensor::row(a.clone()))),
        keypoints3d: g.constant(pred.keypoints3d.clone()),
    };
    let l = loss_3d_graph(&mut g, &vars, gt, w, taxon)?;
    Ok(g.value(l).item())
}

/// Value-level Eq. 5.
pub fn loss_2d(keypoints2d: &Tensor, soft_mask: &Tensor, gt: &Targets2d, w: &Loss2dWeights) -> Result<f64> {
    let mut g = Graph::new();
    let k = g.constant(keypoints2d.clone());
    let m = g.constant(soft_mask.clone());
    let l = loss_2d_graph(&mut g, k, m, gt, w)?;
    Ok(g.value(l).item())
}

/// Value-level Eq. 6.
pub fn loss_smal_prior(beta: &[f64], theta: &Tensor, prior: &PriorDistribution, w: &SmalPriorWeights) -> Result<f64> {
    let mut g = Graph::new();
    let b = g.constant(Tensor::row(beta.to_vec()));
    let t = g.constant(theta.clone());
    let l = smal_prior_graph(&mut g, b, t, prior, w)?;
    Ok(g.value(l).item())
}

/// Value-level Eq. 7.
pub fn loss_aves_prior(beta: &[f64], theta: &Tensor, alpha: Option<&[f64]>, prior: &PriorDistribution, w: &AvesPriorWeights) -> Result<f64> {
    let mut g = Graph::new();
    let b = g.constant(Tensor::row(beta.to_vec()));
    let t = g.constant(theta.clone());
    let a = alpha.map(|a| g.constant(Tensor::row(a.to_vec())));
    let l = aves_prior_graph(&mut g, b, t, a, prior, w)?;
    Ok(g.value(l).item())
}

/// Unweighted per-sample loss values and the flags that gate them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleComponents {
    pub loss_3d: Option<f64>,
    pub loss_2d: f64,
    pub smal_prior: Option<f64>,
    pub aves_prior: Option<f64>,
}

impl SampleComponents {
    /// The per-sample part of Eq. 3: every present component times its λ.
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.lambda_3d * self.loss_3d.unwrap_or(0.0)
            + w.lambda_2d * self.loss_2d
            + w.lambda_smal_prior * self.smal_prior.unwrap_or(0.0)
            + w.lambda_aves_prior * self.aves_prior.unwrap_or(0.0)
    }
}

/// Eq. 3: batch mean of the gated per-sample terms plus `λ_con · L_con`
/// (computed once per batch).
pub fn loss_total(samples: &[SampleComponents], loss_con: f64, w: &LossWeights) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid!("loss_total needs at least one sample"));
    }
    let mean = samples.iter().map(|s| s.weighted(w)).sum::<f64>() / samples.len() as f64;
    Ok(mean + w.lambda_con * loss_con)
}
