use serde::{Deserialize, Serialize};

use crate::bodymodel::Taxon;
use crate::error::{invalid, Result};

/// Eq. 4 weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loss3dWeights {
    pub lambda_beta: f64,
    pub lambda_theta: f64,
    /// λ_α for avian samples; quadrupeds use 0.
    pub lambda_alpha_avian: f64,
}

impl Loss3dWeights {
    pub fn lambda_alpha(&self, taxon: Taxon) -> f64 {
        if taxon.has_bone_scale() {
            self.lambda_alpha_avian
        } else {
            0.0
        }
    }
}

/// Eq. 5 weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loss2dWeights {
    pub lambda_mask: f64,
}

/// Eq. 6 weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmalPriorWeights {
    pub lambda_beta: f64,
}

/// Eq. 7 weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvesPriorWeights {
    pub lambda_beta: f64,
    pub lambda_theta: f64,
}

/// Every λ of Eqs. 3–7 plus the contrastive temperature. The paper reuses
/// λ_β and λ_θ across equations; here each equation has its own namespace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_3d: f64,
    pub lambda_2d: f64,
    pub lambda_smal_prior: f64,
    pub lambda_con: f64,
    pub lambda_aves_prior: f64,
    pub loss3d: Loss3dWeights,
    pub loss2d: Loss2dWeights,
    pub smal_prior: SmalPriorWeights,
    pub aves_prior: AvesPriorWeights,
    /// Temperature of Eq. 1.
    pub tau: f64,
}

impl Default for LossWeights {
    /// The paper's values (§III-E); τ = 0.07 is our choice.
    fn default() -> Self {
        Self {
            lambda_3d: 0.05,
            lambda_2d: 0.01,
            lambda_smal_prior: 0.001,
            lambda_con: 0.0005,
            lambda_aves_prior: 0.002,
            loss3d: Loss3dWeights { lambda_beta: 0.01, lambda_theta: 0.2, lambda_alpha_avian: 0.04 },
            loss2d: Loss2dWeights { lambda_mask: 2.0 },
            smal_prior: SmalPriorWeights { lambda_beta: 0.5 },
            aves_prior: AvesPriorWeights { lambda_beta: 0.5, lambda_theta: 1.0 },
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_3d,
            self.lambda_2d,
            self.lambda_smal_prior,
            self.lambda_con,
            self.lambda_aves_prior,
            self.loss3d.lambda_beta,
            self.loss3d.lambda_theta,
            self.loss3d.lambda_alpha_avian,
            self.loss2d.lambda_mask,
            self.smal_prior.lambda_beta,
            self.aves_prior.lambda_beta,
            self.aves_prior.lambda_theta,
        ];
        if all.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(invalid!("loss weights must be finite and nonnegative"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid!("contrastive temperature must be positive, got {}", self.tau));
        }
        Ok(())
    }
}
