use serde::{Deserialize, Serialize};

use super::state::{WeightInit, INIT_STD};
use crate::bodymodel::{ModelTemplate, Taxon};
use crate::error::{invalid, Result};

/// Output sizes of one taxon's regression heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonDims {
    pub n_betas: usize,
    pub n_joints: usize,
    /// Zero for taxa without bone-length coefficients.
    pub n_bones: usize,
}

impl TaxonDims {
    pub fn of(template: &ModelTemplate) -> Self {
        Self { n_betas: template.n_betas(), n_joints: template.n_joints(), n_bones: template.n_bones() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub shared_dim: usize,
    pub specific_dim: usize,
    pub decoder_blocks: usize,
    pub decoder_hidden: usize,
    pub decoder_dim: usize,
    pub head_hidden: usize,
    pub feature_dim: usize,
    /// Indexed by [`Taxon::index`].
    pub taxa: Vec<TaxonDims>,
    /// Initial bias of the log-depth camera output.
    pub camera_log_depth_init: f64,
    /// Scheme used by [`NetworkState::init`](super::NetworkState::init).
    #[serde(default)]
    pub weight_init: WeightInit,
}

impl NetworkConfig {
    /// Toy scale: 64x64 mask+depth images, 16-pixel patches (17 tokens),
    /// D = 32, two blocks.
    pub fn toy(quadruped: &ModelTemplate, avian: &ModelTemplate) -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            channels: 2,
            patch: 16,
            embed_dim: 32,
            n_blocks: 2,
            n_heads: 4,
            ffn_hidden: 64,
            shared_dim: 24,
            specific_dim: 8,
            decoder_blocks: 1,
            decoder_hidden: 64,
            decoder_dim: 64,
            head_hidden: 64,
            feature_dim: 16,
            taxa: vec![TaxonDims::of(quadruped), TaxonDims::of(avian)],
            camera_log_depth_init: 6f64.ln(),
            // sigma 0.02 leaves a 32-wide network from scratch with
            // vanishing gradients (see the decisions ledger).
            weight_init: WeightInit::FanIn,
        }
    }

    /// Encoder dimensions of the paper (256x192 input, ViT-H-style width
    /// 1280 split 960 + 320); used for shape contracts only.
    pub fn paper_encoder(taxa: Vec<TaxonDims>) -> Self {
        Self {
            image_height: 256,
            image_width: 192,
            channels: 3,
            patch: 16,
            embed_dim: 1280,
            n_blocks: 32,
            n_heads: 16,
            ffn_hidden: 5120,
            shared_dim: 960,
            specific_dim: 320,
            decoder_blocks: 1,
            decoder_hidden: 2048,
            decoder_dim: 1024,
            head_hidden: 1024,
            feature_dim: 128,
            taxa,
            camera_log_depth_init: 6f64.ln(),
            weight_init: WeightInit::TruncatedNormal(INIT_STD),
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    /// Patch tokens plus the class token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn n_taxa(&self) -> usize {
        self.taxa.len()
    }

    pub fn taxon_dims(&self, taxon: Taxon) -> Result<&TaxonDims> {
        self.taxa.get(taxon.index()).ok_or(crate::Error::UnknownTaxon(taxon.index()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            return Err(invalid!("image {}x{} is not divisible into {}-pixel patches", self.image_height, self.image_width, self.patch));
        }
        if self.shared_dim + self.specific_dim != self.embed_dim {
            return Err(invalid!("shared_dim {} + specific_dim {} must equal embed_dim {}", self.shared_dim, self.specific_dim, self.embed_dim));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(invalid!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.n_heads));
        }
        let sizes = [self.channels, self.embed_dim, self.ffn_hidden, self.decoder_hidden, self.decoder_dim, self.head_hidden, self.feature_dim, self.specific_dim];
        if sizes.contains(&0) || self.n_blocks == 0 {
            return Err(invalid!("network dimensions must be positive"));
        }
        if let WeightInit::TruncatedNormal(std) = self.weight_init {
            if !(std > 0.0 && std.is_finite()) {
                return Err(invalid!("initialization standard deviation must be positive, got {std}"));
            }
        }
        if self.taxa.is_empty() || self.taxa.len() > Taxon::ALL.len() {
            return Err(invalid!("network needs between 1 and {} taxa", Taxon::ALL.len()));
        }
        for (i, t) in self.taxa.iter().enumerate() {
            let avian = Taxon::from_index(i).is_some_and(Taxon::has_bone_scale);
            if t.n_betas == 0 || t.n_joints == 0 || (avian != (t.n_bones > 0)) {
                return Err(invalid!("taxon {i} head sizes {t:?} are inconsistent"));
            }
        }
        Ok(())
    }
}
