use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use crate::bodymodel::Taxon;
use crate::error::{invalid, Result};
use crate::numkernel::Tensor;

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Weight initialization scheme; biases start at zero and LayerNorm gains
/// at one either way.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Truncated normal with the given standard deviation; the paper's
    /// scheme uses [`INIT_STD`].
    TruncatedNormal(f64),
    /// Truncated normal with standard deviation `1/sqrt(fan_in)` (unit
    /// standard deviation for embeddings): O(1) activations and gradients
    /// at any width.
    FanIn,
}

impl Default for WeightInit {
    fn default() -> Self {
        WeightInit::TruncatedNormal(INIT_STD)
    }
}

/// Named trainable tensors of the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub params: BTreeMap<String, Tensor>,
}

/// Draws from `N(0, std^2)` truncated to two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let x: f64 = StandardNormal.sample(rng);
            if x.abs() <= 2.0 {
                break x * std;
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    scheme: WeightInit,
    params: BTreeMap<String, Tensor>,
}

impl Init<'_> {
    fn std(&self, fan_in: usize) -> f64 {
        match self.scheme {
            WeightInit::TruncatedNormal(s) => s,
            WeightInit::FanIn => 1.0 / (fan_in as f64).sqrt(),
        }
    }

    fn embedding(&mut self, name: &str, rows: usize, cols: usize) {
        let std = match self.scheme {
            WeightInit::TruncatedNormal(s) => s,
            WeightInit::FanIn => 1.0,
        };
        let t = truncated_normal(self.rng, rows, cols, std);
        self.params.insert(name.to_string(), t);
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let std = self.std(fan_in);
        let w = truncated_normal(self.rng, fan_in, fan_out, std);
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]));
    }

    fn norm(&mut self, name: &str, dim: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::ones(&[1, dim]));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[1, dim]));
    }

    fn attention(&mut self, name: &str, dim: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), dim, dim);
        }
    }

    fn mlp(&mut self, name: &str, fan_in: usize, hidden: usize, out: usize) {
        self.linear(&format!("{name}.fc1"), fan_in, hidden);
        self.linear(&format!("{name}.fc2"), hidden, out);
    }
}

impl NetworkState {
    /// Initializes every tensor deterministically from `seed` with the
    /// configured scheme ([`NetworkConfig::weight_init`]).
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, seed, config.weight_init)
    }

    pub fn init_with(config: &NetworkConfig, seed: u64, scheme: WeightInit) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut init = Init { rng: &mut rng, scheme, params: BTreeMap::new() };
        init.linear("patch_embed", config.patch_dim(), d);
        init.embedding("pos_embed", config.n_patches(), d);
        init.embedding("cls_token", 1, d);
        for b in 0..config.n_blocks {
            let p = format!("blocks.{b}");
            init.norm(&format!("{p}.norm1"), d);
            init.attention(&format!("{p}.attn"), d);
            init.norm(&format!("{p}.norm2"), d);
            init.linear(&format!("{p}.fc1"), d, config.ffn_hidden);
            init.linear(&format!("{p}.fc2_shared"), config.ffn_hidden, config.shared_dim);
            for t in 0..config.n_taxa() {
                let taxon = Taxon::from_index(t).expect("validated taxon count");
                init.linear(&format!("{p}.fc2_specific.{taxon}"), config.ffn_hidden, config.specific_dim);
            }
        }
        init.norm("encoder_norm", d);
        init.embedding("decoder.query", 1, d);
        for b in 0..config.decoder_blocks {
            let p = format!("decoder.blocks.{b}");
            init.norm(&format!("{p}.norm_q"), d);
            init.norm(&format!("{p}.norm_kv"), d);
            init.attention(&format!("{p}.attn"), d);
            init.norm(&format!("{p}.norm2"), d);
            init.mlp(&format!("{p}.mlp"), d, config.decoder_hidden, d);
        }
        init.norm("decoder.norm", d);
        init.linear("decoder.proj", d, config.decoder_dim);
        for (t, dims) in config.taxa.iter().enumerate() {
            let taxon = Taxon::from_index(t).expect("validated taxon count");
            let h = config.head_hidden;
            init.mlp(&format!("heads.{taxon}.beta"), config.decoder_dim, h, dims.n_betas);
            init.mlp(&format!("heads.{taxon}.theta"), config.decoder_dim, h, 3 * dims.n_joints);
            if dims.n_bones > 0 {
                init.mlp(&format!("heads.{taxon}.alpha"), config.decoder_dim, h, dims.n_bones);
            }
            init.mlp(&format!("heads.{taxon}.camera"), config.decoder_dim, h, 3);
            init.params.insert(format!("heads.{taxon}.camera.fc2.bias"), Tensor::row(vec![0.0, 0.0, config.camera_log_depth_init]));
        }
        init.mlp("predictor", d, config.head_hidden, config.feature_dim);
        Ok(Self { params: init.params })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| invalid!("network state has no tensor {name:?}"))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Names of tensors used only by `taxon` (its experts and heads).
    pub fn taxon_specific_names(&self, taxon: Taxon) -> Vec<String> {
        let expert = format!(".fc2_specific.{taxon}.");
        let head = format!("heads.{taxon}.");
        self.params.keys().filter(|k| k.contains(&expert) || k.starts_with(&head)).cloned().collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}
