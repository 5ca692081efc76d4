use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;

use super::config::Stage;
use crate::error::{invalid, Result};

/// What the sampler needs to know about one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetInfo {
    pub name: String,
    pub len: usize,
    pub has_3d: bool,
}

/// Draws `(dataset, record)` pairs: dataset `d` with probability
/// `w_d / Σw`, then a uniform record of `d`. In stage 1, datasets without
/// 3D annotations get weight zero and the rest are renormalized.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    lens: Vec<usize>,
    probabilities: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl WeightedSampler {
    /// `weights[i]` belongs to `datasets[i]`.
    pub fn new(datasets: &[DatasetInfo], weights: &[f64], stage: Stage) -> Result<Self> {
        if weights.len() != datasets.len() {
            return Err(invalid!("{} weights for {} datasets", weights.len(), datasets.len()));
        }
        let effective: Vec<f64> = datasets
            .iter()
            .zip(weights)
            .map(|(d, &w)| {
                if !(w.is_finite() && w >= 0.0) {
                    return Err(invalid!("weight of {:?} must be finite and >= 0, got {w}", d.name));
                }
                let excluded = d.len == 0 || (stage == Stage::One && !d.has_3d);
                Ok(if excluded { 0.0 } else { w })
            })
            .collect::<Result<_>>()?;
        let total: f64 = effective.iter().sum();
        if total <= 0.0 {
            return Err(invalid!("no dataset has positive effective weight in stage {stage}"));
        }
        let dist = WeightedIndex::new(&effective).map_err(|e| invalid!("sampling weights: {e}"))?;
        Ok(Self { lens: datasets.iter().map(|d| d.len).collect(), probabilities: effective.iter().map(|w| w / total).collect(), dist })
    }

    /// Normalized effective probability of each dataset.
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let d = self.dist.sample(rng);
        (d, rng.random_range(0..self.lens[d]))
    }
}

/// Infinite stream of `(dataset, record)` draws.
pub fn weighted_sample_stream<'a>(sampler: &'a WeightedSampler, rng: &'a mut ChaCha8Rng) -> impl Iterator<Item = (usize, usize)> + 'a {
    std::iter::repeat_with(move || sampler.draw(rng))
}
