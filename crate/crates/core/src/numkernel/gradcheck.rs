use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Probe at most this many coordinates per leaf (all when `None`).
    pub max_probes_per_leaf: Option<usize>,
    /// Selects which coordinates are probed when the leaf is subsampled.
    pub seed: u64,
    /// Lower bound of the relative-error denominator. Leaves whose gradient
    /// is structurally zero (e.g. attention key biases, which softmax
    /// cancels) are thereby judged by absolute error instead of by the
    /// ratio of two round-off residues.
    pub denominator_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-6, max_probes_per_leaf: None, seed: 0, denominator_floor: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub name: String,
    /// `|a - n| / max(floor, |a| + |n|)` over the probed coordinates of
    /// this leaf, with `|.|` the Euclidean norm.
    pub rel_error: f64,
    pub max_abs_diff: f64,
    pub probes: usize,
    /// A probe produced a non-finite output.
    pub non_finite: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().fold(0.0, |m, l| m.max(l.rel_error))
    }

    pub fn any_non_finite(&self) -> bool {
        self.leaves.iter().any(|l| l.non_finite)
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.any_non_finite() && self.max_rel_error() <= tol
    }

    pub fn worst(&self) -> Option<&LeafCheck> {
        self.leaves.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares reverse-mode gradients of `output` against central finite
/// differences at `point` (leaf values rebound by name; others keep their
/// recorded values).
pub fn grad_check(
    graph: &Graph,
    output: Var,
    point: &BTreeMap<String, Tensor>,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(config.step > 0.0) {
        return Err(invalid!("grad_check step must be positive, got {}", config.step));
    }
    if !(config.denominator_floor > 0.0) {
        return Err(invalid!("grad_check denominator floor must be positive"));
    }
    let (_, analytic) = graph.gradient_at(output, point)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport::default();
    let mut bind = point.clone();

    for (name, var) in graph.params() {
        let base = point.get(&name).cloned().unwrap_or_else(|| graph.value(var).clone());
        let a = &analytic[&name];
        let n = base.len();
        let coords: Vec<usize> = match config.max_probes_per_leaf {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };

        let mut non_finite = false;
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0_f64);
        for &i in &coords {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                bind.insert(name.clone(), t);
                let ev = graph.evaluate(&bind)?;
                Ok(ev.get(output).item())
            };
            let fp = probe(config.step)?;
            let fm = probe(-config.step)?;
            let numeric = (fp - fm) / (2.0 * config.step);
            if !numeric.is_finite() || !a.data()[i].is_finite() {
                non_finite = true;
                continue;
            }
            let d = a.data()[i] - numeric;
            diff2 += d * d;
            a2 += a.data()[i] * a.data()[i];
            n2 += numeric * numeric;
            max_abs = max_abs.max(d.abs());
        }
        bind.insert(name.clone(), base);
        let rel_error = diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(config.denominator_floor);
        report.leaves.push(LeafCheck { name, rel_error, max_abs_diff: max_abs, probes: coords.len(), non_finite });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_tight() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::row(vec![0.3, -1.7, 2.2]));
        let a = g.constant(Tensor::matrix(3, 3, vec![2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 3.0]));
        let xa = g.matmul(x, a);
        let xt = g.transpose(x);
        let q = g.matmul(xa, xt);
        let y = g.sum(q);
        let r = grad_check(&g, y, &BTreeMap::new(), &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error() <= 1e-7, "{r:?}");
    }

    #[test]
    fn constant_graph_is_zero() {
        let mut g = Graph::new();
        let _x = g.param("x", Tensor::row(vec![1.0, 2.0]));
        let c = g.constant(Tensor::scalar(4.0));
        let y = g.scale(c, 2.0);
        let r = grad_check(&g, y, &BTreeMap::new(), &GradCheckConfig::default()).unwrap();
        assert_eq!(r.max_rel_error(), 0.0);
    }

    #[test]
    fn non_finite_is_flagged() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(1e-7));
        let y = g.log(x);
        let r = grad_check(&g, y, &BTreeMap::new(), &GradCheckConfig { step: 1e-6, ..Default::default() }).unwrap();
        assert!(r.any_non_finite());
    }

    #[test]
    fn rejects_nonpositive_step() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(1.0));
        let y = g.square(x);
        assert!(grad_check(&g, y, &BTreeMap::new(), &GradCheckConfig { step: 0.0, ..Default::default() }).is_err());
    }
}
