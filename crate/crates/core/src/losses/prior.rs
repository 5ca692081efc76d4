use std::path::Path;

use nalgebra::DMatrix;

use crate::bodymodel::Taxon;
use crate::error::{invalid, Error, Result};
use crate::io::{read_blob_file, write_blob_file, TensorBlob};
use crate::numkernel::Tensor;

/// Gaussian shape/pose statistics (Eq. 6) and, for avian models, the mean
/// pose and mean bone coefficients of Eq. 7.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorDistribution {
    pub taxon: Taxon,
    pub mu_beta: Vec<f64>,
    pub sigma_beta: Tensor,
    /// Flattened `n_J x 3` pose mean.
    pub mu_theta: Vec<f64>,
    pub sigma_theta: Tensor,
    pub theta_bar: Option<Vec<f64>>,
    pub alpha_bar: Option<Vec<f64>>,
    precision_beta: Tensor,
    precision_theta: Tensor,
}

/// Inverse of a symmetric positive-definite matrix via Cholesky; rejects
/// asymmetric or indefinite input.
fn spd_inverse(name: &str, m: &Tensor, n: usize) -> Result<Tensor> {
    if m.shape() != [n, n] {
        return Err(invalid!("{name} must be {n}x{n}, got {:?}", m.shape()));
    }
    let scale = m.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (m.at(i, j) - m.at(j, i)).abs() > 1e-12 * scale {
                return Err(invalid!("{name} is not symmetric"));
            }
        }
    }
    let chol = DMatrix::from_row_slice(n, n, m.data()).cholesky().ok_or_else(|| invalid!("{name} is not positive definite"))?;
    let inv = chol.inverse();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            // Symmetrize away round-off.
            data.push(0.5 * (inv[(i, j)] + inv[(j, i)]));
        }
    }
    Ok(Tensor::matrix(n, n, data))
}

impl PriorDistribution {
    pub fn new(
        taxon: Taxon,
        mu_beta: Vec<f64>,
        sigma_beta: Tensor,
        mu_theta: Vec<f64>,
        sigma_theta: Tensor,
        theta_bar: Option<Vec<f64>>,
        alpha_bar: Option<Vec<f64>>,
    ) -> Result<Self> {
        let precision_beta = spd_inverse("Sigma_beta", &sigma_beta, mu_beta.len())?;
        let precision_theta = spd_inverse("Sigma_theta", &sigma_theta, mu_theta.len())?;
        if taxon.has_bone_scale() {
            match (&theta_bar, &alpha_bar) {
                (Some(t), Some(_)) if t.len() == mu_theta.len() => {}
                _ => return Err(invalid!("avian prior needs theta_bar (length {}) and alpha_bar", mu_theta.len())),
            }
        } else if theta_bar.is_some() || alpha_bar.is_some() {
            return Err(invalid!("theta_bar and alpha_bar belong to the avian prior only"));
        }
        let all_finite = mu_beta.iter().chain(&mu_theta).chain(theta_bar.iter().flatten()).chain(alpha_bar.iter().flatten()).all(|v| v.is_finite());
        if !all_finite {
            return Err(invalid!("prior means must be finite"));
        }
        Ok(Self { taxon, mu_beta, sigma_beta, mu_theta, sigma_theta, theta_bar, alpha_bar, precision_beta, precision_theta })
    }

    pub fn precision_beta(&self) -> &Tensor {
        &self.precision_beta
    }

    pub fn precision_theta(&self) -> &Tensor {
        &self.precision_theta
    }

    fn blobs(&self) -> Vec<TensorBlob> {
        let t = self.taxon;
        let mut out = vec![
            TensorBlob::f64(format!("{t}.mu_beta"), &Tensor::row(self.mu_beta.clone())),
            TensorBlob::f64(format!("{t}.Sigma_beta"), &self.sigma_beta),
            TensorBlob::f64(format!("{t}.mu_theta"), &Tensor::row(self.mu_theta.clone())),
            TensorBlob::f64(format!("{t}.Sigma_theta"), &self.sigma_theta),
        ];
        if let (Some(tb), Some(ab)) = (&self.theta_bar, &self.alpha_bar) {
            out.push(TensorBlob::f64(format!("{t}.theta_bar"), &Tensor::row(tb.clone())));
            out.push(TensorBlob::f64(format!("{t}.alpha_bar"), &Tensor::row(ab.clone())));
        }
        out
    }
}

/// Writes priors as named blobs `<taxon>.mu_beta`, `<taxon>.Sigma_beta`, ...
pub fn save_priors(path: &Path, priors: &[PriorDistribution]) -> Result<()> {
    let blobs: Vec<TensorBlob> = priors.iter().flat_map(PriorDistribution::blobs).collect();
    write_blob_file(path, &blobs).map(|_| ())
}

pub fn load_priors(path: &Path) -> Result<Vec<PriorDistribution>> {
    let blobs = read_blob_file(path)?;
    let find = |name: &str| -> Option<Result<Tensor>> { blobs.iter().find(|b| b.name == name).map(TensorBlob::to_tensor) };
    let need = |name: String| -> Result<Tensor> { find(&name).ok_or_else(|| Error::Format(format!("prior blob {name} missing")))? };
    let mut out = Vec::new();
    for taxon in Taxon::ALL {
        if find(&format!("{taxon}.mu_beta")).is_none() {
            continue;
        }
        let opt = |n: &str| find(&format!("{taxon}.{n}")).transpose().map(|t| t.map(Tensor::into_data));
        out.push(PriorDistribution::new(
            taxon,
            need(format!("{taxon}.mu_beta"))?.into_data(),
            need(format!("{taxon}.Sigma_beta"))?,
            need(format!("{taxon}.mu_theta"))?.into_data(),
            need(format!("{taxon}.Sigma_theta"))?,
            opt("theta_bar")?,
            opt("alpha_bar")?,
        )?);
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{} holds no priors", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> Tensor {
        let n = v.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &x) in v.iter().enumerate() {
            t.set(i, i, x);
        }
        t
    }

    #[test]
    fn rejects_non_spd_and_inverts_spd() {
        let bad = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(PriorDistribution::new(Taxon::Quadruped, vec![0.0; 2], bad, vec![0.0; 3], diag(&[1.0; 3]), None, None).is_err());
        let asym = Tensor::matrix(2, 2, vec![2.0, 0.1, 0.0, 2.0]);
        assert!(PriorDistribution::new(Taxon::Quadruped, vec![0.0; 2], asym, vec![0.0; 3], diag(&[1.0; 3]), None, None).is_err());
        let s = Tensor::matrix(2, 2, vec![2.0, 0.5, 0.5, 1.0]);
        let p = PriorDistribution::new(Taxon::Quadruped, vec![0.0; 2], s.clone(), vec![0.0; 3], diag(&[4.0; 3]), None, None).unwrap();
        let id = s.matmul(p.precision_beta());
        assert!(id.zip_map(&Tensor::eye(2), |a, b| a - b).max_abs() < 1e-14);
        assert!(PriorDistribution::new(Taxon::Avian, vec![0.0; 2], s, vec![0.0; 3], diag(&[4.0; 3]), None, None).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("priors.bin");
        let q = PriorDistribution::new(Taxon::Quadruped, vec![0.1, 0.2], diag(&[1.0, 2.0]), vec![0.0; 3], diag(&[0.5; 3]), None, None).unwrap();
        let a = PriorDistribution::new(Taxon::Avian, vec![0.3], diag(&[3.0]), vec![0.0; 3], diag(&[0.5; 3]), Some(vec![0.0; 3]), Some(vec![1.5, 1.5])).unwrap();
        save_priors(&path, &[q.clone(), a.clone()]).unwrap();
        assert_eq!(load_priors(&path).unwrap(), vec![q, a]);
    }
}
