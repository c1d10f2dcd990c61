use serde::{Deserialize, Serialize};

use super::{symmetric_eigen, Mat};
use crate::{Error, Result};

/// Fitted principal-component projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// `out_dim x in_dim`, orthonormal rows ordered by decreasing variance.
    pub basis: Mat,
    pub mean: Vec<f64>,
    /// Variance captured by each retained component.
    pub explained_variance: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl Pca {
    pub fn out_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        pca_project(&self.basis, &self.mean, v)
    }

    /// Maps a projected vector back into input space.
    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.out_dim() {
            return Err(Error::Dimension(format!(
                "reconstruct from length {}, expected {}",
                z.len(),
                self.out_dim()
            )));
        }
        let mut out = self.mean.clone();
        for (r, &zr) in z.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.basis.row(r)) {
                *o += zr * b;
            }
        }
        Ok(out)
    }
}

/// Fits PCA by eigendecomposition of the sample covariance matrix.
pub fn pca_fit<V: AsRef<[f64]>>(data: &[V], out_dim: usize) -> Result<Pca> {
    let n = data.len();
    let dim = data
        .first()
        .map(|v| v.as_ref().len())
        .ok_or_else(|| Error::Dimension("PCA needs samples".into()))?;
    if out_dim == 0 || out_dim > dim {
        return Err(Error::Dimension(format!(
            "out_dim {out_dim} must be in 1..={dim}"
        )));
    }
    if n <= out_dim {
        return Err(Error::Dimension(format!(
            "PCA to {out_dim} dims needs more than {out_dim} samples, got {n}"
        )));
    }
    if data.iter().any(|v| v.as_ref().len() != dim) {
        return Err(Error::Dimension("PCA samples have unequal lengths".into()));
    }

    let mut mean = vec![0.0; dim];
    for v in data {
        for (m, x) in mean.iter_mut().zip(v.as_ref()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut cov = Mat::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for v in data {
        for ((c, x), m) in centered.iter_mut().zip(v.as_ref()).zip(&mean) {
            *c = x - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let c = cov[(i, j)] / denom;
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    let total_variance = (0..dim).map(|i| cov[(i, i)]).sum();

    let (values, vectors) = symmetric_eigen(&cov)?;
    let mut basis = Mat::zeros(out_dim, dim);
    for r in 0..out_dim {
        for c in 0..dim {
            basis[(r, c)] = vectors[(r, c)];
        }
    }
    Ok(Pca {
        basis,
        mean,
        explained_variance: values[..out_dim].iter().map(|v| v.max(0.0)).collect(),
        total_variance,
    })
}

/// `basis · (v − mean)`.
pub fn pca_project(basis: &Mat, mean: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != basis.cols() || mean.len() != basis.cols() {
        return Err(Error::Dimension(format!(
            "project length {} (mean {}) onto basis with {} columns",
            v.len(),
            mean.len(),
            basis.cols()
        )));
    }
    let centered: Vec<f64> = v.iter().zip(mean).map(|(x, m)| x - m).collect();
    basis.matvec(&centered)
}
