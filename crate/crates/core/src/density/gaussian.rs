use serde::{Deserialize, Serialize};

use crate::error::{check_dim, HvcmError, Result};
use crate::linalg::Cholesky;

/// How much diagonal loading is applied before factorizing a covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RidgePolicy {
    /// `max(floor, relative * trace(Σ) / dim)`.
    Auto { floor: f64, relative: f64 },
    Fixed { value: f64 },
}

impl Default for RidgePolicy {
    fn default() -> Self {
        RidgePolicy::Auto {
            floor: 1e-6,
            relative: 1e-3,
        }
    }
}

impl RidgePolicy {
    pub const ESCALATIONS: u32 = 3;
    pub const ESCALATION_FACTOR: f64 = 10.0;

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            RidgePolicy::Auto { floor, relative } => {
                floor.is_finite() && floor >= 0.0 && relative.is_finite() && relative >= 0.0
            }
            RidgePolicy::Fixed { value } => value.is_finite() && value >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(HvcmError::invalid("ridge", format!("{self:?} must be finite and ≥ 0")))
        }
    }

    pub fn initial(&self, sigma: &[f64], dim: usize) -> f64 {
        match *self {
            RidgePolicy::Auto { floor, relative } => {
                let trace: f64 = (0..dim).map(|i| sigma[i * dim + i]).sum();
                floor.max(relative * trace / dim as f64)
            }
            RidgePolicy::Fixed { value } => value,
        }
    }
}

/// One Gaussian component over a `d/G`-dimensional attribute group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGaussian {
    mean: Vec<f64>,
    sigma: Vec<f64>,
    chol: Cholesky,
    ridge: f64,
}

impl GroupGaussian {
    /// Factorizes `sigma + ridge * I` exactly as given, no escalation.
    pub fn new(mean: Vec<f64>, sigma: Vec<f64>, ridge: f64) -> Result<Self> {
        let dim = mean.len();
        check_dim(dim * dim, sigma.len())?;
        let chol = Cholesky::factor(&loaded(&sigma, dim, ridge), dim).ok_or_else(|| {
            HvcmError::invalid("sigma", "sigma + ridge·I is not positive definite")
        })?;
        Ok(GroupGaussian {
            mean,
            sigma,
            chol,
            ridge,
        })
    }

    /// Rebuilds a component from a stored factor; `sigma` is recovered as
    /// `L Lᵀ − ridge·I`.
    pub fn from_factor(mean: Vec<f64>, chol: Cholesky, ridge: f64) -> Result<Self> {
        check_dim(mean.len(), chol.dim())?;
        let dim = mean.len();
        let mut sigma = chol.reconstruct();
        for i in 0..dim {
            sigma[i * dim + i] -= ridge;
        }
        Ok(GroupGaussian {
            mean,
            sigma,
            chol,
            ridge,
        })
    }

    /// Sample mean and unbiased (`N − 1`) covariance of `samples`, then a
    /// ridge-loaded Cholesky factor. A single sample yields a zero covariance.
    /// On factorization failure the ridge grows ×10, at most three times.
    pub fn fit(samples: &[&[f64]], policy: &RidgePolicy) -> std::result::Result<Self, String> {
        let n = samples.len();
        if n == 0 {
            return Err("no samples".into());
        }
        let dim = samples[0].len();
        if samples.iter().any(|s| s.len() != dim) {
            return Err("samples have inconsistent widths".into());
        }
        let mut mean = vec![0.0; dim];
        for s in samples {
            mean.iter_mut().zip(*s).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let mut sigma = vec![0.0; dim * dim];
        if n > 1 {
            let mut centered = vec![0.0; dim];
            for s in samples {
                centered.iter_mut().zip(s.iter().zip(&mean)).for_each(|(c, (v, m))| *c = v - m);
                for i in 0..dim {
                    let ci = centered[i];
                    let row = &mut sigma[i * dim..i * dim + i + 1];
                    row.iter_mut().zip(&centered[..=i]).for_each(|(acc, cj)| *acc += ci * cj);
                }
            }
            let denom = (n - 1) as f64;
            for i in 0..dim {
                for j in 0..=i {
                    let v = sigma[i * dim + j] / denom;
                    sigma[i * dim + j] = v;
                    sigma[j * dim + i] = v;
                }
            }
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err("covariance has non-finite entries".into());
        }

        let mut ridge = policy.initial(&sigma, dim);
        for attempt in 0..=RidgePolicy::ESCALATIONS {
            if let Some(chol) = Cholesky::factor(&loaded(&sigma, dim, ridge), dim) {
                return Ok(GroupGaussian {
                    mean,
                    sigma,
                    chol,
                    ridge,
                });
            }
            if attempt < RidgePolicy::ESCALATIONS {
                ridge *= RidgePolicy::ESCALATION_FACTOR;
            }
        }
        Err(format!("covariance not positive definite even with ridge {ridge:e}"))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn chol(&self) -> &Cholesky {
        &self.chol
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// `−(x−μ)ᵀ(Σ + ridge·I)⁻¹(x−μ)` via a forward solve against the factor.
    pub fn mahalanobis(&self, sub: &[f64]) -> Result<f64> {
        check_dim(self.dim(), sub.len())?;
        let diff: Vec<f64> = sub.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let y = self.chol.solve_lower(&diff);
        Ok(0.0 - y.iter().map(|v| v * v).sum::<f64>())
    }

    /// `ln N(x; μ, Σ + ridge·I)`.
    pub fn log_pdf(&self, sub: &[f64]) -> Result<f64> {
        let quad = -self.mahalanobis(sub)?;
        let k = self.dim() as f64;
        Ok(-0.5 * (k * (2.0 * std::f64::consts::PI).ln() + self.chol.log_det() + quad))
    }
}

fn loaded(sigma: &[f64], dim: usize, ridge: f64) -> Vec<f64> {
    let mut m = sigma.to_vec();
    for i in 0..dim {
        m[i * dim + i] += ridge;
    }
    m
}
