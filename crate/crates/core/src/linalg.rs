//! Dense symmetric-positive-definite helpers on row-major `Vec<f64>` storage.

/// Lower-triangular Cholesky factor of an `n x n` SPD matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factorizes `matrix` (row-major, only the lower triangle is read).
    /// Returns `None` when a pivot is not strictly positive.
    pub fn factor(matrix: &[f64], dim: usize) -> Option<Self> {
        assert_eq!(matrix.len(), dim * dim);
        let mut lower = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut sum = matrix[i * dim + j];
                for k in 0..j {
                    sum -= lower[i * dim + k] * lower[j * dim + k];
                }
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return None;
                    }
                    lower[i * dim + i] = sum.sqrt();
                } else {
                    lower[i * dim + j] = sum / lower[j * dim + j];
                }
            }
        }
        Some(Cholesky { dim, lower })
    }

    /// Rebuilds a factor from its packed lower triangle (row by row).
    pub fn from_packed(packed: &[f64], dim: usize) -> Option<Self> {
        if packed.len() != packed_len(dim) {
            return None;
        }
        let mut lower = vec![0.0; dim * dim];
        let mut it = packed.iter();
        for i in 0..dim {
            for j in 0..=i {
                lower[i * dim + j] = *it.next()?;
            }
            if !(lower[i * dim + i] > 0.0) {
                return None;
            }
        }
        Some(Cholesky { dim, lower })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn packed(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(packed_len(self.dim));
        for i in 0..self.dim {
            out.extend_from_slice(&self.lower[i * self.dim..i * self.dim + i + 1]);
        }
        out
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.lower[i * self.dim + i]
    }

    /// Solves `L y = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let dot: f64 = row.iter().zip(&y[..i]).map(|(l, v)| l * v).sum();
            y[i] = (b[i] - dot) / self.lower[i * n + i];
        }
        y
    }

    /// `L Lᵀ`, row-major.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..=j)
                    .map(|k| self.lower[i * n + k] * self.lower[j * n + k])
                    .sum();
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        out
    }

    /// `ln det(L Lᵀ)`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.diag(i).ln()).sum::<f64>()
    }
}

pub fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Numerically stable `ln Σ exp(xᵢ)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot(a, b) / (na * nb))
    }
}
