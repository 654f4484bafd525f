//! Attribute space: affine projection of backbone features, contiguous
//! grouping into `G` sub-vectors, and per-group softmax.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, HvcmError, Result};

/// Affine map `a = W z + b` from `input_dim` to `output_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    input_dim: usize,
    output_dim: usize,
    /// `output_dim x input_dim`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ProjectionHead {
    pub fn new(input_dim: usize, output_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_dim(input_dim * output_dim, weight.len())?;
        check_dim(output_dim, bias.len())?;
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(HvcmError::invalid("head", "projection entries must be finite"));
        }
        Ok(ProjectionHead {
            input_dim,
            output_dim,
            weight,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        ProjectionHead {
            input_dim: dim,
            output_dim: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    /// Gaussian random projection scaled by `1/sqrt(input_dim)`, zero bias.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (input_dim.max(1) as f64).sqrt();
        let weight = (0..input_dim * output_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ProjectionHead {
            input_dim,
            output_dim,
            weight,
            bias: vec![0.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.input_dim)
    }

    pub fn project(&self, feature: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim, feature.len())?;
        Ok(self
            .weight
            .chunks_exact(self.input_dim.max(1))
            .take(self.output_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(feature).map(|(w, z)| w * z).sum::<f64>() + b)
            .collect())
    }
}

/// An attribute vector split into `G` equal contiguous groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedAttributes {
    groups: Vec<Vec<f64>>,
    normalized: bool,
}

impl GroupedAttributes {
    /// Splits `attribute` into `groups` chunks; group `i` holds indices
    /// `[i*d/G, (i+1)*d/G)`.
    pub fn group(attribute: &[f64], groups: usize) -> Result<Self> {
        check_group_count(attribute.len(), groups)?;
        let width = attribute.len() / groups;
        Ok(GroupedAttributes {
            groups: attribute.chunks_exact(width).map(<[f64]>::to_vec).collect(),
            normalized: false,
        })
    }

    pub fn from_groups(groups: Vec<Vec<f64>>, normalized: bool) -> Result<Self> {
        let width = groups.first().map_or(0, Vec::len);
        if width == 0 {
            return Err(HvcmError::invalid("groups", "need at least one non-empty group"));
        }
        for g in &groups {
            check_dim(width, g.len())?;
        }
        Ok(GroupedAttributes { groups, normalized })
    }

    /// Applies a temperature softmax to every group.
    pub fn normalize(&self, temperature: f64) -> Result<Self> {
        let groups = self
            .groups
            .iter()
            .map(|g| normalize_group(g, temperature))
            .collect::<Result<_>>()?;
        Ok(GroupedAttributes {
            groups,
            normalized: true,
        })
    }

    pub fn groups(&self) -> &[Vec<f64>] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group_width(&self) -> usize {
        self.groups[0].len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn concat(&self) -> Vec<f64> {
        self.groups.concat()
    }
}

pub fn check_group_count(dim: usize, groups: usize) -> Result<()> {
    if groups == 0 || dim == 0 || !dim.is_multiple_of(groups) {
        return Err(HvcmError::invalid(
            "groups",
            format!("G must divide d (G = {groups}, d = {dim})"),
        ));
    }
    Ok(())
}

/// `softmax(sub / temperature)` with max subtraction.
pub fn normalize_group(sub: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(HvcmError::invalid("temperature", format!("{temperature} must be > 0")));
    }
    if sub.iter().any(|v| !v.is_finite()) {
        return Err(HvcmError::invalid("attributes", "softmax input must be finite"));
    }
    Ok(softmax(sub, temperature))
}

pub(crate) fn softmax(x: &[f64], temperature: f64) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Which representation the class statistics are estimated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsMode {
    /// Pre-softmax group attributes.
    #[default]
    Raw,
    /// Per-group softmax (temperature 1) attributes.
    Softmax,
}

impl StatsMode {
    pub fn prepare(self, attribute: &[f64], groups: usize) -> Result<GroupedAttributes> {
        let ga = GroupedAttributes::group(attribute, groups)?;
        match self {
            StatsMode::Raw => Ok(ga),
            StatsMode::Softmax => ga.normalize(1.0),
        }
    }
}
