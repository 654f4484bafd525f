use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gaussian::{GroupGaussian, RidgePolicy};
use crate::attributes::{check_group_count, GroupedAttributes, ProjectionHead, StatsMode};
use crate::error::{check_dim, HvcmError, Result};
use crate::features::FeatureDataset;
use crate::linalg::{cosine, log_sum_exp};
use crate::trainer::Encoder;

/// Per-class mixture of `G` group Gaussians with mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub class_id: usize,
    pub count: usize,
    pub components: Vec<GroupGaussian>,
    pub weights: Vec<f64>,
}

impl ClassModel {
    /// Fits one Gaussian per group; `weights` are renormalized to sum 1.
    pub fn fit(
        class_id: usize,
        attrs: &[GroupedAttributes],
        weights: &[f64],
        policy: &RidgePolicy,
    ) -> Result<Self> {
        let first = attrs.first().ok_or_else(|| HvcmError::DegenerateFit {
            class: class_id,
            reason: "no samples".into(),
        })?;
        let (groups, width) = (first.group_count(), first.group_width());
        for a in attrs {
            check_dim(groups, a.group_count())?;
            check_dim(width, a.group_width())?;
        }
        let weights = normalize_weights(weights, groups)?;
        let components = (0..groups)
            .map(|g| {
                let samples: Vec<&[f64]> = attrs.iter().map(|a| a.groups()[g].as_slice()).collect();
                GroupGaussian::fit(&samples, policy).map_err(|reason| HvcmError::DegenerateFit {
                    class: class_id,
                    reason: format!("group {g}: {reason}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassModel {
            class_id,
            count: attrs.len(),
            components,
            weights,
        })
    }

    pub fn group_count(&self) -> usize {
        self.components.len()
    }

    /// Per-group Mahalanobis scores `M_i`.
    pub fn group_scores(&self, ga: &GroupedAttributes) -> Result<Vec<f64>> {
        check_dim(self.group_count(), ga.group_count())?;
        self.components
            .iter()
            .zip(ga.groups())
            .map(|(c, sub)| c.mahalanobis(sub))
            .collect()
    }

    /// `Σ_i w_i M_i`.
    pub fn score(&self, ga: &GroupedAttributes) -> Result<f64> {
        Ok(self
            .group_scores(ga)?
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| w * m)
            .sum())
    }

    /// `ln Σ_i w_i N(a_i; μ_i, Σ_i + ridge·I)`, evaluated in log space.
    pub fn log_density(&self, ga: &GroupedAttributes) -> Result<f64> {
        check_dim(self.group_count(), ga.group_count())?;
        let terms = self
            .components
            .iter()
            .zip(ga.groups())
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|((c, sub), w)| Ok(w.ln() + c.log_pdf(sub)?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(log_sum_exp(&terms))
    }

    /// Group means concatenated into one length-`d` vector.
    pub fn center(&self) -> Vec<f64> {
        self.components.iter().flat_map(|c| c.mean().iter().copied()).collect()
    }
}

pub(crate) fn normalize_weights(weights: &[f64], groups: usize) -> Result<Vec<f64>> {
    check_dim(groups, weights.len())?;
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(HvcmError::invalid("weights", "group weights must be finite and ≥ 0"));
    }
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) {
        return Err(HvcmError::invalid("weights", "group weights sum to zero"));
    }
    Ok(weights.iter().map(|w| w / sum).collect())
}

/// Maps raw input features to the attribute space: an optional encoder
/// followed by an affine projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub encoder: Option<Encoder>,
    pub head: ProjectionHead,
}

impl Embedding {
    pub fn from_head(head: ProjectionHead) -> Self {
        Embedding { encoder: None, head }
    }

    /// Encoder output used directly as the attribute vector.
    pub fn from_encoder(encoder: Encoder) -> Self {
        let d = encoder.output_dim();
        Embedding {
            encoder: Some(encoder),
            head: ProjectionHead::identity(d),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder
            .as_ref()
            .map_or(self.head.input_dim(), Encoder::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn attributes(&self, feature: &[f64]) -> Result<Vec<f64>> {
        match &self.encoder {
            Some(enc) => self.head.project(&enc.forward(feature)?),
            None => self.head.project(feature),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub groups: usize,
    pub ridge_policy: RidgePolicy,
    pub stats_mode: StatsMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            groups: 32,
            ridge_policy: RidgePolicy::default(),
            stats_mode: StatsMode::Raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    InD,
    Ood,
}

/// Result of scoring one sample against every class.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub score: f64,
    pub class: usize,
    pub per_class: Vec<f64>,
}

/// The frozen detector: `C` class mixtures plus the embedding that maps
/// features into their attribute space.
#[derive(Debug, Clone, PartialEq)]
pub struct HvcmModel {
    pub classes: Vec<ClassModel>,
    pub config: ModelConfig,
    pub embedding: Embedding,
    pub threshold: Option<f64>,
    pub frozen: bool,
}

impl HvcmModel {
    /// Fits every class from its (already prepared) grouped attributes.
    /// Classes are fitted in parallel; the result does not depend on the
    /// thread count.
    pub fn freeze(
        class_attrs: &[Vec<GroupedAttributes>],
        weights: &[Vec<f64>],
        config: ModelConfig,
        embedding: Embedding,
    ) -> Result<Self> {
        if class_attrs.is_empty() {
            return Err(HvcmError::invalid("classes", "cannot freeze a model with no classes"));
        }
        check_dim(class_attrs.len(), weights.len())?;
        check_group_count(embedding.output_dim(), config.groups)?;
        config.ridge_policy.validate()?;
        let width = embedding.output_dim() / config.groups;
        for attrs in class_attrs {
            for a in attrs {
                check_dim(config.groups, a.group_count())?;
                check_dim(width, a.group_width())?;
            }
        }
        let classes = class_attrs
            .par_iter()
            .zip(weights)
            .enumerate()
            .map(|(c, (attrs, w))| ClassModel::fit(c, attrs, w, &config.ridge_policy))
            .collect::<Result<Vec<_>>>()?;
        Ok(HvcmModel {
            classes,
            config,
            embedding,
            threshold: None,
            frozen: true,
        })
    }

    /// Embeds every labeled row of `dataset` and fits classes `0..c_max`.
    /// `weights` defaults to uniform group weights for every class.
    pub fn fit_dataset(
        dataset: &FeatureDataset,
        weights: Option<&[Vec<f64>]>,
        config: ModelConfig,
        embedding: Embedding,
    ) -> Result<Self> {
        check_dim(embedding.input_dim(), dataset.dim)?;
        check_group_count(embedding.output_dim(), config.groups)?;
        let by_class = dataset.indices_by_class()?;
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(HvcmError::DegenerateFit {
                class: c,
                reason: "no samples".into(),
            });
        }
        let class_attrs = by_class
            .par_iter()
            .map(|rows| {
                rows.iter()
                    .map(|&r| {
                        let a = embedding.attributes(&dataset.row_f64(r))?;
                        config.stats_mode.prepare(&a, config.groups)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let uniform;
        let weights = match weights {
            Some(w) => w,
            None => {
                uniform = vec![vec![1.0; config.groups]; by_class.len()];
                &uniform
            }
        };
        Self::freeze(&class_attrs, weights, config, embedding)
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn groups(&self) -> usize {
        self.config.groups
    }

    pub fn attr_dim(&self) -> usize {
        self.embedding.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.embedding.input_dim()
    }

    /// Raw feature → grouped attributes in the statistics space.
    pub fn prepare(&self, feature: &[f64]) -> Result<GroupedAttributes> {
        let a = self.embedding.attributes(feature)?;
        self.config.stats_mode.prepare(&a, self.config.groups)
    }

    /// Maximum class score and the class achieving it (lowest id on ties).
    pub fn dataset_score(&self, ga: &GroupedAttributes) -> Result<(f64, usize)> {
        let s = self.score_all(ga)?;
        Ok((s.score, s.class))
    }

    pub fn score_all(&self, ga: &GroupedAttributes) -> Result<SampleScore> {
        if !self.frozen {
            return Err(HvcmError::invalid("model", "model is not frozen"));
        }
        if self.classes.is_empty() {
            return Err(HvcmError::invalid("model", "model has no classes"));
        }
        let per_class = self
            .classes
            .iter()
            .map(|c| c.score(ga))
            .collect::<Result<Vec<_>>>()?;
        let (class, score) = argmax(&per_class);
        Ok(SampleScore {
            score,
            class,
            per_class,
        })
    }

    pub fn score_feature(&self, feature: &[f64]) -> Result<SampleScore> {
        self.score_all(&self.prepare(feature)?)
    }

    /// InD iff `score ≥ γ`.
    pub fn detect(&self, score: f64) -> Result<Decision> {
        let gamma = self
            .threshold
            .ok_or_else(|| HvcmError::invalid("threshold", "threshold has not been calibrated"))?;
        Ok(if score >= gamma { Decision::InD } else { Decision::Ood })
    }

    /// Nearest class by cosine similarity between `attribute` (a raw
    /// length-`d` attribute vector) and each class's concatenated centers.
    pub fn classify_cosine(&self, attribute: &[f64]) -> Result<usize> {
        check_dim(self.attr_dim(), attribute.len())?;
        let prepared = self.config.stats_mode.prepare(attribute, self.config.groups)?.concat();
        let sims = self
            .classes
            .iter()
            .map(|c| {
                cosine(&prepared, &c.center()).ok_or_else(|| {
                    HvcmError::invalid("attribute", "zero-norm vector in cosine classifier")
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if sims.is_empty() {
            return Err(HvcmError::invalid("model", "model has no classes"));
        }
        Ok(argmax(&sims).0)
    }

    pub fn classify_feature(&self, feature: &[f64]) -> Result<usize> {
        self.classify_cosine(&self.embedding.attributes(feature)?)
    }

    pub fn class_centers(&self) -> Vec<Vec<f64>> {
        self.classes.iter().map(ClassModel::center).collect()
    }
}

/// First index of the maximum.
pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ga(v: &[f64], g: usize) -> GroupedAttributes {
        GroupedAttributes::group(v, g).unwrap()
    }

    fn blobs(centers: &[Vec<f64>], per_class: usize, std: f64, seed: u64) -> Vec<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        centers
            .iter()
            .map(|c| {
                (0..per_class)
                    .map(|_| c.iter().map(|m| m + std * rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect()
            })
            .collect()
    }

    fn model_from(samples: &[Vec<Vec<f64>>], groups: usize) -> HvcmModel {
        let d = samples[0][0].len();
        let attrs: Vec<Vec<GroupedAttributes>> = samples
            .iter()
            .map(|cls| cls.iter().map(|s| ga(s, groups)).collect())
            .collect();
        let weights = vec![vec![1.0; groups]; samples.len()];
        let config = ModelConfig {
            groups,
            ..Default::default()
        };
        HvcmModel::freeze(&attrs, &weights, config, Embedding::from_head(ProjectionHead::identity(d))).unwrap()
    }

    fn three_class() -> (Vec<Vec<f64>>, HvcmModel) {
        let centers = vec![
            vec![0.0, 0.0, 10.0, 10.0],
            vec![10.0, 0.0, 0.0, 10.0],
            vec![0.0, 10.0, 10.0, 0.0],
        ];
        let samples = blobs(&centers, 100, 0.5, 1);
        (centers, model_from(&samples, 2))
    }

    #[test]
    fn freeze_three_classes() {
        let (_, m) = three_class();
        assert_eq!(m.class_count(), 3);
        assert!(m.frozen);
        for (c, cm) in m.classes.iter().enumerate() {
            assert_eq!(cm.class_id, c);
            assert_eq!(cm.count, 100);
            assert_eq!(cm.group_count(), 2);
            assert!((cm.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn freeze_is_deterministic() {
        let centers = vec![vec![0.0, 1.0], vec![3.0, 3.0]];
        let s = blobs(&centers, 50, 0.3, 9);
        assert_eq!(model_from(&s, 2), model_from(&s, 2));
    }

    #[test]
    fn single_sample_class() {
        let s = vec![vec![vec![1.0, 2.0]], vec![vec![5.0, 5.0], vec![5.5, 4.0]]];
        let m = model_from(&s, 1);
        assert_eq!(m.classes[0].components[0].ridge(), 1e-6);
    }

    #[test]
    fn freeze_rejects_empty() {
        let err = HvcmModel::freeze(
            &[],
            &[],
            ModelConfig::default(),
            Embedding::from_head(ProjectionHead::identity(32)),
        );
        assert!(err.is_err());
        let err = HvcmModel::freeze(
            &[vec![]],
            &[vec![1.0]],
            ModelConfig { groups: 1, ..Default::default() },
            Embedding::from_head(ProjectionHead::identity(2)),
        );
        assert!(matches!(err, Err(HvcmError::DegenerateFit { class: 0, .. })));
    }

    #[test]
    fn scores_at_centers() {
        let (_, m) = three_class();
        let center2 = m.classes[2].center();
        let g = ga(&center2, 2);
        assert_eq!(m.classes[2].score(&g).unwrap(), 0.0);
        let (score, class) = m.dataset_score(&g).unwrap();
        assert_eq!(score, 0.0);
        assert_eq!(class, 2);
    }

    #[test]
    fn weighted_class_score() {
        let comp = |m: f64| GroupGaussian::new(vec![m], vec![1.0], 0.0).unwrap();
        let cm = ClassModel {
            class_id: 0,
            count: 2,
            components: vec![comp(0.0), comp(0.0)],
            weights: vec![0.5, 0.5],
        };
        let g = GroupedAttributes::from_groups(vec![vec![2f64.sqrt()], vec![2.0]], false).unwrap();
        let s = cm.score(&g).unwrap();
        assert!((s + 3.0).abs() < 1e-12, "{s}");
        assert!(cm.score(&ga(&[1.0, 2.0, 3.0], 3)).is_err());
    }

    #[test]
    fn single_group_reduces_to_mahalanobis() {
        let s = blobs(&[vec![1.0, 2.0, 3.0]], 40, 1.0, 4);
        let m = model_from(&s, 1);
        let x = [0.0, 0.5, 4.0];
        let direct = m.classes[0].components[0].mahalanobis(&x).unwrap();
        assert_eq!(m.classes[0].score(&ga(&x, 1)).unwrap(), direct);
        assert_eq!(m.dataset_score(&ga(&x, 1)).unwrap(), (direct, 0));
    }

    #[test]
    fn adding_a_class_never_lowers_scores() {
        let centers = vec![vec![0.0, 0.0], vec![4.0, 0.0], vec![0.0, 4.0]];
        let s = blobs(&centers, 30, 1.0, 5);
        let small = model_from(&s[..2], 2);
        let big = model_from(&s, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let x: Vec<f64> = (0..2).map(|_| 6.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let (a, _) = small.dataset_score(&ga(&x, 2)).unwrap();
            let (b, _) = big.dataset_score(&ga(&x, 2)).unwrap();
            assert!(b >= a);
        }
    }

    #[test]
    fn detect_boundary_inclusive() {
        let (_, mut m) = three_class();
        assert!(m.detect(0.0).is_err());
        m.threshold = Some(-10.0);
        assert_eq!(m.detect(0.0).unwrap(), Decision::InD);
        assert_eq!(m.detect(-11.0).unwrap(), Decision::Ood);
        assert_eq!(m.detect(-10.0).unwrap(), Decision::InD);
    }

    #[test]
    fn log_density_of_identical_components() {
        let comp = GroupGaussian::new(vec![0.3, -0.2], vec![1.5, 0.2, 0.2, 0.8], 0.0).unwrap();
        let x = [0.9, 0.1];
        let single = comp.log_pdf(&x).unwrap();
        for g in [1, 2, 5] {
            let cm = ClassModel {
                class_id: 0,
                count: 10,
                components: vec![comp.clone(); g],
                weights: vec![1.0 / g as f64; g],
            };
            let groups = vec![x.to_vec(); g];
            let v = cm.log_density(&GroupedAttributes::from_groups(groups, false).unwrap()).unwrap();
            assert!((v - single).abs() < 1e-12);
        }
    }

    #[test]
    fn log_density_matches_direct_summation() {
        let (_, m) = three_class();
        let cm = &m.classes[0];
        let x = [0.3, -0.2, 9.6, 10.4];
        let g = ga(&x, 2);
        let mut direct = 0.0;
        for (i, comp) in cm.components.iter().enumerate() {
            // explicit inverse and determinant via 2x2 closed form
            let l = comp.chol().reconstruct();
            let det = l[0] * l[3] - l[1] * l[2];
            let inv = [l[3] / det, -l[1] / det, -l[2] / det, l[0] / det];
            let d: Vec<f64> = g.groups()[i].iter().zip(comp.mean()).map(|(a, b)| a - b).collect();
            let q = d[0] * (inv[0] * d[0] + inv[1] * d[1]) + d[1] * (inv[2] * d[0] + inv[3] * d[1]);
            let pdf = (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
            direct += cm.weights[i] * pdf;
        }
        let got = cm.log_density(&g).unwrap();
        assert!((got - direct.ln()).abs() < 1e-9, "{got} vs {}", direct.ln());
    }

    #[test]
    fn cosine_classifier() {
        let (centers, m) = three_class();
        assert_eq!(m.classify_cosine(&m.classes[0].center()).unwrap(), 0);
        for (c, center) in centers.iter().enumerate() {
            let scaled: Vec<f64> = center.iter().map(|v| v * 3.7).collect();
            assert_eq!(m.classify_cosine(&scaled).unwrap(), c);
        }
        assert!(m.classify_cosine(&[0.0; 4]).is_err());
        let held_out = blobs(&centers, 100, 0.5, 99);
        let mut correct = 0;
        for (c, samples) in held_out.iter().enumerate() {
            correct += samples.iter().filter(|s| m.classify_cosine(s).unwrap() == c).count();
        }
        assert!(correct as f64 / 300.0 >= 0.99);
    }

    #[test]
    fn weights_renormalized() {
        assert_eq!(normalize_weights(&[2.0, 2.0], 2).unwrap(), vec![0.5, 0.5]);
        assert!(normalize_weights(&[0.0, 0.0], 2).is_err());
        assert!(normalize_weights(&[-1.0, 2.0], 2).is_err());
        assert!(normalize_weights(&[1.0], 2).is_err());
    }
}
