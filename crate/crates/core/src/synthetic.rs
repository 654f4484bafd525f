//! Seeded synthetic tasks used by tests, the acceptance suite, and the
//! `synth` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HvcmError, Result};
use crate::features::{FeatureDataset, OOD_LABEL};

/// Training rows, held-out InD rows, and OOD rows (labeled −1).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub train: FeatureDataset,
    pub test_ind: FeatureDataset,
    pub test_ood: FeatureDataset,
}

impl SyntheticSplit {
    /// Held-out InD rows followed by OOD rows.
    pub fn test_mixed(&self) -> Result<FeatureDataset> {
        let mut data = self.test_ind.data.clone();
        data.extend_from_slice(&self.test_ood.data);
        let mut labels = self.test_ind.labels.clone().unwrap_or_default();
        labels.extend(self.test_ood.labels.clone().unwrap_or_default());
        FeatureDataset::new("test", self.test_ind.dim, self.test_ind.c_max, Some(labels), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobConfig {
    pub classes: usize,
    /// Class centers sit evenly spaced on a circle of this radius.
    pub radius: f64,
    pub std: f64,
    pub ood_center: [f64; 2],
    pub ood_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_count: usize,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            classes: 3,
            radius: 2.0,
            std: 0.1,
            ood_center: [6.0, -6.0],
            ood_std: 0.1,
            train_per_class: 200,
            test_per_class: 200,
            ood_count: 600,
        }
    }
}

impl BlobConfig {
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.classes)
            .map(|k| {
                let theta = std::f64::consts::FRAC_PI_2
                    + std::f64::consts::TAU * k as f64 / self.classes as f64;
                [self.radius * theta.cos(), self.radius * theta.sin()]
            })
            .collect()
    }

    /// Smallest distance between two class centers.
    pub fn min_center_distance(&self) -> f64 {
        let c = self.centers();
        let mut best = f64::INFINITY;
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                best = best.min((c[i][0] - c[j][0]).hypot(c[i][1] - c[j][1]));
            }
        }
        best
    }
}

fn blob<R: Rng>(center: &[f64], std: f64, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            center
                .iter()
                .map(|&m| m + std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// 2-D isotropic Gaussian blobs plus one distant OOD blob.
pub fn separable_blobs(cfg: &BlobConfig, seed: u64) -> Result<SyntheticSplit> {
    if cfg.classes == 0 || !(cfg.std > 0.0) || !(cfg.ood_std > 0.0) {
        return Err(HvcmError::invalid("blobs", "need ≥ 1 class and positive std"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = cfg.centers();
    let (mut train, mut train_y, mut test, mut test_y) = (vec![], vec![], vec![], vec![]);
    for (k, c) in centers.iter().enumerate() {
        train.extend(blob(c, cfg.std, cfg.train_per_class, &mut rng));
        train_y.extend(std::iter::repeat_n(k as i32, cfg.train_per_class));
        test.extend(blob(c, cfg.std, cfg.test_per_class, &mut rng));
        test_y.extend(std::iter::repeat_n(k as i32, cfg.test_per_class));
    }
    let ood = blob(&cfg.ood_center, cfg.ood_std, cfg.ood_count, &mut rng);
    let c_max = cfg.classes as u32;
    Ok(SyntheticSplit {
        train: FeatureDataset::from_rows("train", &train, Some(train_y), c_max)?,
        test_ind: FeatureDataset::from_rows("test_ind", &test, Some(test_y), c_max)?,
        test_ood: FeatureDataset::from_rows("test_ood", &ood, Some(vec![OOD_LABEL; cfg.ood_count]), c_max)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    pub classes: usize,
    pub blocks: usize,
    pub block_width: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_count: usize,
    /// Norm of the mean offset that separates OOD rows from their class.
    pub ood_shift: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            classes: 2,
            blocks: 4,
            block_width: 4,
            train_per_class: 400,
            test_per_class: 300,
            ood_count: 600,
            ood_shift: 2.0,
        }
    }
}

/// Classes with block-diagonal covariance: every block is an independent
/// random SPD matrix with strong within-block correlation. OOD rows reuse a
/// class's covariance around a shifted mean.
pub fn block_covariance_task(cfg: &BlockConfig, seed: u64) -> Result<SyntheticSplit> {
    if cfg.classes == 0 || cfg.blocks == 0 || cfg.block_width == 0 {
        return Err(HvcmError::invalid("blocks", "sizes must be ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = cfg.block_width;
    let dim = cfg.blocks * w;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    // per class: mean and one lower-triangular factor per block
    let classes: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..cfg.classes)
        .map(|_| {
            let mean: Vec<f64> = (0..dim).map(|_| 4.0 * unit.sample(&mut rng)).collect();
            let factors = (0..cfg.blocks).map(|_| random_factor(w, &mut rng)).collect();
            (mean, factors)
        })
        .collect();
    let draw = |mean: &[f64], factors: &[Vec<f64>], rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut x = mean.to_vec();
        for (b, l) in factors.iter().enumerate() {
            let z: Vec<f64> = (0..w).map(|_| unit.sample(rng)).collect();
            for r in 0..w {
                x[b * w + r] += (0..=r).map(|c| l[r * w + c] * z[c]).sum::<f64>();
            }
        }
        x
    };
    let (mut train, mut train_y, mut test, mut test_y) = (vec![], vec![], vec![], vec![]);
    for (k, (mean, factors)) in classes.iter().enumerate() {
        for _ in 0..cfg.train_per_class {
            train.push(draw(mean, factors, &mut rng));
            train_y.push(k as i32);
        }
        for _ in 0..cfg.test_per_class {
            test.push(draw(mean, factors, &mut rng));
            test_y.push(k as i32);
        }
    }
    let mut ood = Vec::with_capacity(cfg.ood_count);
    for i in 0..cfg.ood_count {
        let (mean, factors) = &classes[i % cfg.classes];
        let dir: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let shifted: Vec<f64> = mean
            .iter()
            .zip(&dir)
            .map(|(m, d)| m + cfg.ood_shift * d / norm)
            .collect();
        ood.push(draw(&shifted, factors, &mut rng));
    }
    let c_max = cfg.classes as u32;
    Ok(SyntheticSplit {
        train: FeatureDataset::from_rows("train", &train, Some(train_y), c_max)?,
        test_ind: FeatureDataset::from_rows("test_ind", &test, Some(test_y), c_max)?,
        test_ood: FeatureDataset::from_rows("test_ood", &ood, Some(vec![OOD_LABEL; cfg.ood_count]), c_max)?,
    })
}

/// Lower-triangular `w × w` factor with unit-ish diagonal and sizable
/// off-diagonal entries.
fn random_factor<R: Rng>(w: usize, rng: &mut R) -> Vec<f64> {
    let mut l = vec![0.0; w * w];
    for r in 0..w {
        for c in 0..r {
            l[r * w + c] = rng.sample::<f64, _>(StandardNormal) * 0.8;
        }
        l[r * w + r] = 0.3 + rng.random::<f64>();
    }
    l
}
