use hvcm::attributes::{GroupedAttributes, ProjectionHead};
use hvcm::density::{ClassModel, GroupGaussian, RidgePolicy};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `A Aᵀ + I` for a random square `A`.
fn random_spd(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| normal(rng));
    let s = &a * a.transpose() + DMatrix::identity(dim, dim);
    (0..dim * dim).map(|k| s[(k / dim, k % dim)]).collect()
}

fn explicit_inverse(sigma: &[f64], dim: usize, ridge: f64) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(dim, dim, sigma) + DMatrix::identity(dim, dim) * ridge;
    m.try_inverse().expect("invertible")
}

#[test]
fn mahalanobis_matches_explicit_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..200 {
        let dim = 1 + trial % 8;
        let sigma = random_spd(dim, &mut rng);
        let mean: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let ridge = 1e-3 * rng.random::<f64>();
        let comp = GroupGaussian::new(mean.clone(), sigma.clone(), ridge).unwrap();
        let x: Vec<f64> = (0..dim).map(|_| 3.0 * normal(&mut rng)).collect();
        let diff = DVector::from_iterator(dim, x.iter().zip(&mean).map(|(a, b)| a - b));
        let inv = explicit_inverse(&sigma, dim, ridge);
        let oracle = -(diff.transpose() * inv * &diff)[(0, 0)];
        let got = comp.mahalanobis(&x).unwrap();
        assert!(rel(got, oracle) < 1e-9, "dim {dim}: {got} vs {oracle}");
    }
}

#[test]
fn log_pdf_matches_determinant_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..100 {
        let dim = 1 + trial % 6;
        let sigma = random_spd(dim, &mut rng);
        let mean: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let comp = GroupGaussian::new(mean.clone(), sigma.clone(), 0.0).unwrap();
        let x: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let m = DMatrix::from_row_slice(dim, dim, &sigma);
        let diff = DVector::from_iterator(dim, x.iter().zip(&mean).map(|(a, b)| a - b));
        let quad = (diff.transpose() * m.clone().try_inverse().unwrap() * &diff)[(0, 0)];
        let oracle = -0.5 * (dim as f64 * std::f64::consts::TAU.ln() + m.determinant().ln() + quad);
        assert!(rel(comp.log_pdf(&x).unwrap(), oracle) < 1e-9);
    }
}

#[test]
fn fitted_factor_reconstructs_loaded_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..50 {
        let dim = 2 + trial % 5;
        let n = 3 + trial;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| normal(&mut rng)).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let comp = GroupGaussian::fit(&refs, &RidgePolicy::default()).unwrap();
        let sigma = comp.sigma();
        let rebuilt = comp.chol().reconstruct();
        for i in 0..dim {
            assert!(comp.chol().diag(i) > 0.0);
            for j in 0..dim {
                assert!(rel(sigma[i * dim + j], sigma[j * dim + i]) <= 1e-10);
                let target = sigma[i * dim + j] + if i == j { comp.ridge() } else { 0.0 };
                assert!((rebuilt[i * dim + j] - target).abs() <= 1e-8 * target.abs().max(1.0));
            }
        }
    }
}

#[test]
fn known_gaussian_recovered_within_standard_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // x = L z with L = [[2, 0], [1.5, 0.5]] gives Σ = [[4, 3], [3, 2.5]]
    let mu = [1.0, -2.0];
    let sigma = [4.0, 3.0, 3.0, 2.5];
    let n = 1000;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let (z0, z1) = (normal(&mut rng), normal(&mut rng));
            vec![mu[0] + 2.0 * z0, mu[1] + 1.5 * z0 + 0.5 * z1]
        })
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let comp = GroupGaussian::fit(&refs, &RidgePolicy::Fixed { value: 0.0 }).unwrap();
    let nf = n as f64;
    for i in 0..2 {
        let se = (sigma[i * 2 + i] / nf).sqrt();
        assert!((comp.mean()[i] - mu[i]).abs() < 3.0 * se);
    }
    for i in 0..2 {
        for j in 0..2 {
            // Var of a sample covariance entry: (σ_ij² + σ_ii σ_jj) / (n − 1)
            let var = (sigma[i * 2 + j].powi(2) + sigma[i * 2 + i] * sigma[j * 2 + j]) / (nf - 1.0);
            assert!((comp.sigma()[i * 2 + j] - sigma[i * 2 + j]).abs() < 3.0 * var.sqrt());
        }
    }
}

#[test]
fn projection_matches_nalgebra_matvec() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for (q, d) in [(1, 1), (3, 7), (16, 4), (33, 64)] {
        let head = ProjectionHead::random(q, d, &mut rng);
        let z: Vec<f64> = (0..q).map(|_| normal(&mut rng)).collect();
        let w = DMatrix::from_row_slice(d, q, head.weight());
        let oracle = w * DVector::from_column_slice(&z) + DVector::from_column_slice(head.bias());
        let got = head.project(&z).unwrap();
        for (g, o) in got.iter().zip(oracle.iter()) {
            assert!(rel(*g, *o) <= 1e-12 || (g - o).abs() <= 1e-14);
        }
    }
}

#[test]
fn single_group_class_score_is_classical_mahalanobis() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let dim = 5;
    let rows: Vec<Vec<f64>> = (0..60)
        .map(|_| (0..dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let attrs: Vec<GroupedAttributes> = rows
        .iter()
        .map(|r| GroupedAttributes::group(r, 1).unwrap())
        .collect();
    let ridge = 1e-4;
    let cm = ClassModel::fit(0, &attrs, &[1.0], &RidgePolicy::Fixed { value: ridge }).unwrap();
    let comp = &cm.components[0];
    let inv = explicit_inverse(comp.sigma(), dim, ridge);
    let mean = DVector::from_column_slice(comp.mean());
    for _ in 0..50 {
        let x: Vec<f64> = (0..dim).map(|_| 2.0 * normal(&mut rng)).collect();
        let diff = DVector::from_column_slice(&x) - &mean;
        let oracle = -(diff.transpose() * &inv * &diff)[(0, 0)];
        let got = cm.score(&GroupedAttributes::group(&x, 1).unwrap()).unwrap();
        assert!(rel(got, oracle) < 1e-9);
    }
}

proptest! {
    #[test]
    fn mahalanobis_nonpositive_and_zero_at_mean(
        seed in any::<u64>(),
        dim in 1usize..6,
        scale in 1e-3f64..1e3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = random_spd(dim, &mut rng);
        let mean: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let comp = GroupGaussian::new(mean.clone(), sigma, 1e-6).unwrap();
        prop_assert_eq!(comp.mahalanobis(&mean).unwrap(), 0.0);
        let x: Vec<f64> = mean.iter().map(|m| m + scale * normal(&mut rng)).collect();
        let m = comp.mahalanobis(&x).unwrap();
        prop_assert!(m <= 0.0);
        if x != mean {
            prop_assert!(m < 0.0);
        }
    }

    #[test]
    fn g1_score_and_log_density_share_ordering(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 3;
        let rows: Vec<GroupedAttributes> = (0..30)
            .map(|_| {
                let r: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
                GroupedAttributes::group(&r, 1).unwrap()
            })
            .collect();
        let cm = ClassModel::fit(0, &rows, &[1.0], &RidgePolicy::default()).unwrap();
        let probes: Vec<GroupedAttributes> = (0..20)
            .map(|_| {
                let r: Vec<f64> = (0..dim).map(|_| 2.0 * normal(&mut rng)).collect();
                GroupedAttributes::group(&r, 1).unwrap()
            })
            .collect();
        let by = |f: &dyn Fn(&GroupedAttributes) -> f64| {
            let mut idx: Vec<usize> = (0..probes.len()).collect();
            idx.sort_by(|&a, &b| f(&probes[a]).total_cmp(&f(&probes[b])));
            idx
        };
        let s = by(&|p| cm.score(p).unwrap());
        let l = by(&|p| cm.log_density(p).unwrap());
        prop_assert_eq!(s, l);
    }
}
