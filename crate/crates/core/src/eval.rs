//! Detection metrics: AUROC, FPR at a target TPR, threshold sweeps,
//! threshold calibration, cosine-classifier accuracy, and near-to-far
//! ranking of candidate OOD classes.
//!
//! Higher scores mean "more in-distribution" and InD is the positive class
//! throughout; a sample is accepted as InD iff `score ≥ γ`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::HvcmModel;
use crate::error::{check_dim, HvcmError, Result};
use crate::linalg::cosine;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    ind: Vec<f64>,
    ood: Vec<f64>,
}

impl ScoreSet {
    pub fn new(ind: Vec<f64>, ood: Vec<f64>) -> Result<Self> {
        if ind.is_empty() || ood.is_empty() {
            return Err(HvcmError::invalid(
                "scores",
                format!("need both populations (n_ind = {}, n_ood = {})", ind.len(), ood.len()),
            ));
        }
        if ind.iter().chain(&ood).any(|s| !s.is_finite()) {
            return Err(HvcmError::invalid("scores", "scores must be finite"));
        }
        Ok(ScoreSet { ind, ood })
    }

    pub fn from_entries(entries: &[(f64, bool)]) -> Result<Self> {
        let ind = entries.iter().filter(|e| e.1).map(|e| e.0).collect();
        let ood = entries.iter().filter(|e| !e.1).map(|e| e.0).collect();
        Self::new(ind, ood)
    }

    pub fn ind(&self) -> &[f64] {
        &self.ind
    }

    pub fn ood(&self) -> &[f64] {
        &self.ood
    }

    pub fn n_ind(&self) -> usize {
        self.ind.len()
    }

    pub fn n_ood(&self) -> usize {
        self.ood.len()
    }

    pub fn entries(&self) -> Vec<(f64, bool)> {
        self.ind
            .iter()
            .map(|&s| (s, true))
            .chain(self.ood.iter().map(|&s| (s, false)))
            .collect()
    }

    fn rates_at(&self, gamma: f64) -> (f64, f64) {
        let tp = self.ind.iter().filter(|&&s| s >= gamma).count();
        let fp = self.ood.iter().filter(|&&s| s >= gamma).count();
        (tp as f64 / self.n_ind() as f64, fp as f64 / self.n_ood() as f64)
    }
}

/// Rank statistic `(#{InD > OOD} + ½ #{ties}) / (n_ind · n_ood)`, computed
/// exactly in `O(n log n)` with integer counts.
pub fn auroc(s: &ScoreSet) -> f64 {
    let mut all = s.entries();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // doubled numerator: 2 per strictly-lower OOD, 1 per tied OOD
    let mut doubled: u128 = 0;
    let mut ood_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let ind_here = all[i..j].iter().filter(|e| e.1).count() as u128;
        let ood_here = (j - i) as u128 - ind_here;
        doubled += ind_here * (2 * ood_below + ood_here);
        ood_below += ood_here;
        i = j;
    }
    (doubled as f64 * 0.5) / (s.n_ind() as f64 * s.n_ood() as f64)
}

/// Threshold and false-positive rate at the largest observed InD score
/// whose TPR reaches `tpr_target`.
pub fn fpr_at_tpr_with_threshold(s: &ScoreSet, tpr_target: f64) -> Result<(f64, f64)> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(HvcmError::invalid("tpr", format!("{tpr_target} outside (0, 1]")));
    }
    let mut desc = s.ind.clone();
    desc.sort_by(|a, b| b.total_cmp(a));
    let n = desc.len();
    // smallest k with k / n ≥ target
    let k = (1..=n).find(|&k| k as f64 / n as f64 >= tpr_target).unwrap_or(n);
    let gamma = desc[k - 1];
    let fp = s.ood.iter().filter(|&&o| o >= gamma).count();
    Ok((gamma, fp as f64 / s.n_ood() as f64))
}

pub fn fpr_at_tpr(s: &ScoreSet, tpr_target: f64) -> Result<f64> {
    Ok(fpr_at_tpr_with_threshold(s, tpr_target)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Balanced accuracy `(TPR + TNR) / 2`.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn best(&self) -> SweepPoint {
        *self
            .points
            .iter()
            .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy))
            .expect("sweep curves are never empty")
    }
}

/// `steps` evenly spaced thresholds from the maximum score down to the
/// minimum score, both included. A constant score range yields one point.
pub fn sweep(s: &ScoreSet, steps: usize) -> Result<SweepCurve> {
    if steps < 2 {
        return Err(HvcmError::invalid("steps", format!("{steps} < 2")));
    }
    let all = s.ind.iter().chain(&s.ood);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let point = |gamma: f64| {
        let (tpr, fpr) = s.rates_at(gamma);
        SweepPoint {
            threshold: gamma,
            tpr,
            fpr,
            accuracy: 0.5 * (tpr + 1.0 - fpr),
        }
    };
    if lo == hi {
        return Ok(SweepCurve { points: vec![point(lo)] });
    }
    let span = hi - lo;
    let points = (0..steps)
        .map(|k| {
            let gamma = if k == steps - 1 {
                lo
            } else {
                hi - span * (k as f64 / (steps - 1) as f64)
            };
            point(gamma)
        })
        .collect();
    Ok(SweepCurve { points })
}

pub const MIN_CALIBRATION_SCORES: usize = 20;

/// Empirical `(1 − tpr_target)` quantile of InD scores: the
/// `ceil((1 − t) n)`-th lowest score (the minimum when that is 0).
pub fn calibrate_threshold(ind_scores: &[f64], tpr_target: f64) -> Result<f64> {
    if ind_scores.len() < MIN_CALIBRATION_SCORES {
        return Err(HvcmError::invalid(
            "scores",
            format!("need at least {MIN_CALIBRATION_SCORES} InD scores, got {}", ind_scores.len()),
        ));
    }
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(HvcmError::invalid("tpr", format!("{tpr_target} outside (0, 1]")));
    }
    if ind_scores.iter().any(|s| !s.is_finite()) {
        return Err(HvcmError::invalid("scores", "scores must be finite"));
    }
    let mut asc = ind_scores.to_vec();
    asc.sort_by(f64::total_cmp);
    let rank = ((1.0 - tpr_target) * asc.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(asc[rank.min(asc.len()) - 1])
}

/// Fraction of `attributes` (raw length-`d` vectors) whose cosine
/// classification equals the label.
pub fn ind_accuracy(model: &HvcmModel, attributes: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_dim(attributes.len(), labels.len())?;
    if attributes.is_empty() {
        return Err(HvcmError::invalid("attributes", "empty input"));
    }
    let c = model.class_count();
    let mut correct = 0usize;
    for (a, &l) in attributes.iter().zip(labels) {
        if l >= c {
            return Err(HvcmError::invalid("labels", format!("label {l} ≥ class count {c}")));
        }
        if model.classify_cosine(a)? == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / attributes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRanking {
    /// Candidate classes sorted near → far with their mean cosine distance.
    pub order: Vec<(i64, f64)>,
    pub bins: Vec<Vec<i64>>,
}

/// Scores each candidate by its mean `1 − cos` to the InD centers, sorts
/// ascending (ties by class id), and cuts the order into `bins` contiguous
/// bins of `n / bins` classes with the remainder going to the last bin.
pub fn rank_ood_classes(
    ind_centers: &[Vec<f64>],
    candidates: &BTreeMap<i64, Vec<f64>>,
    bins: usize,
) -> Result<OodRanking> {
    if bins == 0 {
        return Err(HvcmError::invalid("bins", "need at least one bin"));
    }
    if ind_centers.is_empty() {
        return Err(HvcmError::invalid("centers", "no in-distribution centers"));
    }
    if bins > candidates.len() {
        return Err(HvcmError::invalid(
            "bins",
            format!("{bins} bins for {} candidate classes", candidates.len()),
        ));
    }
    let zero = || HvcmError::invalid("centers", "zero-norm center vector");
    let mut order = candidates
        .iter()
        .map(|(&class, v)| {
            let mut total = 0.0;
            for c in ind_centers {
                check_dim(c.len(), v.len())?;
                total += 1.0 - cosine(v, c).ok_or_else(zero)?;
            }
            Ok((class, total / ind_centers.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let size = order.len() / bins;
    let mut out: Vec<Vec<i64>> = Vec::with_capacity(bins);
    for b in 0..bins {
        let end = if b == bins - 1 { order.len() } else { (b + 1) * size };
        out.push(order[b * size..end].iter().map(|e| e.0).collect());
    }
    Ok(OodRanking { order, bins: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub fpr95: f64,
    pub n_ind: usize,
    pub n_ood: usize,
    /// Threshold at which `fpr95` is measured.
    pub threshold: f64,
    pub sweep: Vec<SweepPoint>,
}

pub fn evaluate(s: &ScoreSet, tpr_target: f64, sweep_steps: usize) -> Result<EvalReport> {
    let (threshold, fpr95) = fpr_at_tpr_with_threshold(s, tpr_target)?;
    Ok(EvalReport {
        auroc: auroc(s),
        fpr95,
        n_ind: s.n_ind(),
        n_ood: s.n_ood(),
        threshold,
        sweep: sweep(s, sweep_steps)?.points,
    })
}

/// CSV dump with header `score,is_ind`.
pub fn write_score_dump(s: &ScoreSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("score,is_ind\n");
    for (score, is_ind) in s.entries() {
        writeln!(out, "{score},{}", u8::from(is_ind)).unwrap();
    }
    crate::io_util::write_atomic(path, out.as_bytes())
}

/// Reads the `score` column of a CSV with a header row.
pub fn read_score_column(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path.as_ref())
        .map_err(|e| HvcmError::Malformed(format!("{}: {e}", path.as_ref().display())))?;
    let headers = reader
        .headers()
        .map_err(|e| HvcmError::Malformed(e.to_string()))?
        .clone();
    let col = headers
        .iter()
        .position(|h| h == "score")
        .ok_or_else(|| HvcmError::Malformed("no `score` column".into()))?;
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| HvcmError::Malformed(e.to_string()))?;
            let raw = rec.get(col).unwrap_or("");
            raw.parse::<f64>()
                .map_err(|_| HvcmError::Malformed(format!("row {i}: bad score `{raw}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(s: &ScoreSet) -> f64 {
        let mut num = 0.0;
        for &i in s.ind() {
            for &o in s.ood() {
                if i > o {
                    num += 1.0;
                } else if i == o {
                    num += 0.5;
                }
            }
        }
        num / (s.n_ind() as f64 * s.n_ood() as f64)
    }

    #[test]
    fn auroc_extremes() {
        let s = ScoreSet::new(vec![5.0, 6.0, 7.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(auroc(&s), 1.0);
        let s = ScoreSet::new(vec![3.0; 4], vec![3.0; 7]).unwrap();
        assert_eq!(auroc(&s), 0.5);
        assert!(ScoreSet::new(vec![], vec![1.0]).is_err());
        assert!(ScoreSet::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn fpr_handmade() {
        let s = ScoreSet::new(vec![3.0, 2.0, 1.0], vec![2.5, 0.0]).unwrap();
        let (gamma, fpr) = fpr_at_tpr_with_threshold(&s, 0.95).unwrap();
        assert_eq!(gamma, 1.0);
        assert_eq!(fpr, 0.5);
        let sep = ScoreSet::new(vec![10.0, 11.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(fpr_at_tpr(&sep, 0.95).unwrap(), 0.0);
        assert!(fpr_at_tpr(&sep, 0.0).is_err());
    }

    #[test]
    fn fpr_indistinguishable() {
        let scores: Vec<f64> = (0..200).map(|i| i as f64 * 0.37).collect();
        let s = ScoreSet::new(scores.clone(), scores).unwrap();
        let fpr = fpr_at_tpr(&s, 0.95).unwrap();
        assert!((fpr - 0.95).abs() <= 1.0 / 200.0);
    }

    #[test]
    fn sweep_endpoints_and_monotone() {
        let s = ScoreSet::new(vec![0.5, 0.9, 0.7, 0.4], vec![0.1, 0.3, 0.0]).unwrap();
        let two = sweep(&s, 2).unwrap();
        assert_eq!(two.points.len(), 2);
        assert_eq!(two.points[0].threshold, 0.9);
        assert!(two.points[0].fpr <= 1.0 / 3.0);
        assert_eq!(two.points[1].threshold, 0.0);
        assert_eq!(two.points[1].tpr, 1.0);
        let many = sweep(&s, 50).unwrap();
        for w in many.points.windows(2) {
            assert!(w[1].threshold < w[0].threshold);
            assert!(w[1].tpr >= w[0].tpr);
        }
        assert!(many.best().accuracy >= 0.99);
        let flat = ScoreSet::new(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(sweep(&flat, 10).unwrap().points.len(), 1);
        assert!(sweep(&s, 1).is_err());
    }

    #[test]
    fn calibration_quantiles() {
        let scores: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        assert_eq!(calibrate_threshold(&scores, 0.95).unwrap(), 5.0);
        assert_eq!(calibrate_threshold(&scores, 1.0).unwrap(), 1.0);
        assert!(calibrate_threshold(&scores[..19], 0.95).is_err());
        let big: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64 * 0.01).collect();
        let gamma = calibrate_threshold(&big, 0.95).unwrap();
        let accepted = big.iter().filter(|&&s| s >= gamma).count() as f64 / 1000.0;
        assert!((0.94..=0.96).contains(&accepted), "{accepted}");
    }

    #[test]
    fn ranking_examples() {
        let ind = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let mut cands = BTreeMap::new();
        cands.insert(7, vec![1.0, 0.0, 0.0]);
        cands.insert(3, vec![0.0, 0.0, 2.0]);
        cands.insert(5, vec![1.0, 1.0, 0.0]);
        let r = rank_ood_classes(&ind, &cands, 1).unwrap();
        assert_eq!(r.bins, vec![vec![5, 7, 3]]);
        assert_eq!(r.order[2], (3, 1.0));
        let r3 = rank_ood_classes(&ind, &cands, 3).unwrap();
        assert_eq!(r3.bins, vec![vec![5], vec![7], vec![3]]);
        cands.insert(9, vec![0.0; 3]);
        assert!(rank_ood_classes(&ind, &cands, 2).is_err());
    }

    #[test]
    fn ranking_planted_angles() {
        let ind = vec![vec![1.0, 0.0]];
        let cands: BTreeMap<i64, Vec<f64>> = (0..9)
            .map(|k| {
                // class ids deliberately not in angle order
                let id = (k * 4) % 9;
                let theta = (k as f64 + 1.0) * 0.15;
                (id as i64, vec![theta.cos(), theta.sin()])
            })
            .collect();
        let r = rank_ood_classes(&ind, &cands, 9).unwrap();
        let expected: Vec<Vec<i64>> = (0..9).map(|k| vec![((k * 4) % 9) as i64]).collect();
        assert_eq!(r.bins, expected);
        for (k, (_, dist)) in r.order.iter().enumerate() {
            let theta = (k as f64 + 1.0) * 0.15;
            assert!((dist - (1.0 - theta.cos())).abs() < 1e-12);
        }
    }

    #[test]
    fn score_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.csv");
        let s = ScoreSet::new(vec![-0.1, -1e-300, 0.3333333333333333], vec![-7.25]).unwrap();
        write_score_dump(&s, &path).unwrap();
        let col = read_score_column(&path).unwrap();
        assert_eq!(col, vec![-0.1, -1e-300, 0.3333333333333333, -7.25]);
    }

    fn blob_model() -> (HvcmModel, crate::synthetic::SyntheticSplit) {
        use crate::attributes::ProjectionHead;
        use crate::density::{Embedding, ModelConfig};
        let task = crate::synthetic::separable_blobs(&Default::default(), 8).unwrap();
        let cfg = ModelConfig { groups: 1, ..Default::default() };
        let model = HvcmModel::fit_dataset(&task.train, None, cfg, Embedding::from_head(ProjectionHead::identity(2))).unwrap();
        (model, task)
    }

    #[test]
    fn accuracy_examples() {
        let (model, task) = blob_model();
        let centers = model.class_centers();
        assert_eq!(ind_accuracy(&model, &centers, &[0, 1, 2]).unwrap(), 1.0);
        let held: Vec<Vec<f64>> = (0..task.test_ind.len()).map(|i| task.test_ind.row_f64(i)).collect();
        let labels: Vec<usize> = (0..held.len()).map(|i| task.test_ind.label(i).unwrap() as usize).collect();
        assert!(ind_accuracy(&model, &held, &labels).unwrap() >= 0.99);
        // shuffled labels fall to chance
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = labels.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let chance = ind_accuracy(&model, &held, &shuffled).unwrap();
        assert!((chance - 1.0 / 3.0).abs() < 0.06, "{chance}");
        assert!(ind_accuracy(&model, &[], &[]).is_err());
        assert!(ind_accuracy(&model, &centers[..1], &[3]).is_err());
    }

    #[test]
    fn calibrated_threshold_generalizes() {
        let (model, task) = blob_model();
        let scores: Vec<f64> = (0..task.test_ind.len())
            .map(|i| model.score_feature(&task.test_ind.row_f64(i)).unwrap().score)
            .collect();
        let (cal, held) = scores.split_at(300);
        let mut model = model;
        model.threshold = Some(calibrate_threshold(cal, 0.95).unwrap());
        let accepted = held
            .iter()
            .filter(|&&s| model.detect(s).unwrap() == crate::density::Decision::InD)
            .count() as f64
            / held.len() as f64;
        assert!((accepted - 0.95).abs() <= 2.0 / (held.len() as f64).sqrt(), "{accepted}");
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise(
            ind in prop::collection::vec(-20i32..20, 1..60),
            ood in prop::collection::vec(-20i32..20, 1..60),
        ) {
            let s = ScoreSet::new(
                ind.iter().map(|&v| v as f64 * 0.5).collect(),
                ood.iter().map(|&v| v as f64 * 0.5).collect(),
            ).unwrap();
            prop_assert_eq!(auroc(&s), pairwise(&s));
        }

        #[test]
        fn auroc_invariant_under_monotone_transform(
            ind in prop::collection::vec(-5f64..5.0, 1..40),
            ood in prop::collection::vec(-5f64..5.0, 1..40),
        ) {
            let s = ScoreSet::new(ind.clone(), ood.clone()).unwrap();
            let f = |v: &f64| v.exp() * 3.0 + 1.0;
            let t = ScoreSet::new(ind.iter().map(f).collect(), ood.iter().map(f).collect()).unwrap();
            prop_assert_eq!(auroc(&s), auroc(&t));
            let swapped = ScoreSet::new(
                ood.iter().map(|v| -v).collect(),
                ind.iter().map(|v| -v).collect(),
            ).unwrap();
            prop_assert_eq!(auroc(&s), auroc(&swapped));
        }

        #[test]
        fn fpr_nonincreasing_under_separation(
            ind in prop::collection::vec(-5f64..5.0, 1..40),
            ood in prop::collection::vec(-5f64..5.0, 1..40),
            shift in 0f64..3.0,
        ) {
            let s = ScoreSet::new(ind.clone(), ood.clone()).unwrap();
            let shifted = ScoreSet::new(ind.iter().map(|v| v + shift).collect(), ood).unwrap();
            prop_assert!(fpr_at_tpr(&shifted, 0.95).unwrap() <= fpr_at_tpr(&s, 0.95).unwrap());
        }

        #[test]
        fn ranking_ignores_center_scale(
            scales in prop::collection::vec(0.01f64..100.0, 6),
        ) {
            let ind = vec![vec![1.0, 0.2, 0.0], vec![0.1, 1.0, 0.3]];
            let base: Vec<Vec<f64>> = (0..6)
                .map(|k| vec![(k as f64 * 0.7).cos(), (k as f64 * 0.7).sin(), 0.1 * k as f64])
                .collect();
            let plain: BTreeMap<i64, Vec<f64>> = base.iter().cloned().enumerate().map(|(i, v)| (i as i64, v)).collect();
            let scaled: BTreeMap<i64, Vec<f64>> = base
                .iter()
                .zip(&scales)
                .enumerate()
                .map(|(i, (v, s))| (i as i64, v.iter().map(|x| x * s).collect()))
                .collect();
            let a = rank_ood_classes(&ind, &plain, 2).unwrap();
            let b = rank_ood_classes(&ind, &scaled, 2).unwrap();
            prop_assert_eq!(a.bins, b.bins);
        }
    }
}
