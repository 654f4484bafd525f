use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::augment::augment_views;
use super::config::TrainConfig;
use super::encoder::Encoder;
use super::loss::{divergence_grad, kd_loss_grad, softmax_backward};
use crate::attributes::{softmax, StatsMode};
use crate::density::{Embedding, HvcmModel, ModelConfig, RidgePolicy};
use crate::error::{check_dim, HvcmError, Result};
use crate::features::FeatureDataset;

/// Learnable class centers (as pre-softmax logits), EMA group weights, and
/// the linear head predicting per-sample group weights from attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    pub classes: usize,
    pub groups: usize,
    pub width: usize,
    /// `classes x groups x width`.
    pub centers: Vec<f64>,
    /// `classes x groups`, every row on the simplex.
    pub weights: Vec<f64>,
    /// `groups x (groups * width)` weights followed by `groups` biases.
    pub weight_head: Vec<f64>,
}

impl CenterBank {
    pub fn attr_dim(&self) -> usize {
        self.groups * self.width
    }

    pub fn center(&self, class: usize, group: usize) -> &[f64] {
        let start = (class * self.groups + group) * self.width;
        &self.centers[start..start + self.width]
    }

    /// Softmax-normalized centers of one class.
    pub fn normalized_centers(&self, class: usize) -> Vec<Vec<f64>> {
        (0..self.groups).map(|g| softmax(self.center(class, g), 1.0)).collect()
    }

    pub fn weight_row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.groups..(class + 1) * self.groups]
    }

    /// Per-sample group weights `softmax(W a + b)`.
    pub fn sample_weights(&self, attribute: &[f64]) -> Vec<f64> {
        softmax(&self.head_logits(attribute), 1.0)
    }

    fn head_logits(&self, attribute: &[f64]) -> Vec<f64> {
        let d = self.attr_dim();
        let (w, b) = self.weight_head.split_at(self.groups * d);
        w.chunks_exact(d)
            .zip(b)
            .map(|(row, bias)| row.iter().zip(attribute).map(|(x, y)| x * y).sum::<f64>() + bias)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &TrainConfig, t: u64) {
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            if lr != 0.0 {
                let m_hat = self.m[i] / c1;
                let v_hat = self.v[i] / c2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Everything the training loop owns between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: Encoder,
    pub teacher: Encoder,
    pub bank: CenterBank,
    pub step: u64,
    rng: ChaCha8Rng,
    adam_encoder: Adam,
    adam_centers: Adam,
    adam_head: Adam,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.student == other.student
            && self.teacher == other.teacher
            && self.bank == other.bank
            && self.step == other.step
            && self.rng == other.rng
            && self.adam_encoder == other.adam_encoder
            && self.adam_centers == other.adam_centers
            && self.adam_head == other.adam_head
    }
}

/// Scaled Gaussian initialization; the teacher starts as an exact copy of
/// the student and stored group weights start uniform.
pub fn init_state(cfg: &TrainConfig, input_dim: usize, classes: usize, mut rng: ChaCha8Rng) -> Result<TrainState> {
    cfg.validate()?;
    if input_dim == 0 || classes == 0 {
        return Err(HvcmError::invalid("dims", "input_dim and classes must be ≥ 1"));
    }
    let mut widths = vec![input_dim];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(cfg.attr_dim);
    let student = Encoder::random(widths, &mut rng)?;
    let (g, w, d) = (cfg.groups, cfg.group_width(), cfg.attr_dim);
    let centers: Vec<f64> = (0..classes * g * w).map(|_| rng.sample(StandardNormal)).collect();
    let head_scale = 1.0 / (d as f64).sqrt();
    let mut weight_head: Vec<f64> = (0..g * d).map(|_| head_scale * rng.sample::<f64, _>(StandardNormal)).collect();
    weight_head.extend(std::iter::repeat_n(0.0, g));
    let bank = CenterBank {
        classes,
        groups: g,
        width: w,
        centers,
        weights: vec![1.0 / g as f64; classes * g],
        weight_head,
    };
    Ok(TrainState {
        teacher: student.clone(),
        adam_encoder: Adam::new(student.params().len()),
        adam_centers: Adam::new(bank.centers.len()),
        adam_head: Adam::new(bank.weight_head.len()),
        student,
        bank,
        step: 0,
        rng,
    })
}

/// A batch whose views are already materialized, so the loss is a
/// deterministic function of the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    /// `views[sample][view]` is an encoder input.
    pub views: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<i32>,
}

/// Multipliers of the three objective terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub kd: f64,
    pub align: f64,
    pub weighted: f64,
}

impl TermWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        TermWeights {
            kd: 1.0,
            align: cfg.alpha,
            weighted: cfg.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<f64>,
    pub centers: Vec<f64>,
    pub weight_head: Vec<f64>,
}

impl Gradients {
    fn zeros(state: &TrainState) -> Self {
        Gradients {
            encoder: vec![0.0; state.student.params().len()],
            centers: vec![0.0; state.bank.centers.len()],
            weight_head: vec![0.0; state.bank.weight_head.len()],
        }
    }

    fn add(mut self, other: &Gradients) -> Self {
        for (a, b) in [
            (&mut self.encoder, &other.encoder),
            (&mut self.centers, &other.centers),
            (&mut self.weight_head, &other.weight_head),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self
    }

    fn scale(&mut self, s: f64) {
        for v in [&mut self.encoder, &mut self.centers, &mut self.weight_head] {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.encoder
            .iter()
            .chain(&self.centers)
            .chain(&self.weight_head)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Batch-averaged loss terms (unweighted) and the weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub kd: f64,
    pub align: f64,
    pub weighted: f64,
    pub grads: Gradients,
    /// Mean predicted group weights per sample, averaged over views.
    pub sample_weights: Vec<Vec<f64>>,
}

struct SampleLoss {
    kd: f64,
    align: f64,
    weighted: f64,
    grads: Gradients,
    weights: Vec<f64>,
}

/// Full objective with analytic gradients, batch-averaged. KD is averaged
/// over ordered view pairs `(teacher j, student k), j ≠ k`; the center terms
/// are averaged over student views.
pub fn total_loss(batch: &ViewBatch, state: &TrainState, cfg: &TrainConfig) -> Result<LossOutput> {
    loss_with_terms(batch, state, cfg, TermWeights::from_config(cfg), true)
}

pub fn loss_with_terms(
    batch: &ViewBatch,
    state: &TrainState,
    cfg: &TrainConfig,
    terms: TermWeights,
    deterministic: bool,
) -> Result<LossOutput> {
    check_dim(batch.views.len(), batch.labels.len())?;
    if batch.views.is_empty() {
        return Err(HvcmError::invalid("batch", "empty batch"));
    }
    for &label in &batch.labels {
        if label < 0 || label as usize >= state.bank.classes {
            return Err(HvcmError::invalid(
                "batch",
                format!("label {label} is not a trained class (0..{})", state.bank.classes),
            ));
        }
    }
    let per_sample = |i: usize| sample_loss(&batch.views[i], batch.labels[i] as usize, state, cfg, terms);
    let parts: Vec<SampleLoss> = if deterministic {
        (0..batch.views.len()).map(per_sample).collect::<Result<_>>()?
    } else {
        (0..batch.views.len()).into_par_iter().map(per_sample).collect::<Result<_>>()?
    };
    let n = parts.len() as f64;
    let zero = Gradients::zeros(state);
    let mut grads = if deterministic {
        parts.iter().fold(zero, |acc, p| acc.add(&p.grads))
    } else {
        parts
            .par_iter()
            .fold(|| Gradients::zeros(state), |acc, p| acc.add(&p.grads))
            .reduce(|| Gradients::zeros(state), |a, b| a.add(&b))
    };
    grads.scale(1.0 / n);
    let kd = parts.iter().map(|p| p.kd).sum::<f64>() / n;
    let align = parts.iter().map(|p| p.align).sum::<f64>() / n;
    let weighted = parts.iter().map(|p| p.weighted).sum::<f64>() / n;
    Ok(LossOutput {
        total: terms.kd * kd + terms.align * align + terms.weighted * weighted,
        kd,
        align,
        weighted,
        grads,
        sample_weights: parts.into_iter().map(|p| p.weights).collect(),
    })
}

fn sample_loss(
    views: &[Vec<f64>],
    class: usize,
    state: &TrainState,
    cfg: &TrainConfig,
    terms: TermWeights,
) -> Result<SampleLoss> {
    let v = views.len();
    if v == 0 {
        return Err(HvcmError::invalid("views", "sample has no views"));
    }
    let bank = &state.bank;
    let (g, w) = (bank.groups, bank.width);
    let d = bank.attr_dim();
    let mut grads = Gradients::zeros(state);

    let traces = views
        .iter()
        .map(|x| state.student.forward_trace(x))
        .collect::<Result<Vec<_>>>()?;
    let teacher_out = views
        .iter()
        .map(|x| state.teacher.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let mut grad_attr = vec![vec![0.0; d]; v];

    let mut kd = 0.0;
    if v >= 2 {
        let pairs = (v * (v - 1)) as f64;
        for (k, trace) in traces.iter().enumerate() {
            for (j, t) in teacher_out.iter().enumerate() {
                if j == k {
                    continue;
                }
                let (value, grad) = kd_loss_grad(trace.output(), t, cfg.tau_s, cfg.tau_t)?;
                kd += value / pairs;
                grad_attr[k]
                    .iter_mut()
                    .zip(&grad)
                    .for_each(|(acc, gr)| *acc += terms.kd * gr / pairs);
            }
        }
    }

    let centers = bank.normalized_centers(class);
    let (mut align, mut weighted) = (0.0, 0.0);
    let mut mean_weights = vec![0.0; g];
    let inv_v = 1.0 / v as f64;
    for (k, trace) in traces.iter().enumerate() {
        let a = trace.output();
        let logits = bank.head_logits(a);
        let sw = softmax(&logits, 1.0);
        mean_weights.iter_mut().zip(&sw).for_each(|(m, s)| *m += s * inv_v);
        let mut grad_sw = vec![0.0; g];
        for i in 0..g {
            let p = softmax(&a[i * w..(i + 1) * w], 1.0);
            let m = &centers[i];
            let (d_align, dp_align, dm_align) = divergence_grad(&p, m, cfg.objective);
            let (d_rev, dm_rev, dp_rev) = divergence_grad(m, &p, cfg.objective);
            align += d_align * inv_v;
            weighted += sw[i] * d_rev * inv_v;
            grad_sw[i] = terms.weighted * d_rev * inv_v;

            let dp: Vec<f64> = dp_align
                .iter()
                .zip(&dp_rev)
                .map(|(x, y)| (terms.align * x + terms.weighted * sw[i] * y) * inv_v)
                .collect();
            let dm: Vec<f64> = dm_align
                .iter()
                .zip(&dm_rev)
                .map(|(x, y)| (terms.align * x + terms.weighted * sw[i] * y) * inv_v)
                .collect();
            let dz = softmax_backward(&p, &dp, 1.0);
            grad_attr[k][i * w..(i + 1) * w]
                .iter_mut()
                .zip(&dz)
                .for_each(|(acc, x)| *acc += x);
            let du = softmax_backward(m, &dm, 1.0);
            let start = (class * g + i) * w;
            grads.centers[start..start + w]
                .iter_mut()
                .zip(&du)
                .for_each(|(acc, x)| *acc += x);
        }
        // weight head: logits = W a + b, sw = softmax(logits)
        let dlogits = softmax_backward(&sw, &grad_sw, 1.0);
        let (hw, _) = bank.weight_head.split_at(g * d);
        for (r, &dl) in dlogits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            let row = &mut grads.weight_head[r * d..(r + 1) * d];
            row.iter_mut().zip(a).for_each(|(acc, x)| *acc += dl * x);
            grads.weight_head[g * d + r] += dl;
            grad_attr[k]
                .iter_mut()
                .zip(&hw[r * d..(r + 1) * d])
                .for_each(|(acc, x)| *acc += dl * x);
        }
    }

    for (trace, ga) in traces.iter().zip(&grad_attr) {
        state.student.backward(trace, ga, &mut grads.encoder);
    }
    Ok(SampleLoss {
        kd,
        align,
        weighted,
        grads,
        weights: mean_weights,
    })
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_kd: f64,
    pub loss_align: f64,
    pub loss_weighted: f64,
    pub grad_norm: f64,
    pub weight_entropy: f64,
}

impl TrainState {
    /// Materializes views for `samples` using the state's RNG. With a single
    /// configured view the sample itself is the only view.
    pub fn make_views(&mut self, samples: &[Vec<f64>], cfg: &TrainConfig) -> Result<Vec<Vec<Vec<f64>>>> {
        samples
            .iter()
            .map(|x| {
                if cfg.views == 1 {
                    Ok(vec![x.clone()])
                } else {
                    augment_views(x, cfg.views, cfg.aug_noise, cfg.mask_rate, &mut self.rng)
                }
            })
            .collect()
    }

    /// Mean entropy of the stored group-weight rows.
    pub fn weight_entropy(&self) -> f64 {
        let g = self.bank.groups;
        let rows = self.bank.weights.chunks_exact(g);
        let total: f64 = rows
            .map(|r| -r.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum();
        total / self.bank.classes as f64
    }

    /// Adam on the encoder/head (`γ1`) and centers (`γ2`), EMA of stored
    /// group weights (`γ3`) per class present in the batch, then the teacher
    /// EMA.
    pub fn train_step(
        &mut self,
        samples: &[Vec<f64>],
        labels: &[i32],
        cfg: &TrainConfig,
        deterministic: bool,
    ) -> Result<StepRecord> {
        let views = self.make_views(samples, cfg)?;
        let batch = ViewBatch {
            views,
            labels: labels.to_vec(),
        };
        let out = loss_with_terms(&batch, self, cfg, TermWeights::from_config(cfg), deterministic)?;
        if !out.total.is_finite() {
            return Err(HvcmError::Diverged {
                step: self.step + 1,
                loss: out.total,
            });
        }
        let t = self.step + 1;
        self.adam_encoder.step(self.student.params_mut(), &out.grads.encoder, cfg.gamma1, cfg, t);
        self.adam_head.step(&mut self.bank.weight_head, &out.grads.weight_head, cfg.gamma1, cfg, t);
        self.adam_centers.step(&mut self.bank.centers, &out.grads.centers, cfg.gamma2, cfg, t);

        let g = self.bank.groups;
        for class in 0..self.bank.classes {
            let members: Vec<&Vec<f64>> = labels
                .iter()
                .zip(&out.sample_weights)
                .filter(|(l, _)| **l as usize == class)
                .map(|(_, w)| w)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; g];
            for w in &members {
                mean.iter_mut().zip(w.iter()).for_each(|(m, x)| *m += x);
            }
            let row = &mut self.bank.weights[class * g..(class + 1) * g];
            for (r, m) in row.iter_mut().zip(&mean) {
                *r = (1.0 - cfg.gamma3) * *r + cfg.gamma3 * (m / members.len() as f64);
            }
        }

        let mom = cfg.teacher_momentum;
        let student = self.student.params().to_vec();
        self.teacher
            .params_mut()
            .iter_mut()
            .zip(&student)
            .for_each(|(t, s)| *t = mom * *t + (1.0 - mom) * s);

        self.step = t;
        Ok(StepRecord {
            step: t,
            loss_total: out.total,
            loss_kd: out.kd,
            loss_align: out.align,
            loss_weighted: out.weighted,
            grad_norm: out.grads.norm(),
            weight_entropy: self.weight_entropy(),
        })
    }

    /// Encodes every labeled row with the student and fits the frozen
    /// density model, using the stored EMA weights as group weights.
    pub fn export_to_density(&self, dataset: &FeatureDataset) -> Result<HvcmModel> {
        check_dim(self.student.input_dim(), dataset.dim)?;
        let by_class = dataset.indices_by_class()?;
        if by_class.len() > self.bank.classes {
            return Err(HvcmError::invalid(
                "dataset",
                format!("dataset has {} classes, trainer has {}", by_class.len(), self.bank.classes),
            ));
        }
        if let Some(c) = (0..self.bank.classes).find(|&c| by_class.get(c).is_none_or(Vec::is_empty)) {
            return Err(HvcmError::DegenerateFit {
                class: c,
                reason: "no samples to export".into(),
            });
        }
        let g = self.bank.groups;
        let class_attrs = by_class
            .iter()
            .map(|rows| {
                rows.iter()
                    .map(|&r| StatsMode::Raw.prepare(&self.student.forward(&dataset.row_f64(r))?, g))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<Vec<f64>> = (0..self.bank.classes).map(|c| self.bank.weight_row(c).to_vec()).collect();
        HvcmModel::freeze(
            &class_attrs,
            &weights,
            ModelConfig {
                groups: g,
                ridge_policy: RidgePolicy::default(),
                stats_mode: StatsMode::Raw,
            },
            Embedding::from_encoder(self.student.clone()),
        )
    }
}

/// Trains on every labeled (label ≥ 0) row of `dataset` for `cfg.epochs`
/// epochs, calling `on_step` after each step.
pub fn train(
    dataset: &FeatureDataset,
    cfg: &TrainConfig,
    deterministic: bool,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| HvcmError::invalid("features", "training data must be labeled"))?;
    let mut rows: Vec<usize> = (0..dataset.len()).filter(|&i| labels[i] >= 0).collect();
    if rows.is_empty() {
        return Err(HvcmError::invalid("features", "no labeled rows"));
    }
    let classes = dataset.c_max as usize;
    let mut state = init_state(cfg, dataset.dim, classes, ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    for _ in 0..cfg.epochs {
        rows.shuffle(&mut order_rng);
        for chunk in rows.chunks(cfg.batch_size) {
            let samples: Vec<Vec<f64>> = chunk.iter().map(|&r| dataset.row_f64(r)).collect();
            let batch_labels: Vec<i32> = chunk.iter().map(|&r| labels[r]).collect();
            let record = state.train_step(&samples, &batch_labels, cfg, deterministic)?;
            on_step(&record)?;
        }
    }
    Ok(state)
}
