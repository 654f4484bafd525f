//! Training objective terms and their analytic gradients.

use serde::{Deserialize, Serialize};

use crate::attributes::{softmax, GroupedAttributes};
use crate::error::{check_dim, HvcmError, Result};

/// Divergence used by both center terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Squared Euclidean distance.
    L2,
    #[default]
    Kl,
    /// Jensen–Shannon divergence.
    Js,
}

fn safe_ln(x: f64) -> f64 {
    x.max(f64::MIN_POSITIVE).ln()
}

/// `D(p ‖ q)` for probability vectors (or arbitrary vectors under L2).
pub fn divergence(p: &[f64], q: &[f64], objective: Objective) -> f64 {
    match objective {
        Objective::L2 => p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(),
        Objective::Kl => kl(p, q),
        Objective::Js => {
            let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
            0.5 * kl(p, &m) + 0.5 * kl(q, &m)
        }
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (safe_ln(*a) - safe_ln(*b)))
        .sum()
}

/// Value of `D(p ‖ q)` and its gradients with respect to `p` and `q`.
pub(crate) fn divergence_grad(p: &[f64], q: &[f64], objective: Objective) -> (f64, Vec<f64>, Vec<f64>) {
    let value = divergence(p, q, objective);
    let (dp, dq) = match objective {
        Objective::L2 => {
            let dp: Vec<f64> = p.iter().zip(q).map(|(a, b)| 2.0 * (a - b)).collect();
            let dq = dp.iter().map(|v| -v).collect();
            (dp, dq)
        }
        Objective::Kl => (
            p.iter().zip(q).map(|(a, b)| safe_ln(*a) - safe_ln(*b) + 1.0).collect(),
            p.iter().zip(q).map(|(a, b)| -a / b.max(f64::MIN_POSITIVE)).collect(),
        ),
        Objective::Js => {
            let half_log_ratio = |x: &f64, y: &f64| 0.5 * (safe_ln(*x) - safe_ln(0.5 * (x + y)));
            (
                p.iter().zip(q).map(|(a, b)| half_log_ratio(a, b)).collect(),
                q.iter().zip(p).map(|(b, a)| half_log_ratio(b, a)).collect(),
            )
        }
    };
    (value, dp, dq)
}

/// Pulls `∂L/∂p` back through `p = softmax(z / τ)`.
pub(crate) fn softmax_backward(p: &[f64], grad_p: &[f64], temperature: f64) -> Vec<f64> {
    let inner: f64 = p.iter().zip(grad_p).map(|(a, g)| a * g).sum();
    p.iter()
        .zip(grad_p)
        .map(|(a, g)| a * (g - inner) / temperature)
        .collect()
}

fn log_softmax(x: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = x.iter().map(|v| v / temperature).collect();
    let lse = crate::linalg::log_sum_exp(&scaled);
    scaled.iter().map(|v| v - lse).collect()
}

/// Cross-entropy of the student distribution `softmax(s/τ_s)` against the
/// teacher target `softmax(t/τ_t)`.
pub fn kd_loss(student: &[f64], teacher: &[f64], tau_s: f64, tau_t: f64) -> Result<f64> {
    Ok(kd_loss_grad(student, teacher, tau_s, tau_t)?.0)
}

/// KD value and `∂/∂student`; the teacher is a constant target.
pub(crate) fn kd_loss_grad(
    student: &[f64],
    teacher: &[f64],
    tau_s: f64,
    tau_t: f64,
) -> Result<(f64, Vec<f64>)> {
    check_dim(teacher.len(), student.len())?;
    for (name, t) in [("tau_s", tau_s), ("tau_t", tau_t)] {
        if !(t > 0.0) {
            return Err(HvcmError::invalid(name, format!("{t} must be > 0")));
        }
    }
    let target = softmax(teacher, tau_t);
    let log_ps = log_softmax(student, tau_s);
    let value = -target.iter().zip(&log_ps).map(|(t, l)| t * l).sum::<f64>();
    let grad = log_ps
        .iter()
        .zip(&target)
        .map(|(l, t)| (l.exp() - t) / tau_s)
        .collect();
    Ok((value, grad))
}

fn check_simplex(name: &'static str, v: &[f64]) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(HvcmError::invalid(name, "expected a probability vector"));
    }
    Ok(())
}

fn check_pairs(ga: &GroupedAttributes, centers: &[Vec<f64>], objective: Objective) -> Result<()> {
    check_dim(ga.group_count(), centers.len())?;
    for (a, m) in ga.groups().iter().zip(centers) {
        check_dim(a.len(), m.len())?;
        if objective != Objective::L2 {
            check_simplex("attributes", a)?;
            check_simplex("centers", m)?;
        }
    }
    Ok(())
}

/// `Σ_i D(a_i ‖ μ_i)` over normalized groups.
pub fn center_align_loss(
    ga: &GroupedAttributes,
    centers: &[Vec<f64>],
    objective: Objective,
) -> Result<f64> {
    check_pairs(ga, centers, objective)?;
    Ok(ga
        .groups()
        .iter()
        .zip(centers)
        .map(|(a, m)| divergence(a, m, objective))
        .sum())
}

/// `Σ_i w_i D(μ_i ‖ a_i)`; the divergence direction is reversed relative
/// to [`center_align_loss`].
pub fn weighted_center_loss(
    ga: &GroupedAttributes,
    centers: &[Vec<f64>],
    sample_weights: &[f64],
    objective: Objective,
) -> Result<f64> {
    check_pairs(ga, centers, objective)?;
    check_dim(ga.group_count(), sample_weights.len())?;
    check_simplex("sample_weights", sample_weights)?;
    Ok(ga
        .groups()
        .iter()
        .zip(centers)
        .zip(sample_weights)
        .map(|((a, m), w)| w * divergence(m, a, objective))
        .sum())
}
