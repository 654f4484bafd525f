//! Central finite-difference verification of the analytic gradients.

use serde::Serialize;

use super::config::TrainConfig;
use super::state::{loss_with_terms, TermWeights, TrainState, ViewBatch};
use crate::error::Result;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub coordinates: usize,
    pub max_relative_error: f64,
    /// Tensor name and index of the worst coordinate.
    pub worst: (&'static str, usize),
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares every coordinate of the encoder, center, and weight-head
/// gradients against `(L(θ + h) − L(θ − h)) / 2h`. The teacher is held
/// fixed, matching its stop-gradient role.
pub fn check_gradients(
    batch: &ViewBatch,
    state: &TrainState,
    cfg: &TrainConfig,
    terms: TermWeights,
    h: f64,
) -> Result<GradientCheck> {
    let analytic = loss_with_terms(batch, state, cfg, terms, true)?.grads;
    let mut probe = state.clone();
    let mut report = GradientCheck {
        coordinates: 0,
        max_relative_error: 0.0,
        worst: ("", 0),
    };
    let tensors: [(&'static str, &[f64]); 3] = [
        ("encoder", &analytic.encoder),
        ("centers", &analytic.centers),
        ("weight_head", &analytic.weight_head),
    ];
    for (name, grads) in tensors {
        for (i, &g) in grads.iter().enumerate() {
            let original = param(&mut probe, name)[i];
            param(&mut probe, name)[i] = original + h;
            let plus = loss_with_terms(batch, &probe, cfg, terms, true)?.total;
            param(&mut probe, name)[i] = original - h;
            let minus = loss_with_terms(batch, &probe, cfg, terms, true)?.total;
            param(&mut probe, name)[i] = original;
            let err = relative_error(g, (plus - minus) / (2.0 * h));
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (name, i);
            }
        }
    }
    Ok(report)
}

fn param<'a>(state: &'a mut TrainState, name: &str) -> &'a mut [f64] {
    match name {
        "encoder" => state.student.params_mut(),
        "centers" => &mut state.bank.centers,
        _ => &mut state.bank.weight_head,
    }
}
