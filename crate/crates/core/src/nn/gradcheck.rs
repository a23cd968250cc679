//! Central finite-difference gradient verification.
//!
//! The analytic reverse pass is checked against `(L(w+h) - L(w-h)) / 2h`
//! with `h = 1e-5` on the BCE loss. Relative error uses a small floor so
//! near-zero gradient pairs compare absolutely.

use rand::Rng;

use super::loss::loss_bce_grad;
use super::{loss_bce, EncodedBatch, ModelGraph, Tensor};
use crate::seed;

const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

/// Input for a gradient check: encoded domains or flat features.
#[derive(Clone, Copy)]
pub enum CheckInput<'a> {
    Codes(&'a EncodedBatch),
    Features(&'a Tensor),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst_weight: String,
    pub tolerance: f64,
    pub pass: bool,
}

/// Check every element of every trainable weight. Intended for small models
/// (a few thousand weights); use [`gradient_check_sampled`] beyond that.
pub fn gradient_check(
    model: &mut ModelGraph,
    input: CheckInput,
    targets: &[f64],
    tolerance: f64,
) -> GradCheckReport {
    let all: Vec<(usize, usize)> = model
        .store()
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(i, e)| (0..e.tensor.len()).map(move |k| (i, k)))
        .collect();
    check_points(model, input, targets, tolerance, &all)
}

/// Check a seeded random subset of weight elements (at most `max_checks`).
/// Keeps full-architecture checks tractable.
pub fn gradient_check_sampled(
    model: &mut ModelGraph,
    input: CheckInput,
    targets: &[f64],
    tolerance: f64,
    max_checks: usize,
    sample_seed: u64,
) -> GradCheckReport {
    let sizes: Vec<(usize, usize)> = model
        .store()
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .map(|(i, e)| (i, e.tensor.len()))
        .collect();
    let total: usize = sizes.iter().map(|(_, n)| n).sum();
    let mut points = Vec::with_capacity(max_checks.min(total));
    if total <= max_checks {
        for (i, n) in &sizes {
            points.extend((0..*n).map(|k| (*i, k)));
        }
    } else {
        let mut rng = seed::rng(sample_seed);
        for _ in 0..max_checks {
            let mut flat = rng.random_range(0..total);
            for (i, n) in &sizes {
                if flat < *n {
                    points.push((*i, flat));
                    break;
                }
                flat -= n;
            }
        }
    }
    check_points(model, input, targets, tolerance, &points)
}

fn check_points(
    model: &mut ModelGraph,
    input: CheckInput,
    targets: &[f64],
    tolerance: f64,
    points: &[(usize, usize)],
) -> GradCheckReport {
    let analytic = analytic_grads(model, input, targets);

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for &(idx, k) in points {
        let original = model.store().tensor(idx).data()[k];
        model.store_mut().tensor_mut(idx).data_mut()[k] = original + FD_STEP;
        let plus = loss_of(model, input, targets);
        model.store_mut().tensor_mut(idx).data_mut()[k] = original - FD_STEP;
        let minus = loss_of(model, input, targets);
        model.store_mut().tensor_mut(idx).data_mut()[k] = original;

        let fd = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[idx].as_ref().map_or(0.0, |t| t.data()[k]);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{}[{k}]", model.store().entry(idx).name);
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        checked: points.len(),
        worst_weight: worst,
        tolerance,
        pass: max_rel <= tolerance,
    }
}

fn loss_of(model: &ModelGraph, input: CheckInput, targets: &[f64]) -> f64 {
    let preds = match input {
        CheckInput::Codes(b) => model.forward(b).expect("forward"),
        CheckInput::Features(f) => model
            .forward_features(f)
            .expect("forward features")
            .data()
            .to_vec(),
    };
    loss_bce(&preds, targets).expect("loss")
}

fn analytic_grads(
    model: &ModelGraph,
    input: CheckInput,
    targets: &[f64],
) -> Vec<Option<Tensor>> {
    let (preds, tape, grads) = match input {
        CheckInput::Codes(b) => {
            let (out, tape) = model.forward_with_tape(b).expect("forward");
            let preds = out.data().to_vec();
            let grad = Tensor::from_vec(&[preds.len(), 1], loss_bce_grad(&preds, targets))
                .expect("grad shape");
            let grads = model.backward(b, &tape, &grad);
            (preds, tape, grads)
        }
        CheckInput::Features(f) => {
            let (out, tape) = model.forward_features_with_tape(f).expect("forward");
            let preds = out.data().to_vec();
            let grad = Tensor::from_vec(&[preds.len(), 1], loss_bce_grad(&preds, targets))
                .expect("grad shape");
            let grads = model.backward_features(f, &tape, &grad);
            (preds, tape, grads)
        }
    };
    let _ = (preds, tape);
    (0..grads.len()).map(|i| grads.slot(i).cloned()).collect()
}
