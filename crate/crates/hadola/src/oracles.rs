//! Independent brute-force oracles used by tests and audits.
//!
//! Each oracle recomputes a quantity through its own arithmetic rather than
//! calling the production path it checks: the gradient oracle differentiates
//! the loss numerically, the influence oracle re-derives the softmax
//! cross-entropy gradient from scratch, and the KL oracle evaluates the
//! textbook sum term by term. None of them run during normal pipeline
//! operation.

use crate::annotations::AnswerDistribution;
use crate::error::{HadolaError, Result};
use crate::model::{loss_hadola, LossWeights, SurrogateModel, TrainItem};

/// Central finite differences of the composite loss with respect to every
/// model weight. O(P) loss evaluations per step; intended for small models.
pub fn finite_diff_grad(
    model: &SurrogateModel,
    hu_model: &SurrogateModel,
    item: &TrainItem,
    weights: LossWeights,
    step: f64,
) -> Result<Vec<f64>> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut grad = Vec::with_capacity(model.n_params());
    for param in 0..model.n_params() {
        let plus = model.perturbed(param, step);
        let minus = model.perturbed(param, -step);
        let f_plus = loss_hadola(&plus, hu_model, item, weights)?.total;
        let f_minus = loss_hadola(&minus, hu_model, item, weights)?.total;
        grad.push((f_plus - f_minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Hand-rolled softmax cross-entropy gradient, written independently of the
/// model module: explicit logit loops, its own softmax, its own layout math.
fn ce_grad_independent(model: &SurrogateModel, features: &[f64], label: usize) -> Vec<f64> {
    let c = model.n_classes();
    let d = model.dim();
    let w = model.weights();
    assert_eq!(features.len(), d);
    assert!(label < c);

    // logits
    let mut logits = vec![0.0f64; c];
    for (class, logit) in logits.iter_mut().enumerate() {
        let base = class * (d + 1);
        let mut acc = 0.0;
        for j in 0..d {
            acc += w[base + j] * features[j];
        }
        *logit = acc + w[base + d];
    }

    // softmax, own max subtraction
    let mut max = logits[0];
    for &z in &logits[1..] {
        if z > max {
            max = z;
        }
    }
    let mut exps = vec![0.0f64; c];
    let mut z_sum = 0.0;
    for (e, &z) in exps.iter_mut().zip(&logits) {
        *e = (z - max).exp();
        z_sum += *e;
    }

    // gradient rows: (p_c - [c == label]) * [x; 1]
    let mut grad = vec![0.0f64; c * (d + 1)];
    for (class, &e) in exps.iter().enumerate() {
        let p = e / z_sum;
        let coef = if class == label { p - 1.0 } else { p };
        let base = class * (d + 1);
        for j in 0..d {
            grad[base + j] = coef * features[j];
        }
        grad[base + d] = coef;
    }
    grad
}

fn mean_ce_grad_independent(model: &SurrogateModel, items: &[TrainItem]) -> Vec<f64> {
    let mut total = vec![0.0f64; model.n_params()];
    for item in items {
        let g = ce_grad_independent(model, &item.features, item.label);
        for (t, gi) in total.iter_mut().zip(&g) {
            *t += gi;
        }
    }
    let n = items.len().max(1) as f64;
    for t in &mut total {
        *t /= n;
    }
    total
}

fn dot_independent(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in (0..a.len()).rev() {
        acc += a[i] * b[i];
    }
    acc
}

/// Recompute the two-checkpoint influence score
/// `<g(theta0), grad L_val(theta0)> + <g(thetaT), grad L_val(thetaT)>` for a
/// pseudo pair, with every gradient derived by this module's own code.
pub fn tracin_oracle(
    features: &[f64],
    label: usize,
    theta0: &SurrogateModel,
    theta_t: &SurrogateModel,
    val_set: &[TrainItem],
) -> f64 {
    let g0 = ce_grad_independent(theta0, features, label);
    let gt = ce_grad_independent(theta_t, features, label);
    let v0 = mean_ce_grad_independent(theta0, val_set);
    let vt = mean_ce_grad_independent(theta_t, val_set);
    dot_independent(&g0, &v0) + dot_independent(&gt, &vt)
}

/// Term-by-term KL divergence `sum h_i ln(h_i / p_i)`; a separate code path
/// from the metrics implementation.
pub fn kl_bruteforce(h: &AnswerDistribution, p: &AnswerDistribution) -> Result<f64> {
    if h.answers() != p.answers() {
        return Err(HadolaError::SupportMismatch(format!(
            "h has answers {:?}, p has {:?}",
            h.answers(),
            p.answers()
        )));
    }
    let mut kl = 0.0;
    for i in 0..h.len() {
        let hi = h.weights()[i];
        if hi > 0.0 {
            kl += hi * (hi / p.weights()[i]).ln();
        }
    }
    Ok(kl)
}
