//! Finite-difference verification of [`Net::backward`].

use crate::net::model::Net;
use crate::net::tensor::Tensor4;
use crate::net::NetError;
use crate::real::Real;

/// Worst disagreement between analytic and numeric parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter name, element)` of the worst relative error.
    pub worst: Option<(String, usize)>,
}

fn objective<T: Real>(
    net: &Net<T>,
    x: &Tensor4<T>,
    upstream: &Tensor4<T>,
) -> Result<f64, NetError> {
    let y = net.forward(x)?;
    Ok(y.data()
        .iter()
        .zip(upstream.data())
        .map(|(a, b)| a.as_f64() * b.as_f64())
        .sum())
}

/// Compares every trainable parameter's gradient of `Σ upstream · net(x)`
/// against the fourth-order five-point central difference with step `h`. Relative error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn check_param_gradients<T: Real>(
    net: &Net<T>,
    x: &Tensor4<T>,
    upstream: &Tensor4<T>,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport, NetError> {
    let analytic = net.forward_pass(x)?.backward(net, upstream)?;
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
    };
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for (k, g) in grad.iter().enumerate() {
            let orig = probe.params().params()[pi].data[k];
            let mut at = |step: f64| -> Result<f64, NetError> {
                probe.params_mut().params_mut()[pi].data[k] = T::of_f64(orig.as_f64() + step);
                objective(&probe, x, upstream)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe.params_mut().params_mut()[pi].data[k] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = g.as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.to_string(), k));
            }
        }
    }
    Ok(report)
}

/// Directional check: compares `⟨∇, d⟩` with `(f(θ + h·d) − f(θ − h·d)) / 2h`
/// for a unit direction `d` over all trainable parameters. Cheap enough for
/// `f32` networks, where per-element differences drown in rounding.
pub fn check_directional<T: Real>(
    net: &Net<T>,
    x: &Tensor4<T>,
    upstream: &Tensor4<T>,
    direction: &[Vec<f64>],
    h: f64,
) -> Result<f64, NetError> {
    let analytic = net.forward_pass(x)?.backward(net, upstream)?;
    let mut dot = 0.0;
    let mut norm = 0.0;
    for (pi, (_, grad)) in analytic.iter().enumerate() {
        if let Some(grad) = grad {
            for (g, d) in grad.iter().zip(&direction[pi]) {
                dot += g.as_f64() * d;
                norm += d * d;
            }
        }
    }
    let norm = norm.sqrt();
    let shifted = |sign: f64| -> Result<f64, NetError> {
        let mut probe = net.clone();
        for (pi, (_, grad)) in analytic.iter().enumerate() {
            if grad.is_none() {
                continue;
            }
            for (v, d) in probe.params_mut().params_mut()[pi]
                .data
                .iter_mut()
                .zip(&direction[pi])
            {
                *v = T::of_f64(v.as_f64() + sign * h * d / norm);
            }
        }
        objective(&probe, x, upstream)
    };
    let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * h);
    let analytic = dot / norm;
    Ok((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12))
}
