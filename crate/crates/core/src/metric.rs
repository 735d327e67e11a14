//! Distance-threshold matching of predicted and true picks, the Fβ score with
//! recall emphasis, and the weighted cross-class score.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::coords::{CoordError, ParticleClassSpec, Pick, PickSet};

pub const DEFAULT_BETA: f64 = 4.0;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("match radius must be positive, got {0}")]
    InvalidTau(f64),
    #[error("class weights must be non-negative and not all zero")]
    InvalidWeights,
    #[error("{scores} scores but {weights} weights")]
    LengthMismatch { scores: usize, weights: usize },
    #[error(transparent)]
    Coord(#[from] CoordError),
}

/// Matching outcome for one class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    /// `(pred index, gt index, distance)` in acceptance order.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Greedy matching: all `(pred, gt)` pairs within `tau` sorted by distance
/// (ties by pred then gt index), each accepted when both ends are free.
pub fn match_class(preds: &[Pick], gts: &[Pick], tau: f64) -> Result<MatchResult, MetricError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(MetricError::InvalidTau(tau));
    }
    let mut cands = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let d = p.distance(g);
            if d <= tau {
                cands.push((i, j, d));
            }
        }
    }
    cands.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (i, j, d) in cands {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            pairs.push((i, j, d));
        }
    }
    Ok(MatchResult {
        true_pos: pairs.len(),
        false_pos: preds.len() - pairs.len(),
        false_neg: gts.len() - pairs.len(),
        pairs,
    })
}

/// `(1 + β²)·P·R / (β²·P + R)`. A class with no predictions and no ground
/// truth scores 1; otherwise zero true positives score 0.
pub fn fbeta(tp: usize, fp: usize, fn_: usize, beta: f64) -> f64 {
    fbeta_with_empty(tp, fp, fn_, beta, 1.0)
}

/// [`fbeta`] with a chosen score for the all-zero case.
pub fn fbeta_with_empty(tp: usize, fp: usize, fn_: usize, beta: f64, empty: f64) -> f64 {
    if tp == 0 {
        return if fp == 0 && fn_ == 0 { empty } else { 0.0 };
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (b2 * p + r)
}

/// `Σ w·F / Σ w`.
pub fn weighted_score(scores: &[f64], weights: &[f64]) -> Result<f64, MetricError> {
    if scores.len() != weights.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            weights: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(MetricError::InvalidWeights);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(MetricError::InvalidWeights);
    }
    Ok(scores.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() / total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub beta: f64,
    /// Score of a class with neither predictions nor ground truth.
    pub empty_class_score: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            empty_class_score: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub name: String,
    pub matches: MatchResult,
    pub precision: f64,
    pub recall: f64,
    pub fbeta: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub classes: Vec<ClassScore>,
    pub weighted: f64,
}

impl Evaluation {
    /// Aligned table followed by `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9} {:>7}",
            "class", "tp", "fp", "fn", "precision", "recall", "fbeta", "weight"
        );
        for c in &self.classes {
            let m = &c.matches;
            let _ = writeln!(
                s,
                "{:<12} {:>5} {:>5} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>7.3}",
                c.name,
                m.true_pos,
                m.false_pos,
                m.false_neg,
                c.precision,
                c.recall,
                c.fbeta,
                c.weight
            );
        }
        let _ = writeln!(s, "weighted score: {:.6}", self.weighted);
        for c in &self.classes {
            let m = &c.matches;
            let _ = writeln!(
                s,
                "class.{}.tp={}\nclass.{}.fp={}\nclass.{}.fn={}\nclass.{}.precision={}\nclass.{}.recall={}\nclass.{}.fbeta={}",
                c.name, m.true_pos, c.name, m.false_pos, c.name, m.false_neg, c.name, c.precision,
                c.name, c.recall, c.name, c.fbeta
            );
        }
        let _ = writeln!(s, "score={}", self.weighted);
        s
    }
}

/// Scores `preds` against `truth` per class and combines with class weights.
pub fn evaluate(
    preds: &PickSet,
    truth: &PickSet,
    classes: &[ParticleClassSpec],
    options: EvalOptions,
) -> Result<Evaluation, MetricError> {
    preds.validate(classes.len())?;
    truth.validate(classes.len())?;
    let per_class = classes
        .par_iter()
        .enumerate()
        .map(|(c, spec)| {
            let p: Vec<Pick> = preds.of_class(c).cloned().collect();
            let g: Vec<Pick> = truth.of_class(c).cloned().collect();
            let m = match_class(&p, &g, spec.match_radius_tau)?;
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            Ok(ClassScore {
                name: spec.name.clone(),
                precision: ratio(m.true_pos, m.true_pos + m.false_pos),
                recall: ratio(m.true_pos, m.true_pos + m.false_neg),
                fbeta: fbeta_with_empty(
                    m.true_pos,
                    m.false_pos,
                    m.false_neg,
                    options.beta,
                    options.empty_class_score,
                ),
                weight: spec.metric_weight,
                matches: m,
            })
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    let scores: Vec<f64> = per_class.iter().map(|c| c.fbeta).collect();
    let weights: Vec<f64> = per_class.iter().map(|c| c.weight).collect();
    Ok(Evaluation {
        weighted: weighted_score(&scores, &weights)?,
        classes: per_class,
    })
}
