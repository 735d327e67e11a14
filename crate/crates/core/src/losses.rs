//! Class-imbalance aware MSE losses for heatmap regression.
//!
//! Both losses return the scalar value and its gradient with respect to the
//! prediction. The target is data, so its sums are constants for the
//! gradient. Reductions accumulate in `f64`.

use thiserror::Error;

use crate::real::Real;
use crate::volgrid::Heatmap;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("prediction has {pred} elements, target has {target}")]
    ShapeMismatch { pred: usize, target: usize },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight floor added to the target in the heatmap-weighted loss.
    pub alpha: f64,
    /// Denominator guard in the positive/negative split loss.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "alpha {} < 0",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "epsilon {} must be > 0",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Which loss the trainer optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `mean((p - y)² · (y + α))`
    HeatmapWeighted,
    /// Separate positive/negative weighted means, summed.
    PosNegBalanced,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::HeatmapWeighted => "weighted",
            LossKind::PosNegBalanced => "balanced",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "weighted" => Some(LossKind::HeatmapWeighted),
            "balanced" => Some(LossKind::PosNegBalanced),
            _ => None,
        }
    }

    pub fn evaluate<T: Real>(
        self,
        pred: &[T],
        target: &[T],
        cfg: &LossConfig,
    ) -> Result<(f64, Vec<T>), LossError> {
        match self {
            LossKind::HeatmapWeighted => heatmap_weighted(pred, target, cfg.alpha),
            LossKind::PosNegBalanced => pos_neg_balanced(pred, target, cfg.epsilon),
        }
    }
}

fn check_shapes<T>(pred: &[T], target: &[T]) -> Result<(), LossError> {
    if pred.len() != target.len() {
        return Err(LossError::ShapeMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    Ok(())
}

/// Heatmap-weighted MSE: `mean((p - y)² · (y + α))`, gradient
/// `2 (p - y)(y + α) / N`.
pub fn heatmap_weighted<T: Real>(
    pred: &[T],
    target: &[T],
    alpha: f64,
) -> Result<(f64, Vec<T>), LossError> {
    check_shapes(pred, target)?;
    let n = pred.len().max(1) as f64;
    let mut sum = 0.0f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let (p, y) = (p.as_f64(), y.as_f64());
            let r = p - y;
            let w = y + alpha;
            sum += r * r * w;
            T::of_f64(2.0 * r * w / n)
        })
        .collect();
    Ok((sum / n, grad))
}

/// Positive/negative balanced MSE:
/// `Σ(r²·y)/(Σy + ε) + Σ(r²·(1-y))/(Σ(1-y) + ε)` with `r = p - y`.
pub fn pos_neg_balanced<T: Real>(
    pred: &[T],
    target: &[T],
    epsilon: f64,
) -> Result<(f64, Vec<T>), LossError> {
    check_shapes(pred, target)?;
    let (mut pos_mass, mut neg_mass) = (0.0f64, 0.0f64);
    for &y in target {
        let y = y.as_f64();
        pos_mass += y;
        neg_mass += 1.0 - y;
    }
    let pos_den = pos_mass + epsilon;
    let neg_den = neg_mass + epsilon;
    let (mut pos_num, mut neg_num) = (0.0f64, 0.0f64);
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let (p, y) = (p.as_f64(), y.as_f64());
            let r = p - y;
            pos_num += r * r * y;
            neg_num += r * r * (1.0 - y);
            T::of_f64(2.0 * r * (y / pos_den + (1.0 - y) / neg_den))
        })
        .collect();
    Ok((pos_num / pos_den + neg_num / neg_den, grad))
}

fn check_heatmaps(p: &Heatmap, y: &Heatmap) -> Result<(), LossError> {
    if p.classes() != y.classes() || p.dims() != y.dims() {
        return Err(LossError::ShapeMismatch {
            pred: p.values().len(),
            target: y.values().len(),
        });
    }
    Ok(())
}

/// [`heatmap_weighted`] over whole heatmaps.
pub fn loss_heatmap_weighted(
    p: &Heatmap,
    y: &Heatmap,
    alpha: f64,
) -> Result<(f64, Vec<f32>), LossError> {
    check_heatmaps(p, y)?;
    heatmap_weighted(p.values(), y.values(), alpha)
}

/// [`pos_neg_balanced`] over whole heatmaps.
pub fn loss_pos_neg_balanced(
    p: &Heatmap,
    y: &Heatmap,
    epsilon: f64,
) -> Result<(f64, Vec<f32>), LossError> {
    check_heatmaps(p, y)?;
    pos_neg_balanced(p.values(), y.values(), epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_zero() {
        let y: Vec<f64> = (0..27).map(|i| (i as f64 / 27.0).sin().abs()).collect();
        let (l, g) = heatmap_weighted(&y, &y, 0.1).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, g) = pos_neg_balanced(&y, &y, 1e-6).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_hand_cases() {
        let (l, _) = heatmap_weighted(&[1.0f64; 10], &[0.0; 10], 0.1).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        let (l, _) = heatmap_weighted(&[0.0f64; 10], &[1.0; 10], 0.1).unwrap();
        assert!((l - 1.1).abs() < 1e-12);
    }

    #[test]
    fn balanced_hand_cases() {
        let (l, _) = pos_neg_balanced(&[0.5f64; 100], &[0.0; 100], 1e-6).unwrap();
        assert!((l - 0.25 * 100.0 / (100.0 + 1e-6)).abs() < 1e-15);
        assert!((l - 0.2499999975).abs() < 1e-12);
        let (l, _) = pos_neg_balanced(&[0.0f64; 100], &[1.0; 100], 1e-6).unwrap();
        assert!((l - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        assert_eq!(
            heatmap_weighted(&[0.0f32; 3], &[0.0; 4], 0.1).unwrap_err(),
            LossError::ShapeMismatch { pred: 3, target: 4 }
        );
        assert!(pos_neg_balanced(&[0.0f32; 3], &[0.0; 2], 1e-6).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            alpha: -1.0,
            epsilon: 1e-6
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            alpha: 0.1,
            epsilon: 0.0
        }
        .validate()
        .is_err());
    }
}
