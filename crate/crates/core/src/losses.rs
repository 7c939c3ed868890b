//! Regression losses for steering prediction, including the cost-sensitive
//! label-weighted variants.
//!
//! All cost-sensitive weights are computed from the ground-truth label, never
//! from the prediction.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossFamily {
    Mae,
    Mse,
    /// `(1/2n) Σ (1 + α|y|^γ)^δ (y - y')²`
    SteeringLoss,
    /// `(1/n) Σ (1 + α|y|^γ) smooth_l1(|y - y'|)`
    SteeringLoss2,
}

impl LossFamily {
    pub const ALL: [LossFamily; 4] = [
        LossFamily::Mae,
        LossFamily::Mse,
        LossFamily::SteeringLoss,
        LossFamily::SteeringLoss2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossFamily::Mae => "MAE",
            LossFamily::Mse => "MSE",
            LossFamily::SteeringLoss => "STEERING_LOSS",
            LossFamily::SteeringLoss2 => "STEERING_LOSS2",
        }
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MAE" => Ok(LossFamily::Mae),
            "MSE" => Ok(LossFamily::Mse),
            "STEERING_LOSS" | "STEERINGLOSS" => Ok(LossFamily::SteeringLoss),
            "STEERING_LOSS2" | "STEERINGLOSS2" => Ok(LossFamily::SteeringLoss2),
            other => Err(invalid(format!(
                "unknown loss family {other:?} (expected MAE, MSE, STEERING_LOSS, STEERING_LOSS2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig<T> {
    pub family: LossFamily,
    pub alpha: T,
    pub gamma: T,
    /// Only meaningful for [`LossFamily::SteeringLoss`]; always `None` otherwise.
    pub delta: Option<T>,
}

impl<T: Scalar> LossConfig<T> {
    /// Validates hyperparameters. `delta` must be `None` for STEERING_LOSS2
    /// and defaults to 1 for STEERING_LOSS.
    pub fn new(family: LossFamily, alpha: T, gamma: T, delta: Option<T>) -> Result<Self> {
        let nonneg = |name: &str, v: T| {
            if v >= T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("loss.{name} must be a finite non-negative real (got {v})")))
            }
        };
        nonneg("alpha", alpha)?;
        nonneg("gamma", gamma)?;
        if let Some(d) = delta {
            nonneg("delta", d)?;
        }
        let delta = match family {
            LossFamily::SteeringLoss => Some(delta.unwrap_or_else(T::one)),
            LossFamily::SteeringLoss2 if delta.is_some() => {
                return Err(invalid("loss.delta is not a STEERING_LOSS2 hyperparameter"))
            }
            _ => None,
        };
        Ok(Self {
            family,
            alpha,
            gamma,
            delta,
        })
    }

    /// `family` with α = γ = δ = 1.
    pub fn with_defaults(family: LossFamily) -> Self {
        let delta = (family == LossFamily::SteeringLoss).then(T::one);
        Self {
            family,
            alpha: T::one(),
            gamma: T::one(),
            delta,
        }
    }

    /// Cost-sensitive weight of a sample with label `y`; 1 for the plain families.
    pub fn sample_weight(&self, y: T) -> T {
        let base = T::one() + self.alpha * y.abs().powf(self.gamma);
        match self.family {
            LossFamily::Mae | LossFamily::Mse => T::one(),
            LossFamily::SteeringLoss => base.powf(self.delta.unwrap_or_else(T::one)),
            LossFamily::SteeringLoss2 => base,
        }
    }
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        Self::with_defaults(LossFamily::SteeringLoss2)
    }
}

/// `0.5 x²` for `|x| <= 1`, `|x| - 0.5` beyond.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a <= T::one() {
        T::from_f64_lossy(0.5) * x * x
    } else {
        a - T::from_f64_lossy(0.5)
    }
}

fn check_inputs<T: Scalar>(preds: &[T], truths: &[T]) -> Result<()> {
    if preds.is_empty() {
        return Err(invalid("loss needs at least one sample"));
    }
    if preds.len() != truths.len() {
        return Err(invalid(format!(
            "{} predictions vs {} labels",
            preds.len(),
            truths.len()
        )));
    }
    if preds.iter().chain(truths).any(|v| !v.is_finite()) {
        return Err(invalid("loss inputs must be finite"));
    }
    Ok(())
}

pub fn loss_value<T: Scalar>(preds: &[T], truths: &[T], cfg: &LossConfig<T>) -> Result<T> {
    check_inputs(preds, truths)?;
    let n = T::from_usize(preds.len()).unwrap();
    let half = T::from_f64_lossy(0.5);
    let sum: T = preds
        .iter()
        .zip(truths)
        .map(|(&p, &y)| {
            let r = y - p;
            match cfg.family {
                LossFamily::Mae => r.abs(),
                LossFamily::Mse => r * r,
                LossFamily::SteeringLoss => cfg.sample_weight(y) * r * r,
                LossFamily::SteeringLoss2 => cfg.sample_weight(y) * smooth_l1(r.abs()),
            }
        })
        .sum();
    Ok(match cfg.family {
        LossFamily::SteeringLoss => half * sum / n,
        _ => sum / n,
    })
}

/// ∂loss/∂prediction for every sample. Subgradient 0 at the MAE kink.
pub fn loss_gradient<T: Scalar>(preds: &[T], truths: &[T], cfg: &LossConfig<T>) -> Result<Vec<T>> {
    check_inputs(preds, truths)?;
    let n = T::from_usize(preds.len()).unwrap();
    let two = T::from_f64_lossy(2.0);
    Ok(preds
        .iter()
        .zip(truths)
        .map(|(&p, &y)| {
            let r = y - p;
            let g = match cfg.family {
                LossFamily::Mae => {
                    if r > T::zero() {
                        -T::one()
                    } else if r < T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                LossFamily::Mse => -two * r,
                LossFamily::SteeringLoss => -cfg.sample_weight(y) * r,
                LossFamily::SteeringLoss2 => -cfg.sample_weight(y) * r.max(-T::one()).min(T::one()),
            };
            g / n
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(family: LossFamily, alpha: f64, gamma: f64, delta: Option<f64>) -> LossConfig<f64> {
        LossConfig::new(family, alpha, gamma, delta).unwrap()
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(1.0f64 - 0.5, 0.5 * 1.0 * 1.0);
    }

    #[test]
    fn smooth_l1_derivative_is_continuous_at_knee() {
        let h = 1e-7_f64;
        let left = (smooth_l1(1.0) - smooth_l1(1.0 - h)) / h;
        let right = (smooth_l1(1.0 + h) - smooth_l1(1.0)) / h;
        assert!((left - 1.0).abs() < 1e-6);
        assert!((right - 1.0).abs() < 1e-6);
        let left = (smooth_l1(-1.0 + h) - smooth_l1(-1.0)) / h;
        assert!((left + 1.0).abs() < 1e-6);
    }

    #[test]
    fn steering_loss2_single_samples() {
        let c = cfg(LossFamily::SteeringLoss2, 1.0, 1.0, None);
        assert_eq!(loss_value(&[0.0], &[1.0], &c).unwrap(), 1.0);
        assert_eq!(loss_value(&[0.0], &[2.0], &c).unwrap(), 4.5);
    }

    #[test]
    fn steering_loss_single_sample() {
        let c = cfg(LossFamily::SteeringLoss, 1.0, 1.0, Some(1.0));
        assert_eq!(loss_value(&[0.0], &[1.0], &c).unwrap(), 1.0);
    }

    #[test]
    fn plain_families() {
        let p = [0.0, 1.0, -1.0];
        let y = [0.5, 1.0, 1.0];
        let mae = loss_value(&p, &y, &cfg(LossFamily::Mae, 1.0, 1.0, None)).unwrap();
        let mse = loss_value(&p, &y, &cfg(LossFamily::Mse, 1.0, 1.0, None)).unwrap();
        assert!((mae - 2.5 / 3.0).abs() < 1e-15);
        assert!((mse - 4.25 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weight_uses_the_label() {
        let c = cfg(LossFamily::SteeringLoss2, 1.0, 1.0, None);
        // same residual, label magnitude differs
        let a = loss_value(&[0.5], &[0.0], &c).unwrap();
        let b = loss_value(&[0.0], &[0.5], &c).unwrap();
        assert_eq!(a, 0.125);
        assert_eq!(b, 1.5 * 0.125);
    }

    #[test]
    fn gradient_examples() {
        let c = cfg(LossFamily::SteeringLoss2, 1.0, 1.0, None);
        assert_eq!(loss_gradient(&[1.0], &[1.0], &c).unwrap(), vec![0.0]);
        assert_eq!(loss_gradient(&[0.5], &[1.0], &c).unwrap(), vec![-1.0]);
        let mae = cfg(LossFamily::Mae, 0.0, 0.0, None);
        assert_eq!(loss_gradient(&[0.3], &[0.3], &mae).unwrap(), vec![0.0]);
    }

    #[test]
    fn input_errors() {
        let c = LossConfig::<f64>::default();
        assert!(loss_value(&[], &[], &c).is_err());
        assert!(loss_value(&[0.0], &[0.0, 1.0], &c).is_err());
        assert!(loss_gradient(&[f64::NAN], &[0.0], &c).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(LossFamily::SteeringLoss2, 1.0, 1.0, Some(1.0)).is_err());
        assert!(LossConfig::new(LossFamily::Mae, -1.0, 1.0, None).is_err());
        let sl = LossConfig::new(LossFamily::SteeringLoss, 1.0, 1.0, None).unwrap();
        assert_eq!(sl.delta, Some(1.0));
        assert_eq!("steering_loss2".parse::<LossFamily>().unwrap(), LossFamily::SteeringLoss2);
        assert!("huber".parse::<LossFamily>().is_err());
    }
}
