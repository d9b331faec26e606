//! Training objective `λ1·L_r + λ2·L_c`: mean absolute error on scores, cross
//! entropy on quality levels, and the per-epoch schedule for the two weights.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::log_softmax_rows;

/// Probability floor used when cross entropy is computed from probabilities.
pub const PROB_EPSILON: f64 = 1e-12;

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<usize> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let n = a.dims().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Empty(format!("{what}: empty batch")));
    }
    Ok(n)
}

/// Mean absolute error over a batch.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(pred, target, "l1 loss")?;
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// Mean negative log-probability of the true class, from probabilities. Zero
/// probabilities are floored at [`PROB_EPSILON`].
pub fn ce_loss(probs: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
    let n = check_same(probs, one_hot, "cross entropy")?;
    let logp = probs.clamp(PROB_EPSILON, 1.0)?.log()?;
    Ok((one_hot.mul(&logp)?.sum_all()? / -(n as f64))?)
}

/// Cross entropy computed from logits through log-sum-exp.
pub fn ce_loss_from_logits(logits: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
    let n = check_same(logits, one_hot, "cross entropy")?;
    let logp = log_softmax_rows(logits)?;
    Ok((one_hot.mul(&logp)?.sum(D::Minus1)?.sum_all()? / -(n as f64))?)
}

/// `λ1(t) = t/(T+1)·ξ`, `λ2(t) = 1 - λ1(t)`.
pub fn weights_at(t: usize, max_epochs: usize, xi: f64) -> Result<(f64, f64)> {
    if max_epochs < 1 {
        return Err(Error::InvalidSchedule(format!("max epochs must be >= 1, got {max_epochs}")));
    }
    if !(xi > 0.0 && xi <= 1.0) {
        return Err(Error::InvalidSchedule(format!("trade-off xi must lie in (0, 1], got {xi}")));
    }
    if t > max_epochs {
        return Err(Error::InvalidSchedule(format!("epoch {t} exceeds max epochs {max_epochs}")));
    }
    let lambda1 = t as f64 / (max_epochs + 1) as f64 * xi;
    Ok((lambda1, 1.0 - lambda1))
}

/// How the loss weights evolve over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSchedule {
    /// Ramp from classification toward regression.
    Progressive { xi: f64 },
    /// Constant weights.
    Fixed { lambda1: f64, lambda2: f64 },
    /// Regression loss only; for variants without a classification head.
    RegressionOnly,
}

impl WeightSchedule {
    pub fn state(&self, t: usize, max_epochs: usize) -> Result<ScheduleState> {
        let (lambda1, lambda2) = match *self {
            WeightSchedule::Progressive { xi } => weights_at(t, max_epochs, xi)?,
            WeightSchedule::Fixed { lambda1, lambda2 } => (lambda1, lambda2),
            WeightSchedule::RegressionOnly => (1.0, 0.0),
        };
        let xi = match *self {
            WeightSchedule::Progressive { xi } => xi,
            _ => 1.0,
        };
        Ok(ScheduleState { epoch: t, max_epochs, xi, lambda1, lambda2 })
    }
}

/// Loss weights in force for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub epoch: usize,
    pub max_epochs: usize,
    pub xi: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl ScheduleState {
    pub fn progressive(t: usize, max_epochs: usize, xi: f64) -> Result<Self> {
        WeightSchedule::Progressive { xi }.state(t, max_epochs)
    }
}

/// Per-batch loss components, kept as graph tensors for backprop.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub regression: Tensor,
    pub classification: Option<Tensor>,
    pub total: Tensor,
}

/// Classification input: logits preferred, probabilities accepted.
#[derive(Debug, Clone, Copy)]
pub enum ClassOutput<'a> {
    Logits(&'a Tensor),
    Probs(&'a Tensor),
}

/// `λ1·l1_loss(pred, target) + λ2·ce(class, one_hot)`.
pub fn combined_loss(
    pred: &Tensor,
    class: Option<ClassOutput<'_>>,
    target: &Tensor,
    one_hot: Option<&Tensor>,
    state: &ScheduleState,
) -> Result<LossParts> {
    let regression = l1_loss(pred, target)?;
    let classification = match (class, one_hot) {
        (Some(ClassOutput::Logits(l)), Some(y)) => Some(ce_loss_from_logits(l, y)?),
        (Some(ClassOutput::Probs(p)), Some(y)) => Some(ce_loss(p, y)?),
        (None, _) => None,
        (Some(_), None) => return Err(Error::shape("classification output without one-hot targets")),
    };
    let mut total = (&regression * state.lambda1)?;
    match &classification {
        Some(c) => total = (total + (c * state.lambda2)?)?,
        None if state.lambda2 != 0.0 => {
            return Err(Error::config("non-zero classification weight but the model has no classifier"))
        }
        None => {}
    }
    Ok(LossParts { regression, classification, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap().reshape((v.len(), 1)).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Tensor {
        let v: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn l1_examples() {
        assert_eq!(s(&l1_loss(&t(&[0.3, 0.9]), &t(&[0.3, 0.9])).unwrap()), 0.0);
        assert_eq!(s(&l1_loss(&t(&[0.0, 0.0]), &t(&[1.0, 0.5])).unwrap()), 0.75);
        let a = s(&l1_loss(&t(&[0.1, -0.2]), &t(&[0.0, 0.0])).unwrap());
        let b = s(&l1_loss(&t(&[0.3, -0.6]), &t(&[0.0, 0.0])).unwrap());
        assert!((b - 3.0 * a).abs() < 1e-15);
    }

    #[test]
    fn l1_rejects_empty_and_mismatched() {
        let empty = Tensor::zeros((0, 1), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(l1_loss(&empty, &empty), Err(Error::Empty(_))));
        assert!(l1_loss(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn ce_examples() {
        let uniform = m(&[&[0.2; 5]]);
        let y = m(&[&[0.0, 0.0, 1.0, 0.0, 0.0]]);
        assert!((s(&ce_loss(&uniform, &y).unwrap()) - 5f64.ln()).abs() < 1e-12);
        assert_eq!(s(&ce_loss(&m(&[&[0.0, 1.0]]), &m(&[&[0.0, 1.0]])).unwrap()), 0.0);
        assert!((s(&ce_loss(&m(&[&[0.5, 0.5]]), &m(&[&[1.0, 0.0]])).unwrap()) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_zero_probability_is_finite() {
        let v = s(&ce_loss(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap());
        assert!(v.is_finite());
        assert!((v + PROB_EPSILON.ln()).abs() < 1e-9);
    }

    #[test]
    fn ce_logit_path_matches_probability_path() {
        let logits = m(&[&[0.5, -1.0, 2.0], &[3.0, 0.0, -2.0]]);
        let y = m(&[&[0.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]);
        let probs = crate::head::softmax_rows(&logits).unwrap();
        let a = s(&ce_loss_from_logits(&logits, &y).unwrap());
        let b = s(&ce_loss(&probs, &y).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(weights_at(0, 100, 0.9419).unwrap(), (0.0, 1.0));
        let (l1, l2) = weights_at(100, 100, 0.9419).unwrap();
        assert!((l1 - 100.0 / 101.0 * 0.9419).abs() < 1e-15);
        assert!((l1 - 0.932_574_257_425_742_6).abs() < 1e-12);
        assert!(l1 < 0.9419 && l2 > 0.0);
        assert!(weights_at(0, 0, 0.5).is_err());
        assert!(weights_at(0, 10, 0.0).is_err());
        assert!(weights_at(0, 10, 1.5).is_err());
    }

    #[test]
    fn combined_loss_cases() {
        let pred = t(&[0.2, 0.8]);
        let target = t(&[0.4, 0.5]);
        let logits = m(&[&[0.1, 0.3], &[1.0, -1.0]]);
        let y = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let lr = s(&l1_loss(&pred, &target).unwrap());
        let lc = s(&ce_loss_from_logits(&logits, &y).unwrap());

        let start = ScheduleState::progressive(0, 10, 0.9).unwrap();
        let parts = combined_loss(&pred, Some(ClassOutput::Logits(&logits)), &target, Some(&y), &start).unwrap();
        assert_eq!(s(&parts.total), lc);

        let fixed = WeightSchedule::Fixed { lambda1: 0.5, lambda2: 0.5 }.state(3, 10).unwrap();
        let parts = combined_loss(&pred, Some(ClassOutput::Logits(&logits)), &target, Some(&y), &fixed).unwrap();
        assert!((s(&parts.total) - (lr + lc) / 2.0).abs() < 1e-15);

        let perfect = m(&[&[0.0, 1.0]]);
        let parts = combined_loss(&t(&[0.5]), Some(ClassOutput::Probs(&perfect)), &t(&[0.5]), Some(&perfect), &fixed).unwrap();
        assert_eq!(s(&parts.total), 0.0);
    }

    #[test]
    fn regression_only_requires_zero_class_weight() {
        let pred = t(&[0.2]);
        let st = WeightSchedule::RegressionOnly.state(0, 5).unwrap();
        assert!(combined_loss(&pred, None, &pred, None, &st).is_ok());
        let st = ScheduleState::progressive(1, 5, 0.9).unwrap();
        assert!(combined_loss(&pred, None, &pred, None, &st).is_err());
    }
}
