//! Training criteria for the softmax and regression heads. The CRF
//! likelihood lives in [`crate::crf`].

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Scalar, TensorError, Var};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    WeightedBce,
    PenalizedMse,
    PlainMse,
    CrfNll,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::WeightedBce => "weighted-bce",
            LossKind::PenalizedMse => "penalized-mse",
            LossKind::PlainMse => "plain-mse",
            LossKind::CrfNll => "crf-nll",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weighted-bce" | "bce" => Ok(LossKind::WeightedBce),
            "penalized-mse" | "pmse" => Ok(LossKind::PenalizedMse),
            "plain-mse" | "mse" => Ok(LossKind::PlainMse),
            "crf-nll" | "nll" => Ok(LossKind::CrfNll),
            _ => Err(format!(
                "unknown loss `{s}` (expected weighted-bce, penalized-mse, plain-mse or crf-nll)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        let alpha = match kind {
            LossKind::WeightedBce => 2.0,
            LossKind::PenalizedMse => 4.0,
            LossKind::PlainMse | LossKind::CrfNll => 1.0,
        };
        LossConfig { kind, alpha }
    }
}

fn check_len<F: Scalar>(g: &Graph<F>, op: &'static str, pred: Var, expected: usize) -> Result<(), TensorError> {
    let n = g.value(pred).len();
    if n != expected || n == 0 {
        return Err(TensorError::invalid(
            op,
            format!("{n} predictions for {expected} targets"),
        ));
    }
    Ok(())
}

/// `sum_i -alpha * y_i * log p_i1 - (1 - y_i) * log p_i0` over the rows of a
/// `[T x 2]` probability matrix.
pub fn weighted_bce<F: Scalar>(g: &Graph<F>, probs: Var, targets: &[f64], alpha: f64) -> Result<Var, TensorError> {
    let shape = g.shape(probs);
    if shape.len() != 2 || shape[1] != 2 {
        return Err(TensorError::invalid("weighted_bce", format!("needs [T x 2], got {shape:?}")));
    }
    check_len(g, "weighted_bce", probs, 2 * targets.len())?;
    let floor = F::of(LOG_FLOOR);
    let terms = g.map_indexed(probs, |i, p| {
        let y = targets[i / 2];
        let w = F::of(if i % 2 == 1 { alpha * y } else { 1.0 - y });
        if p > floor {
            (-w * p.ln(), -w / p)
        } else {
            (-w * floor.ln(), F::zero())
        }
    });
    Ok(g.sum(terms))
}

/// Mean of the piecewise penalty: `alpha * d^2` on targets equal to 1,
/// `d^2 / 2` elsewhere, and `|d| - 1/2` once `|d| >= 1`.
pub fn penalized_mse<F: Scalar>(g: &Graph<F>, pred: Var, targets: &[f64], alpha: f64) -> Result<Var, TensorError> {
    check_len(g, "penalized_mse", pred, targets.len())?;
    let z = g.map_indexed(pred, |i, p| {
        let y = targets[i];
        let d = p - F::of(y);
        if d.abs() >= F::one() {
            (d.abs() - F::of(0.5), d.signum())
        } else if y == 1.0 {
            let a = F::of(alpha);
            (a * d * d, F::of(2.0) * a * d)
        } else {
            (F::of(0.5) * d * d, d)
        }
    });
    Ok(g.mean(z))
}

pub fn plain_mse<F: Scalar>(g: &Graph<F>, pred: Var, targets: &[f64]) -> Result<Var, TensorError> {
    check_len(g, "plain_mse", pred, targets.len())?;
    let z = g.map_indexed(pred, |i, p| {
        let d = p - F::of(targets[i]);
        (d * d, F::of(2.0) * d)
    });
    Ok(g.mean(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn eval(f: impl Fn(&Graph<f64>) -> Var) -> f64 {
        let g = Graph::new();
        let v = f(&g);
        g.value(v).item()
    }

    fn probs(g: &Graph<f64>, rows: &[[f64; 2]]) -> Var {
        g.constant(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap())
    }

    #[test]
    fn bce_terms() {
        let pos = eval(|g| weighted_bce(g, probs(g, &[[0.5, 0.5]]), &[1.0], 2.0).unwrap());
        assert!((pos - 2.0 * 2f64.ln()).abs() < 1e-12);
        let neg = eval(|g| weighted_bce(g, probs(g, &[[0.5, 0.5]]), &[0.0], 2.0).unwrap());
        assert!((neg - 2f64.ln()).abs() < 1e-12);
        let perfect = eval(|g| weighted_bce(g, probs(g, &[[0.0, 1.0], [1.0, 0.0]]), &[1.0, 0.0], 2.0).unwrap());
        assert!(perfect <= 1e-6);
    }

    #[test]
    fn bce_monotone_in_alpha() {
        let at = |a| eval(|g| weighted_bce(g, probs(g, &[[0.3, 0.7], [0.6, 0.4]]), &[1.0, 0.0], a).unwrap());
        assert!(at(1.0) < at(2.0) && at(2.0) < at(4.0));
    }

    #[test]
    fn penalized_cases() {
        let z = |p: f64, y: f64| {
            eval(|g| penalized_mse(g, g.constant(Tensor::from_vec(vec![p])), &[y], 4.0).unwrap())
        };
        assert!((z(0.8, 1.0) - 0.16).abs() < 1e-12);
        assert!((z(0.8, 0.5) - 0.045).abs() < 1e-12);
        assert!((z(1.5, 0.25) - 0.75).abs() < 1e-12);
        // the kink belongs to the linear branch
        assert!((z(1.25, 0.25) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn half_alpha_is_half_mse() {
        let p = vec![0.2, 0.9, 0.4];
        let y = [1.0, 0.5, 0.25];
        let a = eval(|g| penalized_mse(g, g.constant(Tensor::from_vec(p.clone())), &y, 0.5).unwrap());
        let b = eval(|g| plain_mse(g, g.constant(Tensor::from_vec(p.clone())), &y).unwrap());
        assert!((a - 0.5 * b).abs() < 1e-12);
    }

    #[test]
    fn plain_mse_values() {
        assert_eq!(eval(|g| plain_mse(g, g.constant(Tensor::from_vec(vec![0.5, 1.0])), &[0.5, 1.0]).unwrap()), 0.0);
        let v = eval(|g| plain_mse(g, g.constant(Tensor::from_vec(vec![0.6, 1.1, 0.1])), &[0.5, 1.0, 0.0]).unwrap());
        assert!((v - 0.01).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_vec(vec![0.5, 1.0]));
        assert!(plain_mse(&g, p, &[0.5]).is_err());
    }
}
