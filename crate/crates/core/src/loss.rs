//! Training objective and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::config::{BalanceMode, LossConfig};
use crate::error::{AmdError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Mean squared error over all elements.
pub fn pred_loss<F: Scalar>(g: &mut Graph<'_, F>, y_hat: Var, y: Var) -> Result<Var> {
    if g.shape(y_hat) != g.shape(y) {
        return Err(AmdError::shape(format!(
            "prediction {:?} and target {:?} differ",
            g.shape(y_hat),
            g.shape(y)
        )));
    }
    let d = g.sub(y_hat, y)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// Squared coefficient of variation of the gate matrix `s: [.., m]`.
///
/// `Importance` takes the CV² of the column sums; `PerRow` averages the CV²
/// of each gate vector.
pub fn balance_loss<F: Scalar>(g: &mut Graph<'_, F>, s: Var, eps: f64, mode: BalanceMode) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    let m = *shape.last().ok_or_else(|| AmdError::shape("balance loss on a scalar"))?;
    let rows = g.value(s).len() / m.max(1);
    if rows == 0 {
        return Err(AmdError::shape("balance loss needs at least one gate row"));
    }
    let s2 = g.reshape(s, &[rows, m])?;
    let (x, axis) = match mode {
        BalanceMode::Importance => (g.sum_axis(s2, 0, false)?, 0),
        BalanceMode::PerRow => (s2, 1),
    };
    let var = g.var_axis(x, axis, false)?;
    let mean = g.mean_axis(x, axis, false)?;
    let sq = g.mul(mean, mean)?;
    let denom = g.shift(sq, F::of(eps));
    let cv = g.div(var, denom)?;
    Ok(g.mean_all(cv))
}

/// Value-level importance balance loss over `rows x m` gates.
pub fn selector_balance_loss<F: Scalar>(gates: &Tensor<F>, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.leaf(gates, false);
    let l = balance_loss(&mut g, s, eps, BalanceMode::Importance)?;
    Ok(g.value(l).item()?.as_f64())
}

/// `pred + lambda1 * balance`; weight decay lives in the optimizer.
pub fn total_loss<F: Scalar>(g: &mut Graph<'_, F>, pred: Var, balance: Var, cfg: &LossConfig) -> Result<Var> {
    for (v, name) in [(pred, "prediction"), (balance, "balance")] {
        if !g.value(v).all_finite() {
            return Err(AmdError::NonFinite {
                context: format!("{name} loss"),
                coordinate: 0,
            });
        }
    }
    if cfg.lambda1 == 0.0 {
        return Ok(pred);
    }
    let b = g.scale(balance, F::of(cfg.lambda1));
    g.add(pred, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

pub fn evaluate_metrics<F: Scalar>(y_hat: &[F], y: &[F]) -> Result<Metrics> {
    if y_hat.len() != y.len() {
        return Err(AmdError::shape(format!(
            "prediction has {} values, target {}",
            y_hat.len(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(AmdError::shape("metrics over zero values"));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, b) in y_hat.iter().zip(y) {
        let d = a.as_f64() - b.as_f64();
        se += d * d;
        ae += d.abs();
    }
    let n = y.len() as f64;
    Ok(Metrics { mse: se / n, mae: ae / n })
}

/// Accumulates metrics over batches with running sums.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    se: f64,
    ae: f64,
    n: usize,
}

impl MetricsAccumulator {
    pub fn push<F: Scalar>(&mut self, y_hat: &[F], y: &[F]) -> Result<()> {
        let m = evaluate_metrics(y_hat, y)?;
        self.se += m.mse * y.len() as f64;
        self.ae += m.mae * y.len() as f64;
        self.n += y.len();
        Ok(())
    }

    pub fn finish(&self) -> Metrics {
        let n = self.n.max(1) as f64;
        Metrics {
            mse: self.se / n,
            mae: self.ae / n,
        }
    }
}
