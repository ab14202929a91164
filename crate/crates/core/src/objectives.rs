//! Training loss algebra: MSE, the differentiable batch PLCC, and the hybrid
//! objective `mse + lambda * (1 - plcc)`, all with analytic gradients with
//! respect to the predictions.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{AqaError, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HybridLossConfig {
    /// Balance between the MSE term and the correlation penalty.
    pub lambda: f64,
    /// Variance guard added under each square root of the PLCC term.
    pub epsilon: f64,
}

impl Default for HybridLossConfig {
    fn default() -> Self {
        HybridLossConfig {
            lambda: 0.5,
            epsilon: 1e-8,
        }
    }
}

/// A batch of predictions paired with ground-truth scores.
#[derive(Debug, Clone, Copy)]
pub struct ScoreBatch<'a> {
    pub predictions: &'a [f64],
    pub targets: &'a [f64],
}

impl<'a> ScoreBatch<'a> {
    pub fn new(predictions: &'a [f64], targets: &'a [f64]) -> Result<Self> {
        if predictions.len() != targets.len() {
            return Err(AqaError::Validation(format!(
                "prediction/target length mismatch: {} vs {}",
                predictions.len(),
                targets.len()
            )));
        }
        if predictions.iter().chain(targets).any(|v| !v.is_finite()) {
            return Err(AqaError::Numeric("non-finite score in batch".into()));
        }
        Ok(ScoreBatch {
            predictions,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

/// Differentiable PLCC value plus the degeneracy flag raised when either
/// side of the batch has (numerically) zero variance.
#[derive(Debug, Clone, Copy)]
pub struct PlccValue {
    pub value: f64,
    pub degenerate: bool,
}

pub fn mse(batch: &ScoreBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(AqaError::Validation("mse needs at least one sample".into()));
    }
    let n = batch.len() as f64;
    Ok(batch
        .predictions
        .iter()
        .zip(batch.targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

pub fn mse_grad(batch: &ScoreBatch) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(AqaError::Validation("mse needs at least one sample".into()));
    }
    let n = batch.len() as f64;
    Ok(batch
        .predictions
        .iter()
        .zip(batch.targets)
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect())
}

struct CenteredStats {
    a: Vec<f64>,
    b: Vec<f64>,
    sxy: f64,
    sxx: f64,
    syy: f64,
}

fn centered(batch: &ScoreBatch) -> Result<CenteredStats> {
    if batch.len() < 2 {
        return Err(AqaError::Validation(
            "correlation terms need at least two samples".into(),
        ));
    }
    let n = batch.len() as f64;
    let mp = batch.predictions.iter().sum::<f64>() / n;
    let mt = batch.targets.iter().sum::<f64>() / n;
    let a: Vec<f64> = batch.predictions.iter().map(|p| p - mp).collect();
    let b: Vec<f64> = batch.targets.iter().map(|t| t - mt).collect();
    let sxy = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let sxx = a.iter().map(|x| x * x).sum();
    let syy = b.iter().map(|y| y * y).sum();
    Ok(CenteredStats { a, b, sxy, sxx, syy })
}

/// Batch Pearson correlation with `eps` added under each square root, so
/// constant batches evaluate to ~0 instead of dividing by zero.
pub fn plcc_differentiable(batch: &ScoreBatch, eps: f64) -> Result<PlccValue> {
    let st = centered(batch)?;
    let value = st.sxy / ((st.sxx + eps).sqrt() * (st.syy + eps).sqrt());
    Ok(PlccValue {
        value,
        degenerate: st.sxx <= eps || st.syy <= eps,
    })
}

/// Analytic gradient of [`plcc_differentiable`] with respect to predictions.
pub fn plcc_grad(batch: &ScoreBatch, eps: f64) -> Result<Vec<f64>> {
    let st = centered(batch)?;
    let u = 1.0 / (st.sxx + eps).sqrt();
    let w = 1.0 / (st.syy + eps).sqrt();
    Ok(st
        .a
        .iter()
        .zip(&st.b)
        .map(|(ai, bi)| u * w * (bi - st.sxy * ai / (st.sxx + eps)))
        .collect())
}

/// Hybrid objective: `mse + lambda * (1 - plcc)`.
pub fn hybrid_loss(batch: &ScoreBatch, config: &HybridLossConfig) -> Result<f64> {
    let m = mse(batch)?;
    let p = plcc_differentiable(batch, config.epsilon)?;
    Ok(m + config.lambda * (1.0 - p.value))
}

pub fn hybrid_grad(batch: &ScoreBatch, config: &HybridLossConfig) -> Result<Vec<f64>> {
    let mg = mse_grad(batch)?;
    let pg = plcc_grad(batch, config.epsilon)?;
    Ok(mg
        .iter()
        .zip(&pg)
        .map(|(m, p)| m - config.lambda * p)
        .collect())
}

/// Tape adapter: predictions as an `N x 1` column, loss and gradient out.
pub fn hybrid_head(
    pred_col: &Array2<f64>,
    targets: &[f64],
    config: &HybridLossConfig,
) -> Result<(f64, Array2<f64>)> {
    let preds: Vec<f64> = pred_col.iter().cloned().collect();
    let batch = ScoreBatch::new(&preds, targets)?;
    let loss = hybrid_loss(&batch, config)?;
    let grad = hybrid_grad(&batch, config)?;
    Ok((
        loss,
        Array2::from_shape_vec(pred_col.dim(), grad)
            .map_err(|e| AqaError::Numeric(e.to_string()))?,
    ))
}
