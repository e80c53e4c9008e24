//! Loss functions shared by the training pipelines: the smoothed MSE used
//! for training the data-driven models and for all evaluation, and the
//! penalized objective for the mechanistic likelihood fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmseWeights {
    /// Weight on the neighbor-day terms.
    pub neighbor_weight: f64,
}

impl Default for SmseWeights {
    fn default() -> Self {
        Self { neighbor_weight: 0.3 }
    }
}

/// Smoothed MSE: each observation `y_i` at day `d` is compared against the
/// predictions at `d` and, weighted by `w`, at `d-1` and `d+1`:
///
/// `(1/N) [ sum (y_i - yhat_d)^2 + w * sum ((y_i - yhat_{d-1})^2 + (y_i - yhat_{d+1})^2) ]`
///
/// Neighbor terms falling outside the prediction horizon are dropped; `N`
/// is the number of observations.
pub fn smse(obs: &[(i64, f64)], pred_t0: i64, pred: &[f64], w: &SmseWeights) -> Result<f64> {
    smse_impl(obs, pred_t0, pred, w, None)
}

/// SMSE together with its gradient w.r.t. the daily predictions.
pub fn smse_with_grad(
    obs: &[(i64, f64)],
    pred_t0: i64,
    pred: &[f64],
    w: &SmseWeights,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; pred.len()];
    let v = smse_impl(obs, pred_t0, pred, w, Some(&mut grad))?;
    Ok((v, grad))
}

fn smse_impl(
    obs: &[(i64, f64)],
    pred_t0: i64,
    pred: &[f64],
    w: &SmseWeights,
    mut grad: Option<&mut Vec<f64>>,
) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::Invalid("SMSE of empty observation set".into()));
    }
    let t1 = pred_t0 + pred.len() as i64 - 1;
    let n = obs.len() as f64;
    let mut total = 0.0;
    for &(day, y) in obs {
        if day < pred_t0 || day > t1 {
            return Err(Error::OutsideHorizon { day, t0: pred_t0, t1 });
        }
        for (d, weight) in [(day, 1.0), (day - 1, w.neighbor_weight), (day + 1, w.neighbor_weight)] {
            if d < pred_t0 || d > t1 || weight == 0.0 {
                continue;
            }
            let idx = (d - pred_t0) as usize;
            let r = y - pred[idx];
            total += weight * r * r;
            if let Some(g) = grad.as_deref_mut() {
                g[idx] += -2.0 * weight * r / n;
            }
        }
    }
    Ok(total / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Log-scale spread constraint on the deviation from population means.
    pub sigma: f64,
    /// Population means `p0_j`, one per fitted parameter.
    pub population_means: Vec<f64>,
}

impl PenaltyConfig {
    pub fn new(population_means: Vec<f64>) -> Self {
        Self { sigma: 5.0, population_means }
    }

    /// `sum_j (ln p_j - ln p0_j)^2 / sigma^2`
    pub fn penalty(&self, params: &[f64]) -> Result<f64> {
        if params.len() != self.population_means.len() {
            return Err(Error::Invalid("parameter/population length mismatch".into()));
        }
        let mut total = 0.0;
        for (&p, &p0) in params.iter().zip(&self.population_means) {
            if !(p > 0.0) || !(p0 > 0.0) {
                return Err(Error::Domain(format!("non-positive parameter {p} (pop {p0})")));
            }
            let d = p.ln() - p0.ln();
            total += d * d / (self.sigma * self.sigma);
        }
        Ok(total)
    }
}

/// Mechanistic training objective: plain MSE over observations plus the
/// log-deviation penalty.
pub fn penalized_objective(
    y: &[f64],
    yhat: &[f64],
    params: &[f64],
    config: &PenaltyConfig,
) -> Result<f64> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::Invalid("objective needs matched non-empty y/yhat".into()));
    }
    let mse = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.len() as f64;
    Ok(mse + config.penalty(params)?)
}
