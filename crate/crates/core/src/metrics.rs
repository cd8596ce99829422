//! Forecast error metrics and the per-service mean baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{WindowIndex, WindowedDataset};
use crate::model::ForecastModel;
use crate::train::predict_windows;

/// Floor on `|y|` in the MAPE denominator, in standardized units.
pub const MAPE_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mse: f64,
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    /// Coefficient of determination; `None` when the targets are constant.
    pub r_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub service: MetricSet,
    pub cluster: MetricSet,
    pub windows: usize,
    pub horizon: usize,
}

/// Pooled MSE, MAE, MAPE and R-score over every element.
pub fn compute_metrics(predictions: &[f64], targets: &[f64]) -> Result<MetricSet> {
    if predictions.len() != targets.len() {
        return Err(Error::shape("compute_metrics", &[predictions.len()], &[targets.len()]));
    }
    if targets.len() < 2 {
        return Err(Error::Contract("metrics need at least two samples".into()));
    }
    let n = targets.len() as f64;
    let mut mse = 0.0;
    let mut mae = 0.0;
    let mut mape = 0.0;
    for (p, y) in predictions.iter().zip(targets) {
        let e = p - y;
        mse += e * e;
        mae += e.abs();
        mape += e.abs() / y.abs().max(MAPE_EPS);
    }
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean) * (y - mean)).sum();
    let r_score = (ss_tot > 0.0).then(|| 1.0 - mse / ss_tot);
    Ok(MetricSet {
        mse: mse / n,
        mae: mae / n,
        mape: 100.0 * mape / n,
        r_score,
    })
}

fn targets(data: &WindowedDataset, windows: &[WindowIndex]) -> (Vec<f64>, Vec<f64>) {
    let h = data.horizon();
    let mut y = Vec::with_capacity(windows.len() * h);
    let mut g = Vec::with_capacity(windows.len() * h);
    for w in windows {
        for k in 1..=h {
            y.push(data.target_value(w.service, w.t + k));
            g.push(data.cluster_value(w.t + k));
        }
    }
    (y, g)
}

fn report(data: &WindowedDataset, windows: &[WindowIndex], y_hat: &[f64], g_hat: &[f64]) -> Result<MetricsReport> {
    let (y, g) = targets(data, windows);
    Ok(MetricsReport {
        service: compute_metrics(y_hat, &y)?,
        cluster: compute_metrics(g_hat, &g)?,
        windows: windows.len(),
        horizon: data.horizon(),
    })
}

/// Model metrics on `windows` (normally the test split).
pub fn evaluate_model(model: &ForecastModel, data: &WindowedDataset, windows: &[WindowIndex]) -> Result<MetricsReport> {
    let (y_hat, g_hat) = predict_windows(model, data, windows)?;
    report(data, windows, &y_hat, &g_hat)
}

/// Predicts, for every horizon step, the train-split mean of the
/// standardized target (per service, and of the cluster series).
pub fn baseline_mean_predictor(data: &WindowedDataset, windows: &[WindowIndex]) -> Result<MetricsReport> {
    let train = data.splits().train.clone();
    if train.is_empty() {
        return Err(Error::Window("empty training range".into()));
    }
    let len = train.len() as f64;
    let service_means: Vec<f64> = (0..data.n_services())
        .map(|s| train.clone().map(|t| data.target_value(s, t)).sum::<f64>() / len)
        .collect();
    let cluster_mean = train.map(|t| data.cluster_value(t)).sum::<f64>() / len;
    let h = data.horizon();
    let y_hat: Vec<f64> = windows
        .iter()
        .flat_map(|w| std::iter::repeat_n(service_means[w.service], h))
        .collect();
    let g_hat = vec![cluster_mean; windows.len() * h];
    report(data, windows, &y_hat, &g_hat)
}
