//! Trace standardization, multi-granularity feature fusion and windowing.
//!
//! A fused step for service `i` is `own ‖ neighborhood ‖ global`, each block
//! `d` wide: the service's standardized metrics, their aggregate over its
//! graph neighbors, and the cross-service mean.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NeighborDirection, ServiceGraph};

pub const SIGMA_FLOOR: f64 = 1e-6;

/// Uniform-grid multivariate observations, one `[time x d]` block per
/// service. Step `k` sits at `start_time + k * step_seconds`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadSeries {
    services: Vec<String>,
    metric_names: Vec<String>,
    start_time: i64,
    step_seconds: i64,
    steps: usize,
    values: Vec<Vec<f64>>,
}

impl LoadSeries {
    pub fn new(
        services: Vec<String>,
        metric_names: Vec<String>,
        start_time: i64,
        step_seconds: i64,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let d = metric_names.len();
        if d == 0 {
            return Err(Error::Contract("a load series needs at least one metric".into()));
        }
        if services.is_empty() || values.len() != services.len() {
            return Err(Error::Contract(format!(
                "{} value blocks for {} services",
                values.len(),
                services.len()
            )));
        }
        if step_seconds <= 0 {
            return Err(Error::Contract(format!("step of {step_seconds} s is not positive")));
        }
        let steps = values[0].len() / d;
        for (name, block) in services.iter().zip(&values) {
            if block.len() != steps * d || block.len() % d != 0 {
                return Err(Error::Contract(format!(
                    "service {name} has {} values, expected {}",
                    block.len(),
                    steps * d
                )));
            }
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "load_series" });
            }
        }
        Ok(Self {
            services,
            metric_names,
            start_time,
            step_seconds,
            steps,
            values,
        })
    }

    pub fn services(&self) -> &[String] {
        &self.services
    }

    pub fn metric_names(&self) -> &[String] {
        &self.metric_names
    }

    pub fn n_services(&self) -> usize {
        self.services.len()
    }

    pub fn n_metrics(&self) -> usize {
        self.metric_names.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn start_time(&self) -> i64 {
        self.start_time
    }

    pub fn step_seconds(&self) -> i64 {
        self.step_seconds
    }

    pub fn timestamp(&self, step: usize) -> i64 {
        self.start_time + step as i64 * self.step_seconds
    }

    pub fn metric_index(&self, name: &str) -> Result<usize> {
        self.metric_names
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| Error::Config(format!("unknown metric {name:?}; have {:?}", self.metric_names)))
    }

    pub fn value(&self, service: usize, step: usize, metric: usize) -> f64 {
        self.values[service][step * self.n_metrics() + metric]
    }

    /// All metrics of `service` at `step`.
    pub fn row(&self, service: usize, step: usize) -> &[f64] {
        let d = self.n_metrics();
        &self.values[service][step * d..(step + 1) * d]
    }

    pub fn service_values(&self, service: usize) -> &[f64] {
        &self.values[service]
    }

    pub fn service_values_mut(&mut self, service: usize) -> &mut [f64] {
        &mut self.values[service]
    }
}

/// Per-service, per-metric mean and standard deviation from the training
/// range, indexed `[service * d + metric]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    services: Vec<String>,
    metric_names: Vec<String>,
    mean: Vec<f64>,
    std: Vec<f64>,
    sigma_floor: f64,
}

impl Standardizer {
    pub fn mean(&self, service: usize, metric: usize) -> f64 {
        self.mean[service * self.metric_names.len() + metric]
    }

    pub fn std(&self, service: usize, metric: usize) -> f64 {
        self.std[service * self.metric_names.len() + metric]
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma_floor
    }

    fn check_compatible(&self, series: &LoadSeries) -> Result<()> {
        if series.services() != self.services.as_slice() {
            return Err(Error::Contract("series services differ from the standardizer's".into()));
        }
        if series.metric_names() != self.metric_names.as_slice() {
            return Err(Error::Contract("series metrics differ from the standardizer's".into()));
        }
        Ok(())
    }
}

/// Population statistics over `train` only; `sigma < floor` becomes `floor`.
pub fn fit_standardizer(series: &LoadSeries, train: Range<usize>) -> Result<Standardizer> {
    if train.is_empty() || train.end > series.steps() {
        return Err(Error::Window(format!(
            "training range {train:?} is empty or exceeds {} steps",
            series.steps()
        )));
    }
    let d = series.n_metrics();
    let count = train.len() as f64;
    let mut mean = Vec::with_capacity(series.n_services() * d);
    let mut std = Vec::with_capacity(series.n_services() * d);
    for s in 0..series.n_services() {
        for m in 0..d {
            let mu = train.clone().map(|t| series.value(s, t, m)).sum::<f64>() / count;
            let var = train
                .clone()
                .map(|t| {
                    let e = series.value(s, t, m) - mu;
                    e * e
                })
                .sum::<f64>()
                / count;
            mean.push(mu);
            std.push(var.sqrt().max(SIGMA_FLOOR));
        }
    }
    Ok(Standardizer {
        services: series.services().to_vec(),
        metric_names: series.metric_names().to_vec(),
        mean,
        std,
        sigma_floor: SIGMA_FLOOR,
    })
}

fn map_series(series: &LoadSeries, s: &Standardizer, f: impl Fn(f64, f64, f64) -> f64) -> Result<LoadSeries> {
    s.check_compatible(series)?;
    let d = series.n_metrics();
    let values = (0..series.n_services())
        .map(|svc| {
            series
                .service_values(svc)
                .iter()
                .enumerate()
                .map(|(i, x)| f(*x, s.mean(svc, i % d), s.std(svc, i % d)))
                .collect()
        })
        .collect();
    LoadSeries::new(
        series.services().to_vec(),
        series.metric_names().to_vec(),
        series.start_time(),
        series.step_seconds(),
        values,
    )
}

/// `(x - mu) / sigma` elementwise.
pub fn standardize(series: &LoadSeries, s: &Standardizer) -> Result<LoadSeries> {
    map_series(series, s, |x, mu, sigma| (x - mu) / sigma)
}

pub fn destandardize(series: &LoadSeries, s: &Standardizer) -> Result<LoadSeries> {
    map_series(series, s, |x, mu, sigma| x * sigma + mu)
}

/// Cross-service mean of a row-major `[n x d]` block.
pub fn global_feature(per_service: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || per_service.is_empty() || per_service.len() % d != 0 {
        return Err(Error::Contract("global feature needs at least one service".into()));
    }
    let n = per_service.len() / d;
    let mut g = vec![0.0; d];
    for row in per_service.chunks(d) {
        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    g.iter_mut().for_each(|v| *v /= n as f64);
    Ok(g)
}

/// One fused window: inputs `z` are `[T x 3d]`, targets cover `t+1..=t+H`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSample {
    pub service: usize,
    pub t: usize,
    pub z: Vec<f64>,
    pub service_target: Vec<f64>,
    pub cluster_target: Vec<f64>,
}

/// Builds one sample straight from the raw series. `aggregation` is the
/// (already oriented and normalized) neighbor operator.
#[allow(clippy::too_many_arguments)]
pub fn fuse_window(
    series: &LoadSeries,
    aggregation: &ServiceGraph,
    standardizer: &Standardizer,
    service: usize,
    t: usize,
    window: usize,
    horizon: usize,
    target_metric: usize,
) -> Result<FusedSample> {
    check_window(series.steps(), t, window, horizon)?;
    if service >= series.n_services() || target_metric >= series.n_metrics() {
        return Err(Error::Window(format!("service {service} / metric {target_metric} out of range")));
    }
    let d = series.n_metrics();
    let n = series.n_services();
    let step_block = |u: usize| -> Vec<f64> {
        let mut block = Vec::with_capacity(n * d);
        for s in 0..n {
            for m in 0..d {
                block.push((series.value(s, u, m) - standardizer.mean(s, m)) / standardizer.std(s, m));
            }
        }
        block
    };
    let mut z = Vec::with_capacity(window * 3 * d);
    for u in t + 1 - window..=t {
        let block = step_block(u);
        let h = aggregation.neighborhood_aggregate(&block, d)?;
        let g = global_feature(&block, d)?;
        z.extend_from_slice(&block[service * d..(service + 1) * d]);
        z.extend_from_slice(&h[service * d..(service + 1) * d]);
        z.extend_from_slice(&g);
    }
    let mut service_target = Vec::with_capacity(horizon);
    let mut cluster_target = Vec::with_capacity(horizon);
    for u in t + 1..=t + horizon {
        let block = step_block(u);
        service_target.push(block[service * d + target_metric]);
        cluster_target.push(global_feature(&block, d)?[target_metric]);
    }
    Ok(FusedSample {
        service,
        t,
        z,
        service_target,
        cluster_target,
    })
}

fn check_window(steps: usize, t: usize, window: usize, horizon: usize) -> Result<()> {
    if window == 0 || horizon == 0 {
        return Err(Error::Window("window and horizon must be positive".into()));
    }
    if t + 1 < window || t + horizon >= steps {
        return Err(Error::Window(format!(
            "t={t} with T={window}, H={horizon} does not fit in {steps} steps"
        )));
    }
    Ok(())
}

/// Contiguous train/validation/test step ranges (half-open).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

fn split_lengths(steps: usize) -> (usize, usize, usize) {
    let train = steps * 8 / 10;
    let val = steps / 10;
    (train, val, steps - train - val)
}

/// 8:1:1 chronological split. Each part must hold at least `min_span` steps
/// (window plus horizon) so that it contains a full sample.
pub fn chronological_split(steps: usize, min_span: usize) -> Result<SplitRanges> {
    let (train, val, test) = split_lengths(steps);
    if train.min(val).min(test) < min_span {
        let minimum = (steps..)
            .find(|&n| {
                let (a, b, c) = split_lengths(n);
                a.min(b).min(c) >= min_span
            })
            .unwrap_or(steps);
        return Err(Error::Window(format!(
            "series of {steps} steps is too short: each split needs {min_span} steps, \
             minimum length is {minimum}"
        )));
    }
    Ok(SplitRanges {
        train: 0..train,
        val: train..train + val,
        test: train + val..steps,
    })
}

/// Every `t` whose inputs `t-T+1..=t` and targets `t+1..=t+H` lie in `range`.
pub fn window_ends(range: &Range<usize>, window: usize, horizon: usize) -> Range<usize> {
    let first = range.start + window - 1;
    let end = range.end.saturating_sub(horizon);
    first..end.max(first)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WindowIndex {
    pub service: usize,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub neighbor_direction: NeighborDirection,
    pub target_metric: String,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            neighbor_direction: NeighborDirection::Out,
            target_metric: "rate".into(),
        }
    }
}

/// A batch of fused windows laid out for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedWindowBatch {
    /// `[batch * T x 3d]`.
    pub inputs: Vec<f64>,
    /// `[batch x H]`, standardized target metric of each sample's service.
    pub service_targets: Vec<f64>,
    /// `[batch x H]`, cross-service mean of the standardized target metric.
    pub cluster_targets: Vec<f64>,
    pub service_index: Vec<usize>,
    pub strength: Vec<f64>,
    pub window: usize,
    pub horizon: usize,
    pub target_metric: usize,
}

impl FusedWindowBatch {
    pub fn len(&self) -> usize {
        self.service_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.service_index.is_empty()
    }
}

/// Standardized, fused features for the whole series plus split windows.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    /// `[service][step * 3d + feature]`.
    fused: Vec<Vec<f64>>,
    /// `[service][step]` standardized target metric.
    target: Vec<Vec<f64>>,
    /// `[step]` cross-service mean of `target`.
    cluster: Vec<f64>,
    strength: Vec<f64>,
    standardizer: Standardizer,
    splits: SplitRanges,
    window: usize,
    horizon: usize,
    n_metrics: usize,
    target_metric: usize,
    pub train: Vec<WindowIndex>,
    pub val: Vec<WindowIndex>,
    pub test: Vec<WindowIndex>,
}

fn enumerate_windows(n_services: usize, range: &Range<usize>, window: usize, horizon: usize) -> Vec<WindowIndex> {
    let ends = window_ends(range, window, horizon);
    (0..n_services)
        .flat_map(|service| ends.clone().map(move |t| WindowIndex { service, t }))
        .collect()
}

impl WindowedDataset {
    pub fn prepare(
        series: &LoadSeries,
        graph: &ServiceGraph,
        features: &FeatureConfig,
        window: usize,
        horizon: usize,
    ) -> Result<Self> {
        if graph.services() != series.services() {
            return Err(Error::Contract("graph and series list different services".into()));
        }
        if window == 0 || horizon == 0 {
            return Err(Error::Window("window and horizon must be positive".into()));
        }
        let target_metric = series.metric_index(&features.target_metric)?;
        let splits = chronological_split(series.steps(), window + horizon)?;
        let standardizer = fit_standardizer(series, splits.train.clone())?;
        let std_series = standardize(series, &standardizer)?;
        let aggregation = graph.aggregation_matrix(features.neighbor_direction)?;

        let (n, d, steps) = (series.n_services(), series.n_metrics(), series.steps());
        let mut fused = vec![Vec::with_capacity(steps * 3 * d); n];
        let mut target = vec![Vec::with_capacity(steps); n];
        let mut cluster = Vec::with_capacity(steps);
        let mut block = Vec::with_capacity(n * d);
        for u in 0..steps {
            block.clear();
            for s in 0..n {
                block.extend_from_slice(std_series.row(s, u));
            }
            let h = aggregation.neighborhood_aggregate(&block, d)?;
            let g = global_feature(&block, d)?;
            for s in 0..n {
                fused[s].extend_from_slice(&block[s * d..(s + 1) * d]);
                fused[s].extend_from_slice(&h[s * d..(s + 1) * d]);
                fused[s].extend_from_slice(&g);
                target[s].push(block[s * d + target_metric]);
            }
            cluster.push(g[target_metric]);
        }

        Ok(Self {
            train: enumerate_windows(n, &splits.train, window, horizon),
            val: enumerate_windows(n, &splits.val, window, horizon),
            test: enumerate_windows(n, &splits.test, window, horizon),
            fused,
            target,
            cluster,
            strength: graph.adjacency_strength().0,
            standardizer,
            splits,
            window,
            horizon,
            n_metrics: d,
            target_metric,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn fused_width(&self) -> usize {
        3 * self.n_metrics
    }

    pub fn n_services(&self) -> usize {
        self.fused.len()
    }

    pub fn splits(&self) -> &SplitRanges {
        &self.splits
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn strength(&self) -> &[f64] {
        &self.strength
    }

    pub fn target_metric(&self) -> usize {
        self.target_metric
    }

    /// Standardized target metric of `service` at `step`.
    pub fn target_value(&self, service: usize, step: usize) -> f64 {
        self.target[service][step]
    }

    pub fn cluster_value(&self, step: usize) -> f64 {
        self.cluster[step]
    }

    pub fn batch(&self, windows: &[WindowIndex]) -> FusedWindowBatch {
        let (tw, h, w) = (self.window, self.horizon, self.fused_width());
        let mut out = FusedWindowBatch {
            inputs: Vec::with_capacity(windows.len() * tw * w),
            service_targets: Vec::with_capacity(windows.len() * h),
            cluster_targets: Vec::with_capacity(windows.len() * h),
            service_index: Vec::with_capacity(windows.len()),
            strength: Vec::with_capacity(windows.len()),
            window: tw,
            horizon: h,
            target_metric: self.target_metric,
        };
        for wi in windows {
            let first = wi.t + 1 - tw;
            out.inputs
                .extend_from_slice(&self.fused[wi.service][first * w..(wi.t + 1) * w]);
            out.service_targets
                .extend_from_slice(&self.target[wi.service][wi.t + 1..=wi.t + h]);
            out.cluster_targets.extend_from_slice(&self.cluster[wi.t + 1..=wi.t + h]);
            out.service_index.push(wi.service);
            out.strength.push(self.strength[wi.service]);
        }
        out
    }
}
