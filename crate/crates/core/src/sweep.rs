//! Train-and-evaluate runs and single-factor sensitivity sweeps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, LoadSeries, WindowedDataset};
use crate::graph::ServiceGraph;
use crate::metrics::{baseline_mean_predictor, evaluate_model, MetricSet, MetricsReport};
use crate::model::{ForecastModel, ModelConfig};
use crate::train::{train, TrainConfig, TrainOutcome};

/// Everything one train-and-evaluate run needs besides the data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub training: TrainOutcome,
    pub test: MetricsReport,
    pub baseline: MetricsReport,
}

/// Prepares windows, trains from a fresh seeded model and scores the
/// retained checkpoint on the test split. `d_in` is taken from the data.
pub fn run_experiment(series: &LoadSeries, graph: &ServiceGraph, config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let mut mc = config.model.clone();
    mc.d_in = 3 * series.n_metrics();
    let data = WindowedDataset::prepare(series, graph, &config.features, mc.window, mc.horizon)?;
    let model = ForecastModel::new(mc, config.train.seed)?;
    let training = train(model, &data, &config.train)?;
    let test = evaluate_model(&training.best, &data, &data.test)?;
    let baseline = baseline_mean_predictor(&data, &data.test)?;
    Ok(ExperimentOutcome {
        training,
        test,
        baseline,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "window_T")]
    WindowT,
    #[serde(rename = "encoder_layers")]
    EncoderLayers,
    #[serde(rename = "dropout_p")]
    DropoutP,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::WindowT => "window_T",
            Self::EncoderLayers => "encoder_layers",
            Self::DropoutP => "dropout_p",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Self::WindowT => vec![30.0, 60.0, 90.0, 120.0],
            Self::EncoderLayers => vec![2.0, 4.0, 6.0, 8.0],
            Self::DropoutP => vec![0.0, 0.1, 0.2, 0.3],
        }
    }

    /// `base` with this parameter set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut out = base.clone();
        let count = |v: f64| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Parameter(format!("{} needs a positive integer, got {v}", self.name())))
            }
        };
        match self {
            Self::WindowT => out.model.window = count(value)?,
            Self::EncoderLayers => out.model.n_layers = count(value)?,
            Self::DropoutP => out.model.dropout = value,
        }
        Ok(out)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window_T" => Ok(Self::WindowT),
            "encoder_layers" => Ok(Self::EncoderLayers),
            "dropout_p" => Ok(Self::DropoutP),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?} (expected window_T, encoder_layers or dropout_p)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    /// Every other setting, including the seed shared by all grid points.
    pub base: ExperimentConfig,
}

impl SweepSpec {
    pub fn with_default_grid(param: SweepParam, base: ExperimentConfig) -> Self {
        Self {
            param,
            values: param.default_grid(),
            base,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    /// Service-level test metrics, or the reason the grid point failed.
    pub outcome: std::result::Result<MetricSet, String>,
}

pub const SWEEP_HEADER: &str = "param,value,mse,mae,mape,r_score";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        match &self.outcome {
            Ok(m) => format!(
                "{},{},{},{},{},{}",
                self.param,
                self.value,
                m.mse,
                m.mae,
                m.mape,
                m.r_score.map_or_else(|| "NA".to_string(), |r| r.to_string())
            ),
            Err(_) => format!("{},{},NA,NA,NA,NA", self.param, self.value),
        }
    }
}

/// One full train-and-evaluate per grid value, rows in grid order. A
/// failing value yields an `Err` row and the sweep carries on.
pub fn run_sweep(spec: &SweepSpec, series: &LoadSeries, graph: &ServiceGraph) -> Result<Vec<SweepRow>> {
    if spec.values.is_empty() {
        return Err(Error::Parameter("sweep grid is empty".into()));
    }
    Ok(spec
        .values
        .iter()
        .map(|&value| {
            let outcome = spec
                .param
                .apply(&spec.base, value)
                .and_then(|cfg| run_experiment(series, graph, &cfg))
                .map(|o| o.test.service)
                .map_err(|e| e.to_string());
            SweepRow {
                param: spec.param,
                value,
                outcome,
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
