//! Flat `key=value` run configuration layered as defaults, then a config
//! file, then command-line overrides.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::ModelConfig;
use crate::sim::SimSpec;
use crate::sweep::{ExperimentConfig, SweepParam};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
    pub sim: SimSpec,
    pub sweep_param: SweepParam,
    /// Empty means the parameter's default grid.
    pub sweep_values: Vec<f64>,
    pub traces: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sim = SimSpec {
            seed: train.seed,
            ..SimSpec::default()
        };
        Self {
            model: ModelConfig::default(),
            train,
            features: FeatureConfig::default(),
            sim,
            sweep_param: SweepParam::WindowT,
            sweep_values: Vec::new(),
            traces: None,
            edges: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}={value}: {e}")))
}

fn list(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Applies one setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, t, s) = (&mut self.model, &mut self.train, &mut self.sim);
        match key.trim() {
            "seed" => {
                t.seed = parse(key, v)?;
                s.seed = t.seed;
            }
            "window" => m.window = parse(key, v)?,
            "horizon" => m.horizon = parse(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "n_layers" => m.n_layers = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "d_ff" => m.d_ff = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "topology_bias" => m.topology_bias = parse(key, v)?,
            "head_pool" => m.head_pool = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "warmup_fraction" => t.warmup_fraction = parse(key, v)?,
            "alpha" => t.alpha = parse(key, v)?,
            "beta" => t.beta = parse(key, v)?,
            "adam_beta1" => t.adam_beta1 = parse(key, v)?,
            "adam_beta2" => t.adam_beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "record_timing" => t.record_timing = parse(key, v)?,
            "neighbor_direction" => self.features.neighbor_direction = parse(key, v)?,
            "target_metric" => self.features.target_metric = v.to_string(),
            "sweep_param" => self.sweep_param = parse(key, v)?,
            "sweep_values" => {
                self.sweep_values = v
                    .split(',')
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(|x| parse(key, x))
                    .collect::<Result<_>>()?
            }
            "topology" => s.topology = parse(key, v)?,
            "services" => s.services = parse(key, v)?,
            "steps" => s.steps = parse(key, v)?,
            "step_seconds" => s.step_seconds = parse(key, v)?,
            "start_time" => s.start_time = parse(key, v)?,
            "edge_prob" => s.edge_prob = parse(key, v)?,
            "weight_min" => s.weight_min = parse(key, v)?,
            "weight_max" => s.weight_max = parse(key, v)?,
            "lag_min" => s.lag_min = parse(key, v)?,
            "lag_max" => s.lag_max = parse(key, v)?,
            "base_rate" => s.base_rate = parse(key, v)?,
            "amplitude" => s.amplitude = parse(key, v)?,
            "period" => s.period = parse(key, v)?,
            "ar_coef" => s.ar_coef = parse(key, v)?,
            "burst_rate" => s.burst_rate = parse(key, v)?,
            "burst_magnitude" => s.burst_magnitude = parse(key, v)?,
            "noise_std" => s.noise_std = parse(key, v)?,
            "traces" => self.traces = opt_path(v),
            "edges" => self.edges = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order; feeding these
    /// back through [`RunConfig::set`] reproduces the configuration.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, s) = (&self.model, &self.train, &self.sim);
        vec![
            ("seed", t.seed.to_string()),
            ("window", m.window.to_string()),
            ("horizon", m.horizon.to_string()),
            ("d_model", m.d_model.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("dropout", m.dropout.to_string()),
            ("topology_bias", m.topology_bias.to_string()),
            ("head_pool", m.head_pool.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("warmup_fraction", t.warmup_fraction.to_string()),
            ("alpha", t.alpha.to_string()),
            ("beta", t.beta.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("record_timing", t.record_timing.to_string()),
            ("neighbor_direction", self.features.neighbor_direction.to_string()),
            ("target_metric", self.features.target_metric.clone()),
            ("sweep_param", self.sweep_param.to_string()),
            ("sweep_values", list(&self.sweep_values)),
            ("topology", s.topology.to_string()),
            ("services", s.services.to_string()),
            ("steps", s.steps.to_string()),
            ("step_seconds", s.step_seconds.to_string()),
            ("start_time", s.start_time.to_string()),
            ("edge_prob", s.edge_prob.to_string()),
            ("weight_min", s.weight_min.to_string()),
            ("weight_max", s.weight_max.to_string()),
            ("lag_min", s.lag_min.to_string()),
            ("lag_max", s.lag_max.to_string()),
            ("base_rate", s.base_rate.to_string()),
            ("amplitude", s.amplitude.to_string()),
            ("period", s.period.to_string()),
            ("ar_coef", s.ar_coef.to_string()),
            ("burst_rate", s.burst_rate.to_string()),
            ("burst_magnitude", s.burst_magnitude.to_string()),
            ("noise_std", s.noise_std.to_string()),
            ("traces", path(&self.traces)),
            ("edges", path(&self.edges)),
            ("checkpoint", path(&self.checkpoint)),
            ("out_dir", self.out_dir.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            features: self.features.clone(),
        }
    }

    pub fn sweep_grid(&self) -> Vec<f64> {
        if self.sweep_values.is_empty() {
            self.sweep_param.default_grid()
        } else {
            self.sweep_values.clone()
        }
    }
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))
}
