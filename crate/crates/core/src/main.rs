use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use topocast::checkpoint;
use topocast::config::{parse_override, RunConfig};
use topocast::features::WindowedDataset;
use topocast::io::{ensure_dir, ingest_traces, write_edges, write_json, write_text, write_traces};
use topocast::metrics::{baseline_mean_predictor, evaluate_model, MetricsReport};
use topocast::model::ForecastModel;
use topocast::sim::simulate;
use topocast::sweep::{run_sweep, sweep_csv, SweepSpec};
use topocast::train::{epoch_log_csv, train};
use topocast::{Error, Result};

const TRACES: &str = "traces.csv";
const EDGES: &str = "edges.csv";
const METADATA: &str = "metadata.json";
const CHECKPOINT: &str = "checkpoint.bin";
const EPOCH_LOG: &str = "epochs.csv";
const METRICS: &str = "metrics.json";
const RESOLVED: &str = "run.conf";

#[derive(Parser)]
#[command(name = "topocast", version, about = "Topology-aware load forecasting for microservice call graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic traces, edge list and metadata.
    Simulate(Common),
    /// Train a forecaster and write the best checkpoint and epoch log.
    Train(Common),
    /// Score a checkpoint on the test split against the mean baseline.
    Eval(Common),
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// window_T, encoder_layers or dropout_p.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated grid overriding the default.
        #[arg(long)]
        values: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any configuration key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, extra: &[(String, String)]) -> Result<RunConfig> {
        let mut overrides = self.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        let paths = [
            ("seed", self.seed.map(|s| s.to_string())),
            ("traces", self.traces.as_ref().map(|p| p.display().to_string())),
            ("edges", self.edges.as_ref().map(|p| p.display().to_string())),
            ("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string())),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string())),
        ];
        overrides.extend(paths.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        overrides.extend_from_slice(extra);
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn data_paths(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone()
            .ok_or_else(|| Error::Config(format!("{key} path is required (--{key} or {key}=...)")))
    };
    Ok((need(&cfg.traces, "traces")?, need(&cfg.edges, "edges")?))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = ensure_dir(&cfg.out_dir)?;
    write_text(&dir.join(RESOLVED), &cfg.to_text())?;
    Ok(dir)
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let out = simulate(&cfg.sim)?;
    let dir = out_dir(cfg)?;
    write_traces(&dir.join(TRACES), &out.series)?;
    write_edges(&dir.join(EDGES), &out.topology.graph)?;
    write_json(&dir.join(METADATA), &out.metadata(&cfg.sim))?;
    println!(
        "simulated {} services x {} steps into {}",
        out.series.n_services(),
        out.series.steps(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (tp, ep) = data_paths(cfg)?;
    let (series, graph) = ingest_traces(&tp, &ep)?;
    let mut mc = cfg.model.clone();
    mc.d_in = 3 * series.n_metrics();
    let data = WindowedDataset::prepare(&series, &graph, &cfg.features, mc.window, mc.horizon)?;
    let model = ForecastModel::new(mc, cfg.train.seed)?;
    let outcome = train(model, &data, &cfg.train)?;
    let dir = out_dir(cfg)?;
    let steps_per_epoch = data.train.len().div_ceil(cfg.train.batch_size);
    checkpoint::save(
        &dir.join(CHECKPOINT),
        &outcome.best,
        &cfg.features,
        cfg.train.seed,
        outcome.best_epoch,
        outcome.best_epoch * steps_per_epoch,
    )?;
    write_text(&dir.join(EPOCH_LOG), &epoch_log_csv(&outcome.log))?;
    println!(
        "trained {} epochs ({} steps); best val loss {} at epoch {}",
        outcome.log.len(),
        outcome.steps,
        outcome.best_val_loss,
        outcome.best_epoch
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    model: MetricsReport,
    baseline: MetricsReport,
    checkpoint_epoch: usize,
    checkpoint_step: usize,
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let (tp, ep) = data_paths(cfg)?;
    let ckpt = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT));
    let (model, header) = checkpoint::load(&ckpt)?;
    let (series, graph) = ingest_traces(&tp, &ep)?;
    if model.config().d_in != 3 * series.n_metrics() {
        return Err(Error::Contract(format!(
            "checkpoint expects {} input features, traces give {}",
            model.config().d_in,
            3 * series.n_metrics()
        )));
    }
    let mc = model.config();
    let data = WindowedDataset::prepare(&series, &graph, &header.features, mc.window, mc.horizon)?;
    let out = EvalOutput {
        model: evaluate_model(&model, &data, &data.test)?,
        baseline: baseline_mean_predictor(&data, &data.test)?,
        checkpoint_epoch: header.epoch,
        checkpoint_step: header.step,
    };
    let dir = out_dir(cfg)?;
    write_json(&dir.join(METRICS), &out)?;
    println!(
        "test service MSE {} (baseline {})",
        out.model.service.mse, out.baseline.service.mse
    );
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let (tp, ep) = data_paths(cfg)?;
    let (series, graph) = ingest_traces(&tp, &ep)?;
    let spec = SweepSpec {
        param: cfg.sweep_param,
        values: cfg.sweep_grid(),
        base: cfg.experiment(),
    };
    let rows = run_sweep(&spec, &series, &graph)?;
    for row in &rows {
        if let Err(reason) = &row.outcome {
            eprintln!("topocast: {}={} failed: {reason}", row.param, row.value);
        }
    }
    let dir = out_dir(cfg)?;
    let path = sweep_path(&dir, &spec);
    write_text(&path, &sweep_csv(&rows))?;
    println!("wrote {} sweep rows to {}", rows.len(), path.display());
    Ok(())
}

fn sweep_path(dir: &Path, spec: &SweepSpec) -> PathBuf {
    dir.join(format!("sweep_{}.csv", spec.param))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => cmd_simulate(&c.resolve(&[])?),
        Command::Train(c) => cmd_train(&c.resolve(&[])?),
        Command::Eval(c) => cmd_eval(&c.resolve(&[])?),
        Command::Sweep { common, param, values } => {
            let mut extra = Vec::new();
            if let Some(p) = param {
                extra.push(("sweep_param".to_string(), p));
            }
            if let Some(v) = values {
                extra.push(("sweep_values".to_string(), v));
            }
            cmd_sweep(&common.resolve(&extra)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("topocast: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
