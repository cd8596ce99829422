//! Transformer encoder with a topology-modulated attention bias and two
//! linear forecasting heads (service level and cluster level).
//!
//! Attention logits for head `h` of a window belonging to service `i` are
//!
//! ```text
//! Q_h K_h^T / sqrt(d_h) + gamma_h * s_i * rho_h[k - q + T - 1]
//! ```
//!
//! where `s_i` is the service's adjacency strength, `rho_h` a learned
//! relative-position profile (zero at init) and `gamma_h` a learned gain
//! (one at init). A constant added to every logit of a row is absorbed by
//! the softmax, so the bias has to vary along the key axis to matter.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnLayout, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::features::FusedWindowBatch;
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPool {
    #[default]
    Last,
    Mean,
}

impl fmt::Display for HeadPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadPool::Last => "last",
            HeadPool::Mean => "mean",
        })
    }
}

impl FromStr for HeadPool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!("head_pool must be last or mean, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input window length `T`.
    pub window: usize,
    /// Forecast horizon `H`.
    pub horizon: usize,
    /// Fused input width (three times the metric count).
    pub d_in: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub topology_bias: bool,
    pub head_pool: HeadPool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 60,
            horizon: 12,
            d_in: 12,
            d_model: 256,
            n_layers: 4,
            n_heads: 8,
            d_ff: 1024,
            dropout: 0.1,
            topology_bias: true,
            head_pool: HeadPool::Last,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("horizon", self.horizon),
            ("d_in", self.d_in),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form count of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        let (d, f, h) = (self.d_model, self.d_ff, self.horizon);
        let bias = if self.topology_bias {
            self.n_heads * 2 * self.window
        } else {
            0
        };
        let layer = 4 * d * d + 4 * d + (d * f + f) + (f * d + d) + bias;
        (self.d_in * d + d) + self.n_layers * layer + 2 * d + 2 * (d * h + h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopologyBias {
    /// `[heads]`, initialized to one.
    pub gamma: Tensor,
    /// `[heads x (2T - 1)]`, initialized to zero.
    pub rho: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
    pub bias: Option<TopologyBias>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastModel {
    config: ModelConfig,
    positional: Vec<f64>,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub service_w: Tensor,
    pub service_b: Tensor,
    pub cluster_w: Tensor,
    pub cluster_b: Tensor,
}

/// Sinusoidal position table, `[T x d_model]`.
pub fn positional_table(window: usize, d_model: usize) -> Vec<f64> {
    let mut pe = vec![0.0; window * d_model];
    for pos in 0..window {
        for i in (0..d_model).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d_model as f64);
            pe[pos * d_model + i] = angle.sin();
            if i + 1 < d_model {
                pe[pos * d_model + i + 1] = angle.cos();
            }
        }
    }
    pe
}

fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite init").with_grad()
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(vec![n]).with_grad()
}

fn ones(n: usize) -> Tensor {
    Tensor::filled(vec![n], 1.0).with_grad()
}

/// Whether AdamW's decoupled decay applies to a parameter: layer-norm
/// parameters and the relative-position tables are exempt.
pub fn applies_weight_decay(name: &str) -> bool {
    !(name.contains(".ln") || name.starts_with("final_norm") || name.ends_with(".rho"))
}

impl ForecastModel {
    /// Fresh model; weights uniform in `+-sqrt(1/fan_in)`, biases zero.
    pub fn new(config: ModelConfig, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(seed_value, "model-init");
        let (d, f) = (config.d_model, config.d_ff);
        let embed_w = uniform(config.d_in, d, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer {
                w_q: uniform(d, d, &mut rng),
                w_k: uniform(d, d, &mut rng),
                w_v: uniform(d, d, &mut rng),
                w_o: uniform(d, d, &mut rng),
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
                ff1_w: uniform(d, f, &mut rng),
                ff1_b: zeros(f),
                ff2_w: uniform(f, d, &mut rng),
                ff2_b: zeros(d),
                bias: config.topology_bias.then(|| TopologyBias {
                    gamma: ones(config.n_heads),
                    rho: Tensor::zeros(vec![config.n_heads, 2 * config.window - 1]).with_grad(),
                }),
            })
            .collect();
        let service_w = uniform(d, config.horizon, &mut rng);
        let cluster_w = uniform(d, config.horizon, &mut rng);
        Ok(Self {
            positional: positional_table(config.window, d),
            embed_w,
            embed_b: zeros(d),
            layers,
            final_gain: ones(d),
            final_bias: zeros(d),
            service_w,
            service_b: zeros(config.horizon),
            cluster_w,
            cluster_b: zeros(config.horizon),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.weight".to_string(), &self.embed_w),
            ("embed.bias".to_string(), &self.embed_b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("attn.w_q"), &l.w_q),
                (p("attn.w_k"), &l.w_k),
                (p("attn.w_v"), &l.w_v),
                (p("attn.w_o"), &l.w_o),
                (p("ln1.gain"), &l.ln1_gain),
                (p("ln1.bias"), &l.ln1_bias),
                (p("ln2.gain"), &l.ln2_gain),
                (p("ln2.bias"), &l.ln2_bias),
                (p("ffn.w1"), &l.ff1_w),
                (p("ffn.b1"), &l.ff1_b),
                (p("ffn.w2"), &l.ff2_w),
                (p("ffn.b2"), &l.ff2_b),
            ]);
            if let Some(b) = &l.bias {
                out.push((p("topology.gamma"), &b.gamma));
                out.push((p("topology.rho"), &b.rho));
            }
        }
        out.extend([
            ("final_norm.gain".to_string(), &self.final_gain),
            ("final_norm.bias".to_string(), &self.final_bias),
            ("service_head.weight".to_string(), &self.service_w),
            ("service_head.bias".to_string(), &self.service_b),
            ("cluster_head.weight".to_string(), &self.cluster_w),
            ("cluster_head.bias".to_string(), &self.cluster_b),
        ]);
        out
    }

    /// Same order as [`ForecastModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b];
        for l in &mut self.layers {
            out.extend([
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.ff1_w,
                &mut l.ff1_b,
                &mut l.ff2_w,
                &mut l.ff2_b,
            ]);
            if let Some(b) = &mut l.bias {
                out.push(&mut b.gamma);
                out.push(&mut b.rho);
            }
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.service_w,
            &mut self.service_b,
            &mut self.cluster_w,
            &mut self.cluster_b,
        ]);
        out
    }

    /// Overwrites parameter values in [`ForecastModel::named_params`] order.
    pub fn load_params(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != values.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter arrays, got {}",
                names.len(),
                values.len()
            )));
        }
        for ((slot, name), (given, t)) in self.params_mut().into_iter().zip(&names).zip(values) {
            if name != given || slot.shape() != t.shape() {
                return Err(Error::Contract(format!(
                    "parameter {given} {:?} does not match {name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let flat: Vec<Var> = self.named_params().iter().map(|(_, t)| tape.leaf(t)).collect();
        ModelVars::from_flat(&self.config, &flat).expect("parameter layout matches config")
    }

    /// Copies leaf gradients from `tape` into each parameter's grad buffer.
    pub fn absorb_grads(&mut self, tape: &Tape, vars: &ModelVars) -> Result<()> {
        for (param, var) in self.params_mut().into_iter().zip(vars.flat()) {
            tape.write_grad(var, param)?;
        }
        Ok(())
    }

    /// Forward pass for a batch of fused windows; returns `(y_hat, g_hat)`,
    /// each `[batch x H]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &FusedWindowBatch,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        if batch.window != cfg.window || batch.horizon != cfg.horizon {
            return Err(Error::shape(
                "forward",
                &[cfg.window, cfg.horizon],
                &[batch.window, batch.horizon],
            ));
        }
        let b = batch.len();
        let inputs = tape.constant(vec![b * cfg.window, cfg.d_in], batch.inputs.clone())?;
        let last_only = cfg.head_pool == HeadPool::Last;
        let encoded = self.encode_batch(tape, vars, inputs, &batch.strength, mode, last_only)?;
        let rep = if last_only {
            encoded
        } else {
            tape.group_mean(encoded, cfg.window)?
        };
        self.predict(tape, vars, rep)
    }

    /// Runs the encoder on `[batch*T x d_in]` inputs. With `last_only` the
    /// final layer computes just the last query position of each window and
    /// the result is `[batch x d_model]`; otherwise `[batch*T x d_model]`.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        inputs: Var,
        strength: &[f64],
        mode: &mut Mode<'_>,
        last_only: bool,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (t, d) = (cfg.window, cfg.d_model);
        let batch = strength.len();
        let expect = [batch * t, cfg.d_in];
        if tape.shape(inputs) != expect {
            return Err(Error::shape("encode", tape.shape(inputs), &expect));
        }
        if let Some(s) = strength.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Parameter(format!("adjacency strength {s} outside [0, 1]")));
        }
        let last_rows: Vec<usize> = (0..batch).map(|b| b * t + t - 1).collect();

        let x = tape.linear(inputs, vars.embed_w, vars.embed_b)?;
        let pe: Vec<f64> = (0..batch).flat_map(|_| self.positional.iter().copied()).collect();
        let pe = tape.constant(vec![batch * t, d], pe)?;
        let x = tape.add(x, pe)?;
        let mut x = mode.dropout(tape, x, cfg.dropout)?;

        for (li, layer) in vars.layers.iter().enumerate() {
            let prune = last_only && li + 1 == vars.layers.len();
            let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
            let (hq, xq, tq) = if prune {
                (tape.gather_rows(h, &last_rows)?, tape.gather_rows(x, &last_rows)?, 1)
            } else {
                (h, x, t)
            };
            let (q, k, v) = attention_project(tape, layer, hq, h)?;
            let layout = AttnLayout {
                batch,
                heads: cfg.n_heads,
                tq,
                tk: t,
                d_model: d,
            };
            let bias = match layer.bias {
                Some((gamma, rho)) => ScoreBias::Topology { gamma, rho },
                None => ScoreBias::None,
            };
            let a = biased_attention(tape, q, k, v, layer.w_o, bias, strength, layout, cfg.dropout, mode)?;
            let a = mode.dropout(tape, a, cfg.dropout)?;
            let x1 = tape.add(xq, a)?;

            let h2 = tape.layer_norm(x1, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
            let f = tape.linear(h2, layer.ff1_w, layer.ff1_b)?;
            let f = tape.gelu(f)?;
            let f = tape.linear(f, layer.ff2_w, layer.ff2_b)?;
            let f = mode.dropout(tape, f, cfg.dropout)?;
            x = tape.add(x1, f)?;
        }
        if last_only && vars.layers.is_empty() {
            x = tape.gather_rows(x, &last_rows)?;
        }
        tape.layer_norm(x, vars.final_gain, vars.final_bias, LAYER_NORM_EPS)
    }

    /// Both linear heads over a `[batch x d_model]` representation.
    pub fn predict(&self, tape: &mut Tape, vars: &ModelVars, rep: Var) -> Result<(Var, Var)> {
        let y = tape.linear(rep, vars.service_w, vars.service_b)?;
        let g = tape.linear(rep, vars.cluster_w, vars.cluster_b)?;
        Ok((y, g))
    }

    /// Encodes one `[T x d_in]` window into `[T x d_model]`.
    pub fn encode(&self, z_window: &[f64], strength: f64, mode: &mut Mode<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let z = tape.constant(vec![self.config.window, self.config.d_in], z_window.to_vec())?;
        let out = self.encode_batch(&mut tape, &vars, z, &[strength], mode, false)?;
        Ok(tape.to_tensor(out))
    }

    /// Eval-mode `(y_hat, g_hat)` for a batch, as plain values.
    pub fn predict_batch(&self, batch: &FusedWindowBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let (y, g) = self.forward(&mut tape, &vars, batch, &mut Mode::Eval)?;
        Ok((tape.value(y).to_vec(), tape.value(g).to_vec()))
    }
}

/// Train mode carries the dropout stream; eval mode is deterministic.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => tape.dropout(x, p, true, &mut **rng),
        }
    }
}

/// Tape handles of one encoder layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    /// `(gamma, rho)`.
    pub bias: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed_w: Var,
    pub embed_b: Var,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub service_w: Var,
    pub service_b: Var,
    pub cluster_w: Var,
    pub cluster_b: Var,
}

impl ModelVars {
    /// Rebuilds the structure from handles in `named_params` order.
    pub fn from_flat(config: &ModelConfig, flat: &[Var]) -> Result<Self> {
        let per_layer = if config.topology_bias { 14 } else { 12 };
        let expect = 2 + config.n_layers * per_layer + 6;
        if flat.len() != expect {
            return Err(Error::Contract(format!("expected {expect} handles, got {}", flat.len())));
        }
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("length checked");
        let embed_w = next();
        let embed_b = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerVars {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                ff1_w: next(),
                ff1_b: next(),
                ff2_w: next(),
                ff2_b: next(),
                bias: config.topology_bias.then(|| (next(), next())),
            })
            .collect();
        Ok(Self {
            embed_w,
            embed_b,
            layers,
            final_gain: next(),
            final_bias: next(),
            service_w: next(),
            service_b: next(),
            cluster_w: next(),
            cluster_b: next(),
        })
    }

    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.embed_w, self.embed_b];
        for l in &self.layers {
            out.extend([
                l.w_q, l.w_k, l.w_v, l.w_o, l.ln1_gain, l.ln1_bias, l.ln2_gain, l.ln2_bias, l.ff1_w,
                l.ff1_b, l.ff2_w, l.ff2_b,
            ]);
            if let Some((g, r)) = l.bias {
                out.extend([g, r]);
            }
        }
        out.extend([
            self.final_gain,
            self.final_bias,
            self.service_w,
            self.service_b,
            self.cluster_w,
            self.cluster_b,
        ]);
        out
    }
}

/// `Q = X_q W_Q`, `K = X W_K`, `V = X W_V`, no additive bias. `query_input`
/// may be a row subset of `input`.
pub fn attention_project(
    tape: &mut Tape,
    layer: &LayerVars,
    query_input: Var,
    input: Var,
) -> Result<(Var, Var, Var)> {
    let q = tape.matmul(query_input, layer.w_q)?;
    let k = tape.matmul(input, layer.w_k)?;
    let v = tape.matmul(input, layer.w_v)?;
    Ok((q, k, v))
}

/// Splits a row-major `[rows x d_model]` matrix into per-head
/// `[rows x d_model/heads]` blocks.
pub fn split_heads(values: &[f64], d_model: usize, heads: usize) -> Vec<Vec<f64>> {
    let dh = d_model / heads;
    (0..heads)
        .map(|h| {
            values
                .chunks(d_model)
                .flat_map(|row| row[h * dh..(h + 1) * dh].iter().copied())
                .collect()
        })
        .collect()
}

/// Additive term inside the attention logits.
#[derive(Clone, Copy, Debug)]
pub enum ScoreBias {
    None,
    /// The same constant on every logit.
    Constant(f64),
    /// Strength-modulated relative-position profile.
    Topology { gamma: Var, rho: Var },
}

/// Multi-head `softmax(QK^T/sqrt(d_h) + B) V`, heads concatenated and
/// projected by `w_o`. No causal mask.
#[allow(clippy::too_many_arguments)]
pub fn biased_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w_o: Var,
    bias: ScoreBias,
    strength: &[f64],
    layout: AttnLayout,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let scale = 1.0 / (layout.head_dim() as f64).sqrt();
    let scores = tape.attn_scores(q, k, layout, scale)?;
    let scores = match bias {
        ScoreBias::None => scores,
        ScoreBias::Constant(c) => tape.add_scalar(scores, c)?,
        ScoreBias::Topology { gamma, rho } => tape.topology_bias(scores, gamma, rho, strength, layout)?,
    };
    let probs = tape.softmax_rows(scores)?;
    let probs = mode.dropout(tape, probs, dropout)?;
    let heads = tape.attn_apply(probs, v, layout)?;
    tape.matmul(heads, w_o)
}
