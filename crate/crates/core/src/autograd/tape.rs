//! Wengert tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and enough saved
//! state to run its vector-Jacobian product. Node indices are assigned in
//! execution order, so walking the tape from the end back to the start is a
//! reverse topological traversal that visits each node exactly once.

use std::mem::MaybeUninit;

use rand::Rng;

use super::fastmath;
use super::gemm::{gemm, gemm_new, MatView};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Block layout shared by the batched attention ops.
///
/// Queries are the last `tq` positions of each sample's `tk`-long window;
/// rows of the score matrix are ordered `(sample, head, query)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub heads: usize,
    pub tq: usize,
    pub tk: usize,
    pub d_model: usize,
}

impl AttnLayout {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn score_rows(&self) -> usize {
        self.batch * self.heads * self.tq
    }

    fn q_offset(&self, b: usize, h: usize) -> usize {
        b * self.tq * self.d_model + h * self.head_dim()
    }

    fn kv_offset(&self, b: usize, h: usize) -> usize {
        b * self.tk * self.d_model + h * self.head_dim()
    }

    fn score_offset(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.tq * self.tk
    }

    /// Index into a `2 * tk - 1` relative-position table for query row `i`
    /// (local to the block) and key `j`.
    fn rel_index(&self, i: usize, j: usize) -> usize {
        let qpos = self.tk - self.tq + i;
        j + self.tk - 1 - qpos
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    /// Input and the derivative at each element.
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Mse(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    GroupMean(Var, usize),
    AttnScores {
        q: Var,
        k: Var,
        layout: AttnLayout,
        scale: f64,
    },
    TopologyBias {
        scores: Var,
        gamma: Var,
        rho: Var,
        strength: Vec<f64>,
        layout: AttnLayout,
    },
    AttnApply {
        probs: Var,
        v: Var,
        layout: AttnLayout,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Contract(format!("{op}: expected a matrix, got shape {shape:?}"))),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

#[inline(always)]
fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    // 1 - 2/(e^{2u} + 1) is several times cheaper than libm tanh and
    // saturates correctly at both ends.
    let t = 1.0 - 2.0 / (fastmath::exp(2.0 * inner) + 1.0);
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        super::alloc::retain_freed_memory();
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    /// Adds the gradient stored for leaf `v` into `target`'s grad buffer.
    pub fn write_grad(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if !all_finite(&value) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; it participates in differentiation when
    /// the tensor is flagged `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = gemm_new(
            m,
            k,
            n,
            1.0,
            MatView::new(self.value(a), k, 1),
            MatView::new(self.value(b), n, 1),
            n,
            1,
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), rg)
    }

    /// `x * w + bias` with the bias broadcast over rows, in one GEMM pass.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (m, k) = dims2("linear", self.shape(x))?;
        let (k2, n) = dims2("linear", self.shape(w))?;
        if k != k2 || self.shape(bias) != [n] {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        let b = self.value(bias);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(b);
        }
        gemm(
            m,
            k,
            n,
            1.0,
            MatView::new(self.value(x), k, 1),
            MatView::new(self.value(w), n, 1),
            1.0,
            &mut out,
            n,
            1,
        );
        let rg = self.rg(&[x, w, bias]);
        self.push("linear", vec![m, n], out, Op::Linear(x, w, bias), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push("sub", self.shape(a).to_vec(), out, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let rg = self.rg(&[x]);
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let rg = self.rg(&[x]);
        self.push("add_scalar", self.shape(x).to_vec(), out, Op::AddScalar(x), rg)
    }

    /// `x[m x n] + bias[n]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if numel(self.shape(bias)) != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let rg = self.rg(&[x, bias]);
        self.push("add_row", self.shape(x).to_vec(), out, Op::AddRow(x, bias), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = fastmath::collect_with(xv.len(), |dst| gelu_values(xv, dst));
        let rg = self.rg(&[x]);
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if numel(self.shape(gain)) != n || numel(self.shape(bias)) != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = numel(self.shape(x)) / n.max(1);
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax over the last dimension, max-shifted for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        let out = softmax_rows_values(self.value(x), n);
        let rg = self.rg(&[x]);
        self.push("softmax_rows", self.shape(x).to_vec(), out, Op::Softmax(x), rg)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` so that
    /// evaluation mode is an exact identity and returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        // One 32-bit draw per element against p * 2^32: the same test as
        // `uniform < p` up to 2^-32, and bulk filling avoids a call per element.
        let threshold = (p * 4_294_967_296.0) as u32;
        let len = numel(self.shape(x));
        let mut mask = Vec::with_capacity(len);
        let mut bits = [0u32; 1024];
        while mask.len() < len {
            let words = &mut bits[..(len - mask.len()).min(1024)];
            rng.fill(words);
            mask.extend(words.iter().map(|w| if *w < threshold { 0.0 } else { keep }));
        }
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(&[x]);
        self.push("dropout", self.shape(x).to_vec(), out, Op::Dropout(x, mask), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Vec::new(), vec![s], Op::Sum(x), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        if target.len() != numel(self.shape(pred)) {
            return Err(Error::shape("mse", self.shape(pred), &[target.len()]));
        }
        let n = target.len().max(1) as f64;
        let s = self
            .value(pred)
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred]);
        self.push("mse", Vec::new(), vec![s], Op::Mse(pred, target.to_vec()), rg)
    }

    /// Selects rows of a matrix, in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = dims2("gather_rows", self.shape(x))?;
        if let Some(bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Contract(format!("gather_rows: row {bad} out of {m}")));
        }
        let xv = self.value(x);
        let out = rows
            .iter()
            .flat_map(|&r| xv[r * n..(r + 1) * n].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        self.push(
            "gather_rows",
            vec![rows.len(), n],
            out,
            Op::GatherRows(x, rows.to_vec()),
            rg,
        )
    }

    /// Averages consecutive blocks of `group` rows: `[g*group x n] -> [g x n]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = dims2("group_mean", self.shape(x))?;
        if group == 0 || m % group != 0 {
            return Err(Error::Contract(format!("group_mean: {m} rows not divisible by {group}")));
        }
        let g = m / group;
        let xv = self.value(x);
        let mut out = vec![0.0; g * n];
        for r in 0..m {
            let dst = &mut out[(r / group) * n..(r / group + 1) * n];
            for (d, v) in dst.iter_mut().zip(&xv[r * n..(r + 1) * n]) {
                *d += v / group as f64;
            }
        }
        let rg = self.rg(&[x]);
        self.push("group_mean", vec![g, n], out, Op::GroupMean(x, group), rg)
    }

    fn check_layout(&self, op: &'static str, v: Var, rows: usize, layout: &AttnLayout) -> Result<()> {
        let expect = [rows, layout.d_model];
        if self.shape(v) != expect {
            return Err(Error::shape(op, self.shape(v), &expect));
        }
        if layout.heads == 0 || layout.d_model % layout.heads != 0 || layout.tq > layout.tk {
            return Err(Error::Contract(format!("{op}: invalid layout {layout:?}")));
        }
        Ok(())
    }

    /// Per-(sample, head) `scale * Q_h K_h^T`. `q` is `[batch*tq x d_model]`,
    /// `k` is `[batch*tk x d_model]`; result is `[batch*heads*tq x tk]`.
    pub fn attn_scores(&mut self, q: Var, k: Var, layout: AttnLayout, scale: f64) -> Result<Var> {
        self.check_layout("attn_scores", q, layout.batch * layout.tq, &layout)?;
        self.check_layout("attn_scores", k, layout.batch * layout.tk, &layout)?;
        let (d, dh) = (layout.d_model, layout.head_dim());
        let mut out = vec![0.0; layout.score_rows() * layout.tk];
        for b in 0..layout.batch {
            for h in 0..layout.heads {
                let so = layout.score_offset(b, h);
                gemm(
                    layout.tq,
                    dh,
                    layout.tk,
                    scale,
                    MatView::new(&self.value(q)[layout.q_offset(b, h)..], d, 1),
                    MatView::new(&self.value(k)[layout.kv_offset(b, h)..], d, 1).transposed(),
                    0.0,
                    &mut out[so..],
                    layout.tk,
                    1,
                );
            }
        }
        let rg = self.rg(&[q, k]);
        self.push(
            "attn_scores",
            vec![layout.score_rows(), layout.tk],
            out,
            Op::AttnScores { q, k, layout, scale },
            rg,
        )
    }

    /// Adds `gamma[h] * strength[b] * rho[h][k - q + tk - 1]` to every score.
    pub fn topology_bias(
        &mut self,
        scores: Var,
        gamma: Var,
        rho: Var,
        strength: &[f64],
        layout: AttnLayout,
    ) -> Result<Var> {
        let expect = [layout.score_rows(), layout.tk];
        if self.shape(scores) != expect {
            return Err(Error::shape("topology_bias", self.shape(scores), &expect));
        }
        let width = 2 * layout.tk - 1;
        if numel(self.shape(gamma)) != layout.heads || numel(self.shape(rho)) != layout.heads * width {
            return Err(Error::shape("topology_bias", self.shape(gamma), self.shape(rho)));
        }
        if strength.len() != layout.batch {
            return Err(Error::shape("topology_bias", &[layout.batch], &[strength.len()]));
        }
        let (g, r) = (self.value(gamma), self.value(rho));
        let mut out = self.value(scores).to_vec();
        for b in 0..layout.batch {
            for h in 0..layout.heads {
                let coef = g[h] * strength[b];
                let so = layout.score_offset(b, h);
                for i in 0..layout.tq {
                    for j in 0..layout.tk {
                        out[so + i * layout.tk + j] += coef * r[h * width + layout.rel_index(i, j)];
                    }
                }
            }
        }
        let rg = self.rg(&[scores, gamma, rho]);
        self.push(
            "topology_bias",
            expect.to_vec(),
            out,
            Op::TopologyBias {
                scores,
                gamma,
                rho,
                strength: strength.to_vec(),
                layout,
            },
            rg,
        )
    }

    /// Per-(sample, head) `P_h V_h`, heads concatenated back into
    /// `[batch*tq x d_model]`.
    pub fn attn_apply(&mut self, probs: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let expect = [layout.score_rows(), layout.tk];
        if self.shape(probs) != expect {
            return Err(Error::shape("attn_apply", self.shape(probs), &expect));
        }
        self.check_layout("attn_apply", v, layout.batch * layout.tk, &layout)?;
        let (d, dh) = (layout.d_model, layout.head_dim());
        let mut out = vec![0.0; layout.batch * layout.tq * d];
        for b in 0..layout.batch {
            for h in 0..layout.heads {
                gemm(
                    layout.tq,
                    layout.tk,
                    dh,
                    1.0,
                    MatView::new(&self.value(probs)[layout.score_offset(b, h)..], layout.tk, 1),
                    MatView::new(&self.value(v)[layout.kv_offset(b, h)..], d, 1),
                    0.0,
                    &mut out[layout.q_offset(b, h)..],
                    d,
                    1,
                );
            }
        }
        let rg = self.rg(&[probs, v]);
        self.push(
            "attn_apply",
            vec![layout.batch * layout.tq, d],
            out,
            Op::AttnApply { probs, v, layout },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract("loss does not depend on any leaf requiring grad".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&gout).for_each(|(g, d)| *g += d),
                    None => node.grad = Some(gout),
                }
                continue;
            }
            self.propagate(idx, &gout, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => matmul_grads(nodes, *a, *b, gout, grads),
            Op::Linear(x, w, bias) => {
                matmul_grads(nodes, *x, *w, gout, grads);
                if wants(*bias) {
                    row_sums(grads, *bias, gout, nodes[bias.0].value.len());
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        accumulate(grads, *v, gout, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, gout, 1.0);
                }
                if wants(*b) {
                    accumulate(grads, *b, gout, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = &nodes[b.0].value;
                    let g = slot(grads, *a, gout.len());
                    for i in 0..g.len() {
                        g[i] += gout[i] * other[i];
                    }
                }
                if wants(*b) {
                    let other = &nodes[a.0].value;
                    let g = slot(grads, *b, gout.len());
                    for i in 0..g.len() {
                        g[i] += gout[i] * other[i];
                    }
                }
            }
            Op::Scale(x, f) => accumulate(grads, *x, gout, *f),
            Op::AddScalar(x) => accumulate(grads, *x, gout, 1.0),
            Op::AddRow(x, bias) => {
                if wants(*x) {
                    accumulate(grads, *x, gout, 1.0);
                }
                if wants(*bias) {
                    row_sums(grads, *bias, gout, nodes[bias.0].value.len());
                }
            }
            Op::Gelu(x) => {
                // Recomputing the slope is cheaper than caching a buffer
                // the size of the widest activation.
                let xv = &nodes[x.0].value;
                match &mut grads[x.0] {
                    Some(g) => gelu_grad_add(gout, xv, g),
                    empty => *empty = Some(fastmath::collect_with(xv.len(), |dst| gelu_grad(gout, xv, dst))),
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                if wants(*gain) {
                    let gg = slot(grads, *gain, n);
                    for (row_g, row_h) in gout.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += row_g[c] * row_h[c];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, n);
                    for row_g in gout.chunks(n) {
                        gb.iter_mut().zip(row_g).for_each(|(g, d)| *g += d);
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, *x, gout.len());
                    let mut dh = vec![0.0; n];
                    for (r, is) in inv_std.iter().enumerate() {
                        let row_g = &gout[r * n..(r + 1) * n];
                        let row_h = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            dh[c] = row_g[c] * gv[c];
                            s1 += dh[c];
                            s2 += dh[c] * row_h[c];
                        }
                        let nf = n as f64;
                        for c in 0..n {
                            gx[r * n + c] += is / nf * (nf * dh[c] - s1 - row_h[c] * s2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = last_dim(&node.shape);
                let y = &node.value;
                let gx = slot(grads, *x, gout.len());
                for r in 0..y.len() / n.max(1) {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gout[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gx[r * n + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::Dropout(x, mask) => accumulate_with(grads, *x, gout, mask),
            Op::Sum(x) => {
                let len = nodes[x.0].value.len();
                slot(grads, *x, len).iter_mut().for_each(|g| *g += gout[0]);
            }
            Op::Mse(pred, target) => {
                let pv = &nodes[pred.0].value;
                let scale = 2.0 * gout[0] / target.len().max(1) as f64;
                let gp = slot(grads, *pred, pv.len());
                for i in 0..pv.len() {
                    gp[i] += scale * (pv[i] - target[i]);
                }
            }
            Op::GatherRows(x, rows) => {
                let n = node.shape[1];
                let len = nodes[x.0].value.len();
                let gx = slot(grads, *x, len);
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        gx[r * n + c] += gout[i * n + c];
                    }
                }
            }
            Op::GroupMean(x, group) => {
                let n = node.shape[1];
                let len = nodes[x.0].value.len();
                let gx = slot(grads, *x, len);
                let inv = 1.0 / *group as f64;
                for r in 0..len / n {
                    for c in 0..n {
                        gx[r * n + c] += gout[(r / group) * n + c] * inv;
                    }
                }
            }
            Op::AttnScores { q, k, layout, scale } => {
                let (d, dh, tq, tk) = (layout.d_model, layout.head_dim(), layout.tq, layout.tk);
                if wants(*q) {
                    let gq = slot(grads, *q, nodes[q.0].value.len());
                    for b in 0..layout.batch {
                        for h in 0..layout.heads {
                            gemm(
                                tq,
                                tk,
                                dh,
                                *scale,
                                MatView::new(&gout[layout.score_offset(b, h)..], tk, 1),
                                MatView::new(&nodes[k.0].value[layout.kv_offset(b, h)..], d, 1),
                                1.0,
                                &mut gq[layout.q_offset(b, h)..],
                                d,
                                1,
                            );
                        }
                    }
                }
                if wants(*k) {
                    let gk = slot(grads, *k, nodes[k.0].value.len());
                    for b in 0..layout.batch {
                        for h in 0..layout.heads {
                            gemm(
                                tk,
                                tq,
                                dh,
                                *scale,
                                MatView::new(&gout[layout.score_offset(b, h)..], tk, 1).transposed(),
                                MatView::new(&nodes[q.0].value[layout.q_offset(b, h)..], d, 1),
                                1.0,
                                &mut gk[layout.kv_offset(b, h)..],
                                d,
                                1,
                            );
                        }
                    }
                }
            }
            Op::TopologyBias {
                scores,
                gamma,
                rho,
                strength,
                layout,
            } => {
                if wants(*scores) {
                    accumulate(grads, *scores, gout, 1.0);
                }
                let width = 2 * layout.tk - 1;
                let gv = &nodes[gamma.0].value;
                let rv = &nodes[rho.0].value;
                // dL/dgamma[h] and dL/drho[h][r] both reduce over the same block.
                let mut dgamma = vec![0.0; layout.heads];
                let mut drho = vec![0.0; layout.heads * width];
                for b in 0..layout.batch {
                    for h in 0..layout.heads {
                        let so = layout.score_offset(b, h);
                        for i in 0..layout.tq {
                            for j in 0..layout.tk {
                                let go = gout[so + i * layout.tk + j];
                                let ri = h * width + layout.rel_index(i, j);
                                dgamma[h] += go * strength[b] * rv[ri];
                                drho[ri] += go * gv[h] * strength[b];
                            }
                        }
                    }
                }
                if wants(*gamma) {
                    accumulate(grads, *gamma, &dgamma, 1.0);
                }
                if wants(*rho) {
                    accumulate(grads, *rho, &drho, 1.0);
                }
            }
            Op::AttnApply { probs, v, layout } => {
                let (d, dh, tq, tk) = (layout.d_model, layout.head_dim(), layout.tq, layout.tk);
                if wants(*probs) {
                    let gp = slot(grads, *probs, nodes[probs.0].value.len());
                    for b in 0..layout.batch {
                        for h in 0..layout.heads {
                            gemm(
                                tq,
                                dh,
                                tk,
                                1.0,
                                MatView::new(&gout[layout.q_offset(b, h)..], d, 1),
                                MatView::new(&nodes[v.0].value[layout.kv_offset(b, h)..], d, 1)
                                    .transposed(),
                                1.0,
                                &mut gp[layout.score_offset(b, h)..],
                                tk,
                                1,
                            );
                        }
                    }
                }
                if wants(*v) {
                    let gv = slot(grads, *v, nodes[v.0].value.len());
                    for b in 0..layout.batch {
                        for h in 0..layout.heads {
                            gemm(
                                tk,
                                tq,
                                dh,
                                1.0,
                                MatView::new(&nodes[probs.0].value[layout.score_offset(b, h)..], tk, 1)
                                    .transposed(),
                                MatView::new(&gout[layout.q_offset(b, h)..], d, 1),
                                1.0,
                                &mut gv[layout.kv_offset(b, h)..],
                                d,
                                1,
                            );
                        }
                    }
                }
            }
        }
    }
}

fn matmul_grads(nodes: &[Node], a: Var, b: Var, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
    let n = nodes[b.0].shape[1];
    let (av, bv, gv) = (
        MatView::new(&nodes[a.0].value, k, 1),
        MatView::new(&nodes[b.0].value, n, 1),
        MatView::new(gout, n, 1),
    );
    if nodes[a.0].requires_grad {
        match &mut grads[a.0] {
            Some(ga) => gemm(m, n, k, 1.0, gv, bv.transposed(), 1.0, ga, k, 1),
            empty => *empty = Some(gemm_new(m, n, k, 1.0, gv, bv.transposed(), k, 1)),
        }
    }
    if nodes[b.0].requires_grad {
        // With k < n the same product is computed as its transpose; the
        // packed kernel runs markedly faster with the long side as rows.
        match (&mut grads[b.0], k < n) {
            (Some(gb), true) => gemm(n, m, k, 1.0, gv.transposed(), av, 1.0, gb, 1, n),
            (Some(gb), false) => gemm(k, m, n, 1.0, av.transposed(), gv, 1.0, gb, n, 1),
            (empty, true) => *empty = Some(gemm_new(n, m, k, 1.0, gv.transposed(), av, 1, n)),
            (empty, false) => *empty = Some(gemm_new(k, m, n, 1.0, av.transposed(), gv, n, 1)),
        }
    }
}

/// Adds the column sums of `gout` (rows of width `n`) into `grad[v]`.
fn row_sums(grads: &mut [Option<Vec<f64>>], v: Var, gout: &[f64], n: usize) {
    let gb = slot(grads, v, n);
    for row in gout.chunks(n) {
        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
}

/// `grad[v] += alpha * src`, copying instead of zero-filling a fresh slot.
fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, src: &[f64], alpha: f64) {
    match &mut grads[v.0] {
        Some(g) => axpy(g, src, alpha),
        empty => *empty = Some(src.iter().map(|s| alpha * s).collect()),
    }
}

/// `grad[v] += src * factor` elementwise.
fn accumulate_with(grads: &mut [Option<Vec<f64>>], v: Var, src: &[f64], factor: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => g
            .iter_mut()
            .zip(src.iter().zip(factor))
            .for_each(|(d, (s, f))| *d += s * f),
        empty => *empty = Some(src.iter().zip(factor).map(|(s, f)| s * f).collect()),
    }
}

/// Max-shifted softmax over rows of width `n`.
pub fn softmax_rows_values(x: &[f64], n: usize) -> Vec<f64> {
    if n == 0 {
        return vec![0.0; x.len()];
    }
    let mut out = fastmath::collect_with(x.len(), |dst| softmax_exp(x, n, dst));
    normalize_rows(&mut out, n);
    out
}

fastmath::wide_fn! {
    /// `exp(v - rowmax)` for rows of width `n`.
    fn softmax_exp(x: &[f64], n: usize, dst: &mut [MaybeUninit<f64>]) {
        for (row, out) in x.chunks(n).zip(dst.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (d, v) in out.iter_mut().zip(row) {
                d.write(fastmath::exp(v - max));
            }
        }
    }
}

fastmath::wide_fn! {
    /// No early exit, so the scan vectorizes.
    fn all_finite(x: &[f64]) -> bool {
        x.iter().fold(true, |ok, v| ok & v.is_finite())
    }
}

fastmath::wide_fn! {
    fn normalize_rows(x: &mut [f64], n: usize) {
        for row in x.chunks_mut(n) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|d| *d /= total);
        }
    }
}

fastmath::wide_fn! {
    fn gelu_values(x: &[f64], dst: &mut [MaybeUninit<f64>]) {
        for (d, v) in dst.iter_mut().zip(x) {
            d.write(gelu_parts(*v).0);
        }
    }
}

fastmath::wide_fn! {
    fn gelu_grad(gout: &[f64], x: &[f64], dst: &mut [MaybeUninit<f64>]) {
        for (d, (s, v)) in dst.iter_mut().zip(gout.iter().zip(x)) {
            d.write(s * gelu_parts(*v).1);
        }
    }
}

fastmath::wide_fn! {
    fn gelu_grad_add(gout: &[f64], x: &[f64], grad: &mut [f64]) {
        for (d, (s, v)) in grad.iter_mut().zip(gout.iter().zip(x)) {
            *d += s * gelu_parts(*v).1;
        }
    }
}
