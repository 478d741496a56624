//! Single-head graph attention over fully connected node sets.
//!
//! For a graph of `N` nodes `e_n` in `R^D`:
//!
//! ```text
//! alpha[v][n] = softmax_v( <w_map, e_n * e_v> )
//! m_n         = sum_v alpha[v][n] e_v
//! o_n         = BN(m_n W_att + e_n W_res)
//! score       = mean_n(o_n W_out) + b_out
//! ```
//!
//! Batch norm pools the batch and node axes, so each output feature is
//! normalised over `B * N` samples. [`GatLayer`] is the differentiable
//! version; the free functions compute the same quantities on plain slices.

use rand::Rng;

use crate::autodiff::{Mode, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Linear};

/// Output width of the projection.
pub const DEFAULT_OUT_DIM: usize = 128;

/// `alpha[v][n]`: weight of source node `v` towards target node `n`.
/// Each column sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    n: usize,
    /// Row-major by target: `by_target[n * N + v] = alpha[v][n]`.
    by_target: Vec<f64>,
}

impl AttentionMatrix {
    /// Builds from target-major rows, each of which must be a distribution.
    pub fn from_target_rows(n: usize, by_target: Vec<f64>) -> Result<Self> {
        if by_target.len() != n * n {
            return Err(Error::dim(format!("attention of {} values for {n} nodes", by_target.len())));
        }
        for (t, row) in by_target.chunks(n.max(1)).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|a| !(0.0..=1.0).contains(a)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("attention column {t} is not a distribution")));
            }
        }
        Ok(Self { n, by_target })
    }

    pub fn identity(n: usize) -> Self {
        let mut by_target = vec![0.0; n * n];
        for i in 0..n {
            by_target[i * n + i] = 1.0;
        }
        Self { n, by_target }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            n,
            by_target: vec![1.0 / n as f64; n * n],
        }
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.by_target[target * self.n + source]
    }

    /// Weights received by `target`, indexed by source.
    pub fn column(&self, target: usize) -> &[f64] {
        &self.by_target[target * self.n..(target + 1) * self.n]
    }
}

fn check_nodes(e: &[f64], n: usize, d: usize) -> Result<()> {
    if e.len() != n * d {
        return Err(Error::dim(format!("{} node values for {n} x {d}", e.len())));
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("node features must be finite".into()));
    }
    Ok(())
}

/// Attention weights of one graph `e [N, D]` (row-major).
pub fn attention(e: &[f64], n: usize, d: usize, w_map: &[f64]) -> Result<AttentionMatrix> {
    check_nodes(e, n, d)?;
    if w_map.len() != d {
        return Err(Error::dim(format!("w_map has {} entries, nodes have {d}", w_map.len())));
    }
    let mut by_target = vec![0.0; n * n];
    for t in 0..n {
        let et = &e[t * d..(t + 1) * d];
        let row = &mut by_target[t * n..(t + 1) * n];
        for (v, r) in row.iter_mut().enumerate() {
            let ev = &e[v * d..(v + 1) * d];
            *r = (0..d).map(|k| w_map[k] * et[k] * ev[k]).sum();
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|r| *r = (*r - max).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|r| *r /= z);
    }
    Ok(AttentionMatrix { n, by_target })
}

/// `m_n = sum_v alpha[v][n] e_v`.
pub fn aggregate(e: &[f64], n: usize, d: usize, alpha: &AttentionMatrix) -> Result<Vec<f64>> {
    if e.len() != n * d || alpha.n != n {
        return Err(Error::dim(format!("aggregate over {n} x {d} with {} x {} attention", alpha.n, alpha.n)));
    }
    let mut m = vec![0.0; n * d];
    for t in 0..n {
        let out = &mut m[t * d..(t + 1) * d];
        for (v, &a) in alpha.column(t).iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(&e[v * d..(v + 1) * d]) {
                *o += a * x;
            }
        }
    }
    Ok(m)
}

/// Eval-mode projection of one graph:
/// `o_n = gamma * ((m_n W_att + e_n W_res) - mu) / sqrt(var + eps) + beta`.
pub fn propagate(e: &[f64], m: &[f64], n: usize, d: usize, p: &GatValues) -> Result<Vec<f64>> {
    let k = p.out_dim();
    if e.len() != n * d || m.len() != n * d || p.w_att.len() != d * k || p.w_res.len() != d * k {
        return Err(Error::dim(format!("propagate shapes disagree for {n} x {d} -> {k}")));
    }
    let mut o = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            let mut acc = 0.0;
            for q in 0..d {
                acc += m[i * d + q] * p.w_att[q * k + j] + e[i * d + q] * p.w_res[q * k + j];
            }
            let inv = 1.0 / (p.running_var[j] + crate::autodiff::BN_EPS).sqrt();
            o[i * k + j] = p.gamma[j] * (acc - p.running_mean[j]) * inv + p.beta[j];
        }
    }
    Ok(o)
}

/// `mean_n <o_n, w_out>`.
pub fn readout(o: &[f64], n: usize, w_out: &[f64]) -> Result<f64> {
    let k = w_out.len();
    if o.len() != n * k || n == 0 {
        return Err(Error::dim(format!("readout of {} values as {n} x {k}", o.len())));
    }
    let total: f64 = o.chunks(k).map(|row| row.iter().zip(w_out).map(|(a, b)| a * b).sum::<f64>()).sum();
    Ok(total / n as f64)
}

/// Plain copies of the layer's values, for inspection and reference maths.
#[derive(Clone, Debug, PartialEq)]
pub struct GatValues {
    pub w_map: Vec<f64>,
    pub w_att: Vec<f64>,
    pub w_res: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl GatValues {
    pub fn out_dim(&self) -> usize {
        self.w_out.len()
    }

    /// Eval-mode score of one graph.
    pub fn score(&self, e: &[f64], n: usize) -> Result<f64> {
        let d = self.w_map.len();
        let alpha = attention(e, n, d, &self.w_map)?;
        let m = aggregate(e, n, d, &alpha)?;
        let o = propagate(e, &m, n, d, self)?;
        Ok(readout(&o, n, &self.w_out)? + self.b_out)
    }
}

/// Tape outputs of a [`GatLayer`] pass.
pub struct GatOutput {
    /// Logits `[B]`.
    pub scores: Var,
    /// Target-major attention `[B, N, N]`.
    pub attention: Var,
    /// Normalised node outputs `[B * N, D']`.
    pub nodes: Var,
}

pub struct GatLayer {
    pub w_map: ParamId,
    pub att: Linear,
    pub res: Linear,
    pub bn: BatchNorm,
    pub out: Linear,
    in_dim: usize,
    out_dim: usize,
}

impl GatLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = (6.0 / in_dim as f64).sqrt();
        let w_map: Vec<f64> = (0..in_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let w_map = store.add(format!("{name}.w_map"), Tensor::new([in_dim], w_map)?, ParamKind::Trainable)?;
        Ok(Self {
            w_map,
            att: Linear::new(store, rng, &format!("{name}.w_att"), in_dim, out_dim, false)?,
            res: Linear::new(store, rng, &format!("{name}.w_res"), in_dim, out_dim, false)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_dim)?,
            out: Linear::new(store, rng, &format!("{name}.w_out"), out_dim, 1, true)?,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Scores for node batches `[B, N, D]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, nodes: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_detailed(tape, store, nodes, mode)?.scores)
    }

    pub fn forward_detailed(&self, tape: &mut Tape, store: &ParamStore, nodes: Var, mode: Mode) -> Result<GatOutput> {
        let shape = tape.shape(nodes).to_vec();
        if shape.len() != 3 || shape[2] != self.in_dim || shape[1] == 0 {
            return Err(Error::dim(format!("graph batch must be [B, N, {}], got {shape:?}", self.in_dim)));
        }
        if tape.value(nodes).iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("node features must be finite".into()));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let w_map = tape.param(store, self.w_map);
        let mapped = tape.mul_last(nodes, w_map)?;
        let logits = tape.bmm(mapped, nodes, true)?;
        let attention = tape.softmax(logits)?;
        let m = tape.bmm(attention, nodes, false)?;
        let m = tape.reshape(m, &[b * n, d])?;
        let e = tape.reshape(nodes, &[b * n, d])?;
        let pa = self.att.forward(tape, store, m)?;
        let pr = self.res.forward(tape, store, e)?;
        let h = tape.add(pa, pr)?;
        let o = self.bn.forward(tape, store, h, mode)?;
        let s = self.out.forward(tape, store, o)?;
        let s = tape.reshape(s, &[b, n])?;
        let scores = tape.mean_axis(s, 1)?;
        Ok(GatOutput {
            scores,
            attention,
            nodes: o,
        })
    }

    pub fn values(&self, store: &ParamStore) -> GatValues {
        let v = |id: ParamId| store.value(id).to_vec();
        GatValues {
            w_map: v(self.w_map),
            w_att: v(self.att.weight),
            w_res: v(self.res.weight),
            gamma: v(self.bn.gamma),
            beta: v(self.bn.beta),
            running_mean: v(self.bn.running_mean),
            running_var: v(self.bn.running_var),
            w_out: v(self.out.weight),
            b_out: self.out.bias.map(|b| store.value(b)[0]).unwrap_or(0.0),
        }
    }
}

/// Splits a target-major `[B, N, N]` attention tensor into matrices.
pub fn attention_matrices(values: &[f64], n: usize) -> Vec<AttentionMatrix> {
    values
        .chunks(n * n)
        .map(|c| AttentionMatrix {
            n,
            by_target: c.to_vec(),
        })
        .collect()
}
