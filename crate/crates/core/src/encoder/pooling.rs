//! Statistics (SP), self-attentive (SAP) and attentive-statistics (ASP)
//! pooling heads used by the ResNet baselines.

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

/// Added under every square root of a variance.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Stats,
    SelfAttentive,
    AttentiveStats,
}

impl PoolKind {
    pub fn output_dim(self, node_dim: usize) -> usize {
        match self {
            PoolKind::SelfAttentive => node_dim,
            PoolKind::Stats | PoolKind::AttentiveStats => 2 * node_dim,
        }
    }
}

/// `s_t = v^T tanh(W h_t + b)`, softmax over frames.
pub struct AttentivePooling {
    proj: Linear,
    score: Linear,
}

impl AttentivePooling {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, attention_dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, attention_dim, true)?,
            score: Linear::new(store, rng, &format!("{name}.score"), attention_dim, 1, false)?,
        })
    }

    /// Frame weights `[B, T]` for frames given as `[B, T, D]`.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, frames_btd: Var) -> Result<Var> {
        let s = tape.shape(frames_btd).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let flat = tape.reshape(frames_btd, &[b * t, d])?;
        let h = self.proj.forward(tape, store, flat)?;
        let h = tape.tanh(h);
        let scores = self.score.forward(tape, store, h)?;
        let scores = tape.reshape(scores, &[b, t])?;
        tape.softmax(scores)
    }
}

fn frames_btd(tape: &mut Tape, frames: Var) -> Result<Var> {
    if tape.shape(frames).len() != 3 || tape.shape(frames)[2] == 0 {
        return Err(Error::dim(format!("pooling expects [B, D, T], got {:?}", tape.shape(frames))));
    }
    tape.permute(frames, &[0, 2, 1])
}

/// `[B, T]` weights applied to `[B, T, D]` values, giving `[B, D]`.
fn weighted_mean(tape: &mut Tape, weights: Var, x_btd: Var) -> Result<Var> {
    let s = tape.shape(x_btd).to_vec();
    let w = tape.reshape(weights, &[s[0], 1, s[1]])?;
    let m = tape.bmm(w, x_btd, false)?;
    tape.reshape(m, &[s[0], s[2]])
}

/// `sqrt(max(E[x^2] - E[x]^2, 0) + eps)`.
fn std_from_moments(tape: &mut Tape, mean: Var, mean_sq: Var) -> Result<Var> {
    let m2 = tape.mul(mean, mean)?;
    let var = tape.sub(mean_sq, m2)?;
    let var = tape.clamp_min(var, 0.0);
    let var = tape.add_scalar(var, STD_EPS);
    Ok(tape.sqrt(var))
}

/// Statistics pooling of `[B, D, T]` frames into `[B, 2D]` (mean, std).
pub fn pool_sp(tape: &mut Tape, frames: Var) -> Result<Var> {
    let x = frames_btd(tape, frames)?;
    let mean = tape.mean_axis(x, 1)?;
    let sq = tape.mul(x, x)?;
    let mean_sq = tape.mean_axis(sq, 1)?;
    let std = std_from_moments(tape, mean, mean_sq)?;
    tape.concat_last(mean, std)
}

/// Self-attentive pooling of `[B, D, T]` frames into `[B, D]`.
pub fn pool_sap(tape: &mut Tape, store: &ParamStore, att: &AttentivePooling, frames: Var) -> Result<Var> {
    let x = frames_btd(tape, frames)?;
    let w = att.weights(tape, store, x)?;
    weighted_mean(tape, w, x)
}

/// Attentive statistics pooling of `[B, D, T]` frames into `[B, 2D]`.
pub fn pool_asp(tape: &mut Tape, store: &ParamStore, att: &AttentivePooling, frames: Var) -> Result<Var> {
    let x = frames_btd(tape, frames)?;
    let w = att.weights(tape, store, x)?;
    asp_from_weights(tape, w, x)
}

pub(crate) fn asp_from_weights(tape: &mut Tape, w: Var, x_btd: Var) -> Result<Var> {
    let mean = weighted_mean(tape, w, x_btd)?;
    let sq = tape.mul(x_btd, x_btd)?;
    let mean_sq = weighted_mean(tape, w, sq)?;
    let std = std_from_moments(tape, mean, mean_sq)?;
    tape.concat_last(mean, std)
}

/// Pooling followed by a single affine layer to one logit per item.
pub struct PoolingHead {
    kind: PoolKind,
    attention: Option<AttentivePooling>,
    classifier: Linear,
}

impl PoolingHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, kind: PoolKind, node_dim: usize, attention_dim: usize) -> Result<Self> {
        let attention = match kind {
            PoolKind::Stats => None,
            _ => Some(AttentivePooling::new(store, rng, "head.attention", node_dim, attention_dim)?),
        };
        let classifier = Linear::new(store, rng, "head.classifier", kind.output_dim(node_dim), 1, true)?;
        Ok(Self {
            kind,
            attention,
            classifier,
        })
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn pool(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<Var> {
        match (self.kind, &self.attention) {
            (PoolKind::Stats, _) => pool_sp(tape, frames),
            (PoolKind::SelfAttentive, Some(a)) => pool_sap(tape, store, a, frames),
            (PoolKind::AttentiveStats, Some(a)) => pool_asp(tape, store, a, frames),
            _ => unreachable!("attentive pooling heads always own attention parameters"),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<Var> {
        let pooled = self.pool(tape, store, frames)?;
        classify_head(tape, store, &self.classifier, pooled)
    }
}

/// Affine map of pooled `[B, K]` features to logits `[B]`.
pub fn classify_head(tape: &mut Tape, store: &ParamStore, layer: &Linear, pooled: Var) -> Result<Var> {
    let b = tape.shape(pooled)[0];
    let z = layer.forward(tape, store, pooled)?;
    tape.reshape(z, &[b])
}
