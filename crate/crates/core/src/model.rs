//! Complete countermeasure systems: encoder plus a GAT or pooling head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::{load_checkpoint, save_checkpoint};
use crate::autodiff::{Mode, ParamStore, Tape, Tensor, Var};
use crate::encoder::{to_frames, to_spectral_nodes, to_temporal_nodes, Encoder, EncoderConfig, PoolKind, PoolingHead};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::gat::{GatLayer, GatOutput, DEFAULT_OUT_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum System {
    GatT,
    GatS,
    ResnetSp,
    ResnetSap,
    ResnetAsp,
}

impl System {
    pub const ALL: [System; 5] = [System::GatT, System::GatS, System::ResnetSp, System::ResnetSap, System::ResnetAsp];

    pub fn as_str(self) -> &'static str {
        match self {
            System::GatT => "gat_t",
            System::GatS => "gat_s",
            System::ResnetSp => "resnet_sp",
            System::ResnetSap => "resnet_sap",
            System::ResnetAsp => "resnet_asp",
        }
    }

    pub fn is_gat(self) -> bool {
        matches!(self, System::GatT | System::GatS)
    }

    fn pool_kind(self) -> Option<PoolKind> {
        match self {
            System::ResnetSp => Some(PoolKind::Stats),
            System::ResnetSap => Some(PoolKind::SelfAttentive),
            System::ResnetAsp => Some(PoolKind::AttentiveStats),
            _ => None,
        }
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|sys| sys.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown system `{s}` (expected gat_t, gat_s, resnet_sp, resnet_sap or resnet_asp)")))
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub system: System,
    pub encoder: EncoderConfig,
    /// GAT output width `D'`.
    pub gat_dim: usize,
    /// Hidden width of the SAP/ASP attention scorer.
    pub attention_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            system: System::GatT,
            encoder: EncoderConfig::default(),
            gat_dim: DEFAULT_OUT_DIM,
            attention_dim: 128,
        }
    }
}

enum Head {
    Gat(GatLayer),
    Pool(PoolingHead),
}

pub struct Model {
    cfg: ModelConfig,
    encoder: Encoder,
    head: Head,
    store: ParamStore,
}

impl Model {
    /// Fresh model with every weight drawn from a generator seeded by `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&cfg.encoder, &mut store, &mut rng)?;
        let d = cfg.encoder.node_dim();
        let head = match cfg.system.pool_kind() {
            None => Head::Gat(GatLayer::new(&mut store, &mut rng, "head.gat", d, cfg.gat_dim)?),
            Some(kind) => Head::Pool(PoolingHead::new(&mut store, &mut rng, kind, d, cfg.attention_dim)?),
        };
        Ok(Self {
            cfg,
            encoder,
            head,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn system(&self) -> System {
        self.cfg.system
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn gat(&self) -> Option<&GatLayer> {
        match &self.head {
            Head::Gat(g) => Some(g),
            Head::Pool(_) => None,
        }
    }

    /// Graph nodes `[B, N, D]` for a GAT system.
    pub fn nodes(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let grid = self.encoder.forward(tape, &self.store, x, mode)?;
        match self.cfg.system {
            System::GatS => to_spectral_nodes(tape, grid),
            _ => to_temporal_nodes(tape, grid),
        }
    }

    /// Logits `[B]` for features `[B, 1, F, T]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        match &self.head {
            Head::Gat(g) => {
                let nodes = self.nodes(tape, x, mode)?;
                g.forward(tape, &self.store, nodes, mode)
            }
            Head::Pool(p) => {
                let grid = self.encoder.forward(tape, &self.store, x, mode)?;
                let frames = to_frames(tape, grid)?;
                p.forward(tape, &self.store, frames)
            }
        }
    }

    /// GAT forward pass that also exposes the attention tensor.
    pub fn forward_gat(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<GatOutput> {
        let Head::Gat(g) = &self.head else {
            return Err(Error::Config(format!("{} has no graph attention head", self.cfg.system)));
        };
        let nodes = self.nodes(tape, x, mode)?;
        g.forward_detailed(tape, &self.store, nodes, mode)
    }

    /// Eval-mode logits, one per feature map.
    pub fn score(&self, features: &[&FeatureMap]) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.input(batch_tensor(features)?);
        let z = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(z).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    /// Replace every value with the checkpoint's; names and shapes must match.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let other = load_checkpoint(path)?;
        self.store.load_from(&other)
    }
}

/// Stack feature maps of one shape into `[B, 1, F, T]`.
pub fn batch_tensor(features: &[&FeatureMap]) -> Result<Tensor> {
    let first = features.first().ok_or_else(|| Error::dim("empty feature batch"))?;
    let (f, t) = (first.n_bands(), first.n_frames());
    let mut data = Vec::with_capacity(features.len() * f * t);
    for m in features {
        if (m.n_bands(), m.n_frames()) != (f, t) {
            return Err(Error::dim(format!(
                "feature maps differ in shape: {f}x{t} vs {}x{}",
                m.n_bands(),
                m.n_frames()
            )));
        }
        data.extend_from_slice(m.values());
    }
    Tensor::new([features.len(), 1, f, t], data)
}
