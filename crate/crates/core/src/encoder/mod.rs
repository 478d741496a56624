//! ResNet-18 front-end and the graph-node / pooling read-outs built on it.
//!
//! With the default layer table a `60 x 202` feature map flows as
//!
//! | layer       | output (C x F x T) |
//! |-------------|--------------------|
//! | stem conv   | 64 x 64 x 103      |
//! | max pool    | 64 x 32 x 52       |
//! | res block 1 | 64 x 32 x 52       |
//! | res block 2 | 128 x 16 x 26      |
//! | res block 3 | 256 x 8 x 13       |
//! | res block 4 | 512 x 4 x 7        |
//! | grid pool   | 512 x 3 x 5        |
//!
//! The final adaptive average makes the node grid independent of input length;
//! it never upsamples, so the default table needs at least 125 frames.

mod pooling;

use rand::Rng;

pub use pooling::{classify_head, pool_asp, pool_sap, pool_sp, AttentivePooling, PoolKind, PoolingHead, STD_EPS};

use crate::autodiff::kernels::window_out;
use crate::autodiff::{Mode, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub filters: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// One residual block: two 3x3 convolutions, stride on the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub filters: usize,
    pub stride: (usize, usize),
}

/// Layer table of the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem: ConvSpec,
    pub pool: PoolSpec,
    pub blocks: Vec<BlockSpec>,
    /// `(freq, time)` grid of the final average pooling.
    pub grid: (usize, usize),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stem: ConvSpec {
                kernel: (3, 3),
                filters: 64,
                stride: (1, 2),
                padding: (3, 3),
            },
            pool: PoolSpec {
                kernel: (3, 3),
                stride: (2, 2),
                padding: (1, 1),
            },
            blocks: vec![
                BlockSpec { filters: 64, stride: (1, 1) },
                BlockSpec { filters: 128, stride: (2, 2) },
                BlockSpec { filters: 256, stride: (2, 2) },
                BlockSpec { filters: 512, stride: (2, 2) },
            ],
            grid: (3, 5),
        }
    }
}

/// Output size of one encoder stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub layer: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl EncoderConfig {
    /// Same topology with every channel count divided by `factor` (min 1).
    pub fn scaled_width(&self, factor: usize) -> Self {
        let mut cfg = self.clone();
        cfg.stem.filters = (cfg.stem.filters / factor).max(1);
        for b in &mut cfg.blocks {
            b.filters = (b.filters / factor).max(1);
        }
        cfg
    }

    pub fn node_dim(&self) -> usize {
        self.blocks.last().map_or(self.stem.filters, |b| b.filters)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("encoder needs at least one residual block".into()));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::Config("encoder grid must be non-empty".into()));
        }
        Ok(())
    }

    /// Per-stage output sizes for a `n_bands x n_frames` input, or a size
    /// error naming the first stage the input does not survive.
    pub fn shape_chain(&self, n_bands: usize, n_frames: usize) -> Result<Vec<LayerShape>> {
        let too_small = |layer: &str, h: usize, w: usize| Error::Size {
            layer: layer.to_string(),
            msg: format!("input of {h}x{w} is too small (feature map {n_bands}x{n_frames})"),
        };
        if n_bands == 0 || n_frames == 0 {
            return Err(too_small("stem", n_bands, n_frames));
        }
        let mut shapes = Vec::new();
        let s = self.stem;
        let (h, w) = match (
            window_out(n_bands, s.kernel.0, s.stride.0, s.padding.0),
            window_out(n_frames, s.kernel.1, s.stride.1, s.padding.1),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(too_small("stem", n_bands, n_frames)),
        };
        shapes.push(LayerShape {
            layer: "stem".into(),
            channels: s.filters,
            height: h,
            width: w,
        });
        let p = self.pool;
        let (mut h, mut w) = match (
            window_out(h, p.kernel.0, p.stride.0, p.padding.0),
            window_out(w, p.kernel.1, p.stride.1, p.padding.1),
        ) {
            (Some(nh), Some(nw)) => (nh, nw),
            _ => return Err(too_small("maxpool", h, w)),
        };
        shapes.push(LayerShape {
            layer: "maxpool".into(),
            channels: s.filters,
            height: h,
            width: w,
        });
        for (i, b) in self.blocks.iter().enumerate() {
            let name = format!("block{}", i + 1);
            match (window_out(h, 3, b.stride.0, 1), window_out(w, 3, b.stride.1, 1)) {
                (Some(nh), Some(nw)) => {
                    h = nh;
                    w = nw;
                }
                _ => return Err(too_small(&name, h, w)),
            }
            shapes.push(LayerShape {
                layer: name,
                channels: b.filters,
                height: h,
                width: w,
            });
        }
        if h < self.grid.0 || w < self.grid.1 {
            return Err(too_small("grid", h, w));
        }
        shapes.push(LayerShape {
            layer: "grid".into(),
            channels: self.node_dim(),
            height: self.grid.0,
            width: self.grid.1,
        });
        Ok(shapes)
    }

    /// Smallest frame count the layer table accepts for `n_bands` inputs.
    pub fn min_frames(&self, n_bands: usize) -> Option<usize> {
        (1..4096).find(|&t| self.shape_chain(n_bands, t).is_ok())
    }
}

struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    skip: Option<(Conv2d, BatchNorm)>,
}

impl ResidualBlock {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_ch: usize, spec: BlockSpec) -> Result<Self> {
        let out = spec.filters;
        let skip = if in_ch != out || spec.stride != (1, 1) {
            Some((
                Conv2d::new(store, rng, &format!("{name}.skip.conv"), in_ch, out, (1, 1), spec.stride, (0, 0))?,
                BatchNorm::new(store, &format!("{name}.skip.bn"), out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, out, (3, 3), spec.stride, (1, 1))?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), out)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), out, out, (3, 3), (1, 1), (1, 1))?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), out)?,
            skip,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.bn1.forward(tape, store, h, mode)?;
        let h = tape.selu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.bn2.forward(tape, store, h, mode)?;
        let skip = match &self.skip {
            Some((conv, bn)) => {
                let s = conv.forward(tape, store, x)?;
                bn.forward(tape, store, s, mode)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        Ok(tape.selu(sum))
    }
}

/// ResNet-18 encoder mapping `[B, 1, F, T]` features to a `[B, D, gf, gt]` grid.
pub struct Encoder {
    cfg: EncoderConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<ResidualBlock>,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.stem;
        let stem = Conv2d::new(store, rng, "encoder.stem.conv", cfg.in_channels, s.filters, s.kernel, s.stride, s.padding)?;
        let stem_bn = BatchNorm::new(store, "encoder.stem.bn", s.filters)?;
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        let mut in_ch = s.filters;
        for (i, spec) in cfg.blocks.iter().enumerate() {
            blocks.push(ResidualBlock::new(store, rng, &format!("encoder.block{}", i + 1), in_ch, *spec)?);
            in_ch = spec.filters;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stem_bn,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        self.forward_traced(tape, store, x, mode, None)
    }

    /// Forward pass that also records each stage's output shape.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        mut trace: Option<&mut Vec<LayerShape>>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "encoder expects [B, {}, F, T], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        self.cfg.shape_chain(shape[2], shape[3])?;

        let mut record = |tape: &Tape, name: &str, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                let s = tape.shape(v);
                t.push(LayerShape {
                    layer: name.to_string(),
                    channels: s[1],
                    height: s[2],
                    width: s[3],
                });
            }
        };
        let h = self.stem.forward(tape, store, x)?;
        let h = self.stem_bn.forward(tape, store, h, mode)?;
        let h = tape.selu(h);
        record(tape, "stem", h);
        let p = self.cfg.pool;
        let mut h = tape.max_pool2d(h, p.kernel, p.stride, p.padding)?;
        record(tape, "maxpool", h);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, store, h, mode)?;
            record(tape, &format!("block{}", i + 1), h);
        }
        let out = tape.adaptive_avg_pool2d(h, self.cfg.grid)?;
        record(tape, "grid", out);
        Ok(out)
    }
}

/// Average over frequency: one node per time column, `[B, D, F, T] -> [B, T, D]`.
pub fn to_temporal_nodes(tape: &mut Tape, x: Var) -> Result<Var> {
    check_grid(tape, x)?;
    let m = tape.mean_axis(x, 2)?;
    tape.permute(m, &[0, 2, 1])
}

/// Average over time: one node per frequency row, `[B, D, F, T] -> [B, F, D]`.
pub fn to_spectral_nodes(tape: &mut Tape, x: Var) -> Result<Var> {
    check_grid(tape, x)?;
    let m = tape.mean_axis(x, 3)?;
    tape.permute(m, &[0, 2, 1])
}

/// Frame sequence for the pooling baselines: frequency-averaged `[B, D, T]`.
pub fn to_frames(tape: &mut Tape, x: Var) -> Result<Var> {
    check_grid(tape, x)?;
    tape.mean_axis(x, 2)
}

fn check_grid(tape: &Tape, x: Var) -> Result<()> {
    if tape.shape(x).len() != 4 {
        return Err(Error::dim(format!("expected [B, D, F, T], got {:?}", tape.shape(x))));
    }
    if tape.value(x).iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("encoder output is not finite".into()));
    }
    Ok(())
}
