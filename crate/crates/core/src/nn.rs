//! Parameterised layers built on the tape ops.

use rand::Rng;

use crate::autodiff::{BnStats, Mode, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let fan_in = in_ch * kernel.0 * kernel.1;
        let weight = store.add_he_uniform(format!("{name}.weight"), &[out_ch, in_ch, kernel.0, kernel.1], fan_in, rng)?;
        Ok(Self { weight, stride, padding })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.conv2d(x, w, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], 1.0), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full([channels], 1.0), ParamKind::Buffer)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let stats = BnStats {
            store,
            running_mean: self.running_mean,
            running_var: self.running_var,
        };
        tape.batch_norm(x, gamma, beta, stats, mode)
    }
}

/// `x @ W (+ b)` for `x [M, in]`, `W [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = store.add_he_uniform(format!("{name}.weight"), &[input, output], input, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([output]), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_last(y, b)
            }
            None => Ok(y),
        }
    }
}
