//! Minimal dense reverse-mode differentiation.
//!
//! A [`Tape`] records ops eagerly as they run; [`Tape::backward`] walks the
//! record in reverse. Learnable weights live in a [`ParamStore`] and are bound
//! to a tape with [`Tape::param`], which shares (does not copy) their values.
//! Everything is `f64`.

pub mod checkpoint;
pub(crate) mod kernels;
mod ops;
mod params;
mod tape;
mod tensor;

pub use ops::{selu, BnStats, BN_EPS};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use tape::{Gradients, Mode, Tape, Var, SELU_ALPHA, SELU_SCALE};
pub use tensor::Tensor;
