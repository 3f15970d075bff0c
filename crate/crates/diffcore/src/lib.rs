//! Define-by-run reverse-mode differentiation for small convolutional and
//! recurrent models.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters enter the graph
//! through [`Graph::param`], every operation records its inputs, and
//! [`Graph::backward`] walks the recording in reverse to populate gradients.
//! Everything is generic over [`Scalar`] so that training can run in `f32`
//! while verification (see [`gradcheck`]) runs in `f64`.

mod error;
mod graph;
mod kernels;
mod tensor;

pub mod adam;
pub mod gradcheck;
pub mod gru;
pub mod init;
pub mod params;

pub use adam::{AdamConfig, AdamState};
pub use error::{DiffError, Result};
pub use graph::{CustomOp, Graph, Var};
pub use gru::{gru_cell, gru_sequence, GruParams};
pub use params::{collect_grads, ParamId, ParamSet};
pub use tensor::Tensor;

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point element type usable in a [`Graph`].
pub trait Scalar: Float + NumAssign + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static {
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
