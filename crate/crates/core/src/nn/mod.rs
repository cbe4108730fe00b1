//! Dense tensors and the hand-differentiated layer kernels used by both
//! networks. Every layer has a forward pass and an exact backward pass;
//! `gradcheck` verifies them against central finite differences.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, straddles_kink, GradCheckReport};
pub use layers::{BatchNorm, Conv2d, Dense, DepthwiseConv1d, Pointwise, Se2d, SeTemporal};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};
pub use params::{BufferId, Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Scalar type for tensors: `f32` for training and inference, `f64` for
/// gradient checking.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Train mode uses batch statistics in batch-norm; eval uses running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
