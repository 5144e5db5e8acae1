//! Numerical building blocks shared by every other module.

mod ema;
mod mlp;
mod optim;
mod rng;
mod spectral;
mod tensor;

pub use ema::EmaState;
pub use mlp::{Activation, DenseLayer, Mlp, MlpTrace};
pub use optim::{AdamWConfig, OptimState, StepOutcome};
pub use rng::{seeded_rng, RngStream};
pub use spectral::{
    spectral_norm_probe, top_singular_subspace, FnOperator, LinearOperator, SpectralEstimate, SymmetricFn, MIN_POWER_ITERS,
};
pub use tensor::{dot, norm2, Matrix, ParamTensor};
