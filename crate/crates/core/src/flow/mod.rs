//! Normalizing flows with exact log-density.

mod container;
mod layers;
mod model;
mod spline;

pub use container::{FORMAT_VERSION, MAGIC};
pub use layers::{ActNorm, CouplingLayer, CouplingTrace, LowRankConditioner, Permutation, Standardizer};
pub use model::{
    build_flow, clone_to_conditional, AtomicKind, FlowBlock, FlowConfig, FlowModel, INVERSE_TOLERANCE,
};
pub use spline::{rqs_transform, Spline, SplineConfig};
