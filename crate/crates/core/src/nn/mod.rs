//! Normalization layers, bottleneck blocks and the toy segmentation network.

pub mod block;
pub mod checkpoint;
pub mod net;
pub mod norm;
pub mod params;

pub use block::{bottleneck_block, BlockOutput, BlockSpec, NormPolicy};
pub use net::{ForwardPass, NetConfig, ToyNet, INPUT_PROBE};
pub use norm::{BranchSet, Mode, NormConfig, NormParams, SwitchableWeights};
pub use params::{ParamKind, ParamStore};
