//! Parameter registry and reusable convolutional blocks.

pub mod layers;
pub mod params;

pub use layers::{
    eca_kernel_size, init_params, kaiming_bound, BatchNorm, Block, BlockKind, BlockSpec, Cbr, Conv, DecoderBlock, Eca,
    EncoderBlock, Module,
};
pub use params::{Gradients, Graph, ModuleParams, ParamEntry};
