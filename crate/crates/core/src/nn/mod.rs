//! Minimal CPU neural-network toolkit: just the layers this crate needs.

mod layers;
mod optim;
mod tensor;
mod trace;

pub use layers::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, BatchNorm, BnCache,
    Conv2d, ConvCache, Linear, Module, Param,
};
pub use optim::{clip_grad_norm, AdamW};
pub use tensor::{gemm, Matrix, Tensor4};
pub use trace::ExecTrace;
