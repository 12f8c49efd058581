//! Minimal dense tensors, parameter storage and a reverse-mode tape.

mod gemm;
pub mod init;
mod params;
mod tape;
mod tensor;

pub use gemm::{matmul, matmul_nt, matmul_tn};
pub use params::{ParamId, ParamStore};
pub use tape::{ConvGeom, Gradients, Tape, Var};
pub use tensor::Tensor;
