//! Dense arrays with reverse-mode differentiation.

pub mod check;
mod graph;
pub mod init;
pub mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{BatchStats, Gradients, Graph, NormMode, Reduction, Var};
pub use init::bilinear_kernel;
pub use optim::SgdMomentum;
pub use params::{parse_checkpoint, ManifestEntry, ParamId, ParamStore};
pub use scalar::{matmul, DType, Float};
pub use tensor::Tensor;
