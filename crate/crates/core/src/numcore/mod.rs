//! Dense tensors, reverse-mode differentiation, SGD and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod optim;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Activation, Graph, KernelForm, Var};
pub use kernels::{PlaneMap, PoolMode, ResumeMode};
pub use optim::{OptState, ParamStore, SgdConfig};
pub use tensor::{Real, Tensor};
