//! Minimal dense-tensor engine: f64 tensors, a reverse-mode tape, SGD with a
//! cosine schedule, finite-difference gradient checking, and a named-tensor
//! checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport};
pub use optim::{cosine_lr, Sgd, SgdConfig};
pub use params::{Bindings, ParamId, ParamStore};
pub use tape::{BatchStats, Tape, Var};
pub use tensor::Tensor;
