pub mod attention;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod lsm;
pub mod model;
pub mod moe;
pub mod parallel;
pub mod rng;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use lsm::{Instance, LsmSpec, MemoryState};
pub use rng::Rng;
pub use tensor::{Precision, Tensor};
pub use model::{build_model, LayerPattern, Model, ModelConfig, PackedBatch};
