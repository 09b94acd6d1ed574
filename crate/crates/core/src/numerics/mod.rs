//! Dense tensors, a recording tape for reverse-mode gradients, and the
//! checkpoint archive format.

mod checkpoint;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use scalar::Scalar;
pub use tape::{DistanceKind, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Param, ParamGroup, ParamId, ParamStore, Tensor};
