//! Message-passing network with a reverse-mode gradient tape and Adam.

pub mod adam;
pub mod checkpoint;
pub mod model;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use model::{
    edge_feature_tensor, gnn_forward, gnn_infer, gradient_check, GnnConfig, GnnOutput, GnnParams,
    ParamSet, EDGE_FEATURE_DIM,
};
pub use tape::{Ctx, Eval, Tape};
pub use tensor::Tensor;
