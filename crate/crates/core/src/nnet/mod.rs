//! Small CPU encoder-decoder for the SPG tensor, with hand-written backward
//! passes, Adam and a binary checkpoint format.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod model;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamState, TrainConfig, BETA1, BETA2, EPSILON};
pub use gradcheck::{gradient_check, random_input, relative_error, synthetic_targets, GradCheckOptions, GradCheckReport};
pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC};
pub use model::{
    model_backward, model_backward_with, model_forward, BackwardOptions, ForwardCache, Gradients, HeadOutputs,
    ModelConfig, ModelWeights, Param, REG_DIM,
};
pub use scalar::Scalar;
pub use tensor::TensorF;
