//! Minimal neural-network engine: five layer kinds, reverse-mode gradients,
//! Adam, binary cross-entropy, and an early-stopping training loop.
//!
//! Nothing here knows about domains or orgs; inputs are integer-code batches
//! and targets are values in `[0,1]`. All arithmetic is f64 and sequential,
//! so results are bit-reproducible given the same seeds.

mod adam;
mod gradcheck;
mod graph;
mod loss;
mod serialize;
mod tensor;
#[cfg(test)]
mod tests;
mod trainer;

pub use adam::Adam;
pub use gradcheck::{gradient_check, gradient_check_sampled, CheckInput, GradCheckReport};
pub use graph::{
    Activation, EncodedBatch, GradStore, InputSig, LayerSpec, ModelGraph, Tape, WeightStore,
};
pub use loss::loss_bce;
pub use serialize::{read_model, write_model};
pub use tensor::Tensor;
pub use trainer::{
    train, DataRef, EncodedDataset, FeatureDataset, OptimizerKind, TrainConfig, TrainHistory,
    Trainer,
};

/// Epsilon used to clamp predictions away from {0,1} before the log in BCE.
pub const BCE_EPS: f64 = 1e-7;
