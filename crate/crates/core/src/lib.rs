//! Fault-tolerant activation clipping for small convolutional networks.
//!
//! The crate trains clipping thresholds for ReLU networks (layer-wise for
//! hidden layers, neuron-wise for the final hidden layer), reconstructs the
//! Ranger, FT-ClipAct and FitAct baselines, and measures resilience with
//! Monte-Carlo bit-flip campaigns over a Q15.16 parameter encoding.

pub mod activation;
pub mod data;
pub mod error;
pub mod faultinject;
pub mod fixedpoint;
pub mod hardening;
pub mod layer;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use activation::{ActivationKind, Threshold, ThresholdSet};
pub use data::Dataset;
pub use error::{Error, Result};
pub use fixedpoint::FixedCode;
pub use layer::LayerSpec;
pub use model::Network;
pub use tensor::Tensor;
