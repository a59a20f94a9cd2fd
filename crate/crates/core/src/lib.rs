//! Pseudo-depth GAN backbone pre-training for face anti-spoofing.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: `f64` tensors, reverse-mode autodiff, Adam/SGD, `PDT1` files
//! - [`synth`]: procedural live/spoof faces with pseudo-depth targets
//! - [`models`]: depth generator, auxiliary-classifier critic, liveness classifier
//! - [`training`]: warmup + adversarial depth training, classifier fine-tuning
//! - [`eval`]: APCER/BPCER/ACER, F1, AUC, threshold sweep and PCA projection

pub mod eval;
pub mod models;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use tensor::{Graph, Tensor, TensorError, Var};
