//! Unsupervised GAN pre-training for frame-based action recognition.
//!
//! A DCGAN is trained on unlabeled video frames; its discriminator is then cut
//! at a named convolutional block, extended into a classifier, fine-tuned on
//! labeled frames and evaluated at the video level, either through a linear
//! SVM on pooled features or by averaging per-frame softmax outputs.

pub mod classify;
pub mod data;
pub mod error;
pub mod gan;
pub mod harness;
pub mod nn;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
