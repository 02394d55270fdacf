//! One-shot segmentation with a selector-gated Siamese encoder/decoder.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape.
//! * [`segnet`]: the network, its needle pass and gated/ungated passes.
//! * [`losses`], [`aux_weighter`], [`optim`]: the four task losses, the
//!   auxiliary loss-weighting network, Adam and the training iteration.
//! * [`data`]: procedural needle/haystack episodes and the dataset format.
//! * [`eval`]: classification by IoU, pickup metrics and learning curves.
//! * [`checkpoint`]: saving and resuming networks and trainers.

pub mod autodiff;
pub mod aux_weighter;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod kernels;
pub mod losses;
pub mod optim;
pub mod segnet;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
