//! Unsupervised multi-focus image fusion.
//!
//! A three-branch convolutional network is trained end to end on registered
//! multi-focus pairs with a windowed structural-similarity loss that, in every
//! window, compares the fused output with whichever source is locally sharper.
//! No all-in-focus ground truth is needed. The network is fully convolutional
//! and fuses pairs of any size at inference time.
//!
//! Modules, bottom up:
//!
//! - [`tensor`], [`autodiff`]: 4-D tensors and a define-by-run gradient tape
//!   covering exactly the operations the network and loss need.
//! - [`ssim`]: window statistics, per-window SSIM, the sharpness gate and
//!   the fusion loss with its analytic gradient.
//! - [`model`]: the network and its weights.
//! - [`train`], [`optim`], [`checkpoint`]: patch sampling, updates, schedule
//!   and persistence.
//! - [`metrics`]: entropy, Piella's Q_S, reports and synthetic test pairs.
//! - [`fusion`]: grayscale and colour fusion of image files.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod imageio;
mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod raster;
pub mod ssim;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{MfNetConfig, MfNetWeights};
pub use raster::Image;
pub use ssim::SsimConstants;
pub use tensor::{ConvParams, Real, Tensor};
pub use train::TrainConfig;
