//! layerlab: train small feed-forward / convolutional / residual networks with
//! per-epoch checkpointing, then measure how much each layer actually matters.
//!
//! The toolkit has three parts:
//!
//! - a tiny deterministic tensor/NN core (`tensor`, `nn`) with a 64-bit
//!   reference path used for gradient checking,
//! - a training loop with per-epoch checkpoints (`train`, `checkpoint`) over
//!   MNIST / CIFAR-10 / synthetic data (`data`),
//! - post-training probes (`probes`): per-layer and grouped weight reset and
//!   resampling, weight-movement distances, width sweeps, effective-parameter
//!   reports, plus FGSM/PGD attacks against a randomized residual classifier
//!   (`adversarial`) and CSV/JSON/SVG reporting (`report`).
//!
//! Everything is bitwise reproducible given the same seeds: RNG streams are
//! derived by name, reductions run in a fixed order, and checkpoints
//! round-trip exactly.

pub mod adversarial;
pub mod arch;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gemm;
pub mod nn;
pub mod params;
pub mod probes;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use arch::{ArchSpec, InitFamily, LayerKind, LayerSpec};
pub use error::{Error, Result};
pub use params::ParamSet;
pub use tensor::Tensor;
// re-exported once train lands
