//! Minimal CPU tensor autodiff used by the detector, classifier, and
//! fusion networks.
//!
//! Everything is f32 on `ndarray`, single-threaded, and evaluated in a
//! fixed order, so a given seed reproduces training bit for bit. The op
//! set is exactly what the networks here need; convolution runs as
//! im2col plus a GEMM.

pub mod checkpoint;
pub mod init;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointHeader};
pub use layers::BatchNorm2d;
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{Arr, Gradients, Tape, Var};
