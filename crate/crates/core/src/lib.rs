//! Desk-scale no-reference image quality assessment with multi-view
//! attention. One crate holds the autodiff engine, the teacher/student
//! models, distillation training, metrics, and the `mobileiqa` CLI.

pub mod error;
pub mod rng;
pub mod tensor;

pub mod arch;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod macs;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pnm;
pub mod synth;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod cli;
