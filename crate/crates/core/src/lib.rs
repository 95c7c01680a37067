//! Avatar knowledge distillation on desk-scale toy networks.
//!
//! The crate is `no_std` (it needs `alloc`) and carries every numerical piece
//! of the workbench:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a define-by-run tape
//!   with reverse-mode gradients, plus [`gradcheck`] for finite differences.
//! - [`nn`]: layers, the toy teacher/student pair, the channel projection and
//!   the non-affine batch standardization that zero-centres teacher features.
//! - [`avatar`]: perturbed copies of standardized teacher features.
//! - [`uncertainty`]: streaming per-position variance merged into a
//!   temperature field.
//! - [`distill`]: the ensemble mimic loss, its uncertainty-weighted MSE and KL
//!   forms, and closed-form gradients checked against the tape.
//! - [`data`] and [`train`]: the synthetic dataset and training loops.
//!
//! File formats, the experiment runner and the command line live in the
//! `akd-lab` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod avatar;
pub mod data;
pub mod distill;
mod error;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{FeatureBatch, Shape, Tensor};
