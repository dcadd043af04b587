//! KL divergence estimation with a GAN-style discriminator whose final layer
//! lives in an explicitly controlled reproducing-kernel space.
//!
//! The estimator trains a small feature network with a Gaussian-distributed
//! readout weight on a logistic discrimination objective, penalizes the
//! largest kernel Gram entry seen per minibatch to keep the induced kernel
//! bounded, and reads off the divergence as the mean discriminator value on
//! numerator samples. Deterministic plain-readout, Donsker-Varadhan, and
//! Gilardoni-style variational baselines share the same network and training
//! loop so comparisons isolate the objective and the stochastic head.
//!
//! Modules:
//!
//! * [`linalg`]: small dense row-major matrix type the hand-written
//!   backpropagation works on.
//! * [`nn`]: feature network, deterministic readout, and the Adam optimizer.
//! * [`rkhs`]: stochastic readout head, induced kernel, Gram machinery.
//! * [`objectives`]: discrimination objectives, penalty, bound values, and
//!   the per-minibatch tightness check.
//! * [`data`]: Gaussian scenarios, exact divergences, sampling.
//! * [`trainer`]: minibatch training loop, run reports, aggregation.
//! * [`diagnostics`]: probability bound evaluator and trace checks.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod objectives;
pub mod rkhs;
pub mod trainer;

pub use error::{Error, Result};
