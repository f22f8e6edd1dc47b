//! Decoder-free variational contrastive learning on the unit hypersphere.
//!
//! The crate trains stochastic encoders that map inputs to *distributions*
//! over unit-norm embeddings instead of points: an MLP emits the mean and
//! per-dimension log-variance of a diagonal Gaussian, a sample from it is
//! radially projected onto the sphere, and a contrastive objective is paired
//! with a closed-form KL regularizer that anchors the posterior to the
//! uniform distribution on the sphere. The same machinery covers the
//! self-supervised pairing (vsimclr), its supervised counterpart (vsupcon),
//! and their deterministic baselines (simclr, supcon).
//!
//! Everything runs in `f64` on a small define-by-run reverse-mode
//! differentiation graph ([`graph`]), with seeded splittable randomness
//! ([`prng`]) so that every run, loss trace, checkpoint, and report is
//! exactly reproducible from a seed.
//!
//! Modules:
//! - [`tensor`], [`graph`], [`prng`]: dense `f64` tensors, the autodiff
//!   tape, and the documented SplitMix64/Box-Muller generator.
//! - [`posterior`]: sphere-projected Gaussian posteriors, their closed-form
//!   KL to the standard normal, and a binned Monte-Carlo estimate of the
//!   spherical KL it upper-bounds.
//! - [`losses`]: temperature-scaled cosine InfoNCE, supervised contrastive
//!   loss, and their variational combinations.
//! - [`encoder`]: the MLP encoder with split mean/log-variance head and
//!   spectral-norm weight projection.
//! - [`train`]: augmentation, the training loop, optimizers, checkpoints.
//! - [`diagnostics`]: covariance spectra and effective rank, a
//!   discrete/continuous mutual-information estimator, linear probing,
//!   uncertainty regressions, KL generalization gaps, and dispersion
//!   summaries for out-of-distribution inputs.
//! - [`optimal_critic`]: exact enumeration and Monte-Carlo convergence
//!   checks for the contrastive bound under the optimal critic on discrete
//!   joints.
//! - [`data`]: synthetic mixtures, CSV and CIFAR-10 binary loaders, soft
//!   labels, and JSON-lines metrics.

pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod losses;
pub mod optimal_critic;
pub mod posterior;
pub mod prng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{grad_check, grad_check_multi, Gradients, Graph, VarId};
pub use prng::Prng;
pub use tensor::{l2_norm, l2_normalize, Tensor};
