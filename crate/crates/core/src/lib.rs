//! Local dimension of fully-connected ReLU networks.
//!
//! The local dimension of a network `f_theta` on a sample `X` is the rank of the
//! differential of `theta -> f_theta(X)`. This crate builds that Jacobian by
//! backpropagation, measures its numerical rank, evaluates the exact closed
//! form available for one-dimensional shallow networks, and drives the small
//! training experiments that track how the rank evolves during optimization.
//!
//! Modules:
//! - [`net`]: architectures, parameters, forward pass, activation patterns, symmetries.
//! - [`jacobian`]: the Jacobian by per-row backpropagation, plus a finite-difference oracle.
//! - [`localdim`]: numerical rank, tolerance policies, and the sampled `dim+`/`dim-` envelope.
//! - [`shallow`]: closed-form theory for `(1, N_1, 1)` networks and the cone partition.
//! - [`train`]: full-batch gradient descent and Adam with trajectory recording.
//! - [`experiments`]: the drivers used by the command-line tool.
//! - [`io`]: sample CSV and IDX readers, CSV writers.

pub mod error;
pub mod experiments;
pub mod io;
pub mod jacobian;
pub mod localdim;
pub mod net;
pub mod shallow;
pub mod train;

pub use error::{Error, Result};
pub use jacobian::{backprop_row, finite_diff_jacobian, jacobian, jacobian_sub_batched, JacobianMatrix};
pub use localdim::{dim_envelope, local_dimension, numerical_rank, DimEnvelope, LocalDimReport, RankProfile, TolPolicy};
pub use net::{
    activation_pattern, boundary_margin, forward, init_params, permute, rescale, ActivationPattern, Architecture,
    ForwardTrace, InitScheme, OutputActivation, Params, Sample,
};
