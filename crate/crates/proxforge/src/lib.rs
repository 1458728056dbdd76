//! Primal-dual proximal splitting with learnable multi-memory scheme matrices.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: flat `f64` tensors tagged with a space, product elements,
//!   and a counter-based reproducible random stream.
//! - [`linops`]: linear operators with adjoints and certified norm bounds
//!   (identity, scaling, finite-difference gradient, convolution, dense
//!   matrix, sparse fan-free tomography projector), plus power-method norm
//!   estimation and operator normalization.
//! - [`prox`]: proximal calculus for the function atoms used by the solvers,
//!   including conjugate proxes via Moreau decomposition and
//!   prox-of-a-sum-of-separable-blocks.
//! - [`scheme`]: the multi-memory primal-dual iteration engine driven by
//!   coefficient matrices, with presets for the classic splitting schemes
//!   and a structural validity checker for fixed-point consistency.
//! - [`convergence`]: certified step-size regions, Lyapunov quadratic forms,
//!   Fejér monotonicity checks, Lagrangian duality-gap bounds, and strong
//!   convergence estimates.
//! - [`tape`]: reverse-mode differentiation through unrolled solver runs.
//! - [`learn`]: parameter vectors, raw-to-scheme decodings, stochastic-depth
//!   training loop with Adam, cosine schedule and gradient clipping.
//! - [`bench`]: imaging problem families (deblurring, tomography), phantom
//!   and data simulation, reference solutions, and the evaluation table.
//! - [`io`]: JSON/CSV/binary persistence for elements, weights, configs and
//!   result tables.

pub mod bench;
pub mod convergence;
pub mod error;
pub mod io;
pub mod learn;
pub mod linops;
pub mod prox;
pub mod scheme;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
