//! CNN-based reduced-order modeling for multiscale PDEs with random inputs.
//!
//! The library is organized around the offline/online split of reduced-order
//! modeling:
//!
//! * [`fem`] — structured-grid 2D finite elements: assembly, linear and
//!   nonlinear solves, and the relative test mean error metric.
//! * [`fields`] — random-input generators (binomial point process,
//!   Karhunen–Loève log-Gaussian fields, channelized-raster patches).
//! * [`pod`] — POD snapshot compression and the classical Galerkin
//!   reduced-basis baseline.
//! * [`autodiff`] — a reverse-mode tape with the layer set the networks
//!   need (same-padded convolution, batch norm, fully connected, Adam).
//! * [`galerkin`] — the differentiable Galerkin-projection output layer and
//!   the Frobenius condition number used to stabilize it.
//! * [`basisnet`] — the Basis CNN: input-specific reduced basis functions
//!   finished by the Galerkin-projection activation.
//! * [`coefnet`] — the Coefficient CNN and the iteration-free surrogate.
//! * [`msfem`] — multiscale FEM with oversampling, recombination, and
//!   coarse solves driven by either solved or learned local bases.
//! * [`vae`] — surrogate-constrained variational inference over KLE
//!   coefficients from sparse noisy observations.
//! * [`io`] — tensor/checkpoint persistence, dataset generation and
//!   manifests, run configuration, CSV/PGM emitters.

pub mod autodiff;
pub mod basisnet;
pub mod dataset;
pub mod error;
pub mod fem;
pub mod fields;
pub mod galerkin;
pub mod nn;
pub mod pod;
pub mod rng;

pub use error::{Error, Result};
pub use fem::{
    relative_test_mean_error, ElementKind, FemSystem, FieldNodal, Grid2D, SolveReport,
    SparseMatrixCsr,
};
pub use galerkin::{cond_frobenius, galerkin_activation, GalerkinCache};
pub use pod::PodBasis;


