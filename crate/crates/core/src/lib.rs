//! Numerical building blocks for gradient interface models on the discrete torus.
//!
//! The crate covers the Gaussian reference measure and its kernels ([`gff`]),
//! a finite-range splitting of those kernels into scales ([`frd`]), block and
//! polymer combinatorics ([`polymers`]), the perturbing potential and its Mayer
//! function ([`perturbation`]), sampling and estimation for the interacting
//! measure ([`gibbs`]) and the scale-by-scale coupling recursions for a pair of
//! gradient observables ([`rgflow`]).

pub mod error;
pub mod fourier;
pub mod frd;
pub mod gff;
pub mod gibbs;
pub mod io;
pub mod lattice;
pub mod perturbation;
pub mod polymers;
pub mod rgflow;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use frd::{build_frd, FrdLayer, FrdStack};
pub use gff::{green_kernel, CovKernel, QMatrix};
pub use gibbs::{CovEstimate, ModelSpec};
pub use lattice::{Field, LatticePoint, Norm, Torus};
pub use perturbation::{MayerParams, PotentialKind, PotentialSpec};
pub use polymers::{Block, Polymer};
pub use rgflow::{FlowBoundParams, ObservableCouplings, RelevantHamiltonian};
