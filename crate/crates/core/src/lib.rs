//! φ⁴ lattice field theory as a trainable Markov random field.
//!
//! The crate covers the inhomogeneous φ⁴ action on a square lattice, Metropolis
//! sampling, variational training against a fixed target action, complex
//! reweighting with weight-function diagnostics, likelihood training from data,
//! a bipartite φ⁴ network generalising restricted Boltzmann machines, and a
//! quadrature oracle for tiny lattices.

pub mod error;
pub mod io;
pub mod lattice;
pub mod likelihood;
pub mod mcmc;
pub mod oracle;
pub mod phi4nn;
pub mod reweight;
mod par;
pub mod stats;
pub mod variational;

pub use error::{Error, Result};
pub use lattice::{
    build_square_lattice, Action, CouplingSet, FieldConfiguration, LatticeGeometry, StandardCouplings,
    TargetActionSpec, TermSums,
};
pub use mcmc::{SampleEnsemble, SamplerConfig};
pub use par::set_thread_count;
