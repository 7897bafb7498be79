//! Dynamic emission tomography reconstruction with fixed-point proximity
//! gradient solvers and spatiotemporal sparsity penalties.

pub mod analysis;
pub mod error;
pub mod io;
pub mod kinetics;
pub mod projector;
pub mod recon;
pub mod regularizers;
pub mod simulate;
pub mod tensor;

pub use error::{Error, Result};
pub use projector::{Geometry, Projector};
pub use tensor::{Dims, DynTensor};
