pub mod ansatz;
pub mod checkpoint;
pub mod ed;
pub mod error;
pub mod estimators;
pub mod grassmann;
pub mod lattice;
pub mod linalg;
pub mod sampler;
pub mod seeds;
pub mod sr;
pub mod stats;
pub mod verify;
pub mod wavefunction;

pub use error::{Error, Result};
