pub mod admm;
pub mod centralized;
pub mod consensus;
pub mod graph;
pub mod harness;
pub mod spectral;
pub mod subproblem;
pub mod weights;

pub use graph::{Graph, GraphError};
pub use spectral::{Matrix, Vector};
