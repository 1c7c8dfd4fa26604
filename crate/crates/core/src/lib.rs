//! Numerical laboratory for linearized internal-data inverse problems.

pub mod functionals;
pub mod grid;
pub mod io;
pub mod parametrix;
pub mod pde;
pub mod recon;
pub mod symbols;
