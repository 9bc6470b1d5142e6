//! Small, self-contained linear algebra: CSR operators for assembled FEM
//! matrices, a banded LU with partial pivoting whose pivot signs feed the
//! branch-point test function, and a shift-invert Arnoldi iteration for the
//! generalized stability eigenproblem.

pub mod arnoldi;
pub mod band;
pub mod csr;

pub use arnoldi::{arnoldi_ritz_values, RitzValue};
pub use band::{BandLu, BandMatrix};
pub use csr::CsrMatrix;
