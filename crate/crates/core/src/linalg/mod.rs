//! Dense matrix and tensor primitives shared by the editors.

mod cholesky;
pub mod container;
mod eig;
mod matrix;
mod tensor;

pub use cholesky::{push_through, solve_spd, Cholesky};
pub use eig::{eig_sym, sym_sqrt_and_inverse, top_eig_sym, EigPair, SYMMETRY_TOL};
pub(crate) use eig::canonicalize_column_signs;
pub use matrix::{dot, norm, Matrix};
pub use tensor::{Mode, Tensor3};
