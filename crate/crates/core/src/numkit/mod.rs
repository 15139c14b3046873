//! Dense numerics shared by the encoder, victim, attack and metrics code:
//! vectors, matrices, row softmax, symmetric eigendecomposition and seeded
//! random streams.

mod eig;
mod matrix;
mod rng;
mod scalar;
mod vector;

pub use eig::{psd_sqrt, reconstruct, sym_eig};
pub(crate) use matrix::softmax_in_place;
pub use matrix::{softmax_rows, DenseMatrix};
pub use rng::SeededRng;
pub use scalar::Real;
pub(crate) use vector::{axpy, dot};
pub use vector::{cosine, l2_normalize, DenseVector, NORM_FLOOR};
