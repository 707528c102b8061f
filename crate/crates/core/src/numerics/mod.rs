//! Dense numerical substrate: matrices, temperature softmax, seeded
//! categorical sampling, loss kernels and a finite-difference gradient oracle.
//!
//! Everything is `f64`.

mod grad;
mod loss;
mod matrix;
mod prob;
mod rng;

pub use grad::finite_diff_grad;
pub(crate) use loss::{huber_grad, smooth_l1_slices};
pub use loss::{cross_entropy, smooth_l1, CE_CLAMP};
pub use matrix::{dot, Matrix};
pub use prob::{
    argmax, sample_categorical, sample_weights, softmax, softmax_rows, ProbVector, MASS_TOLERANCE,
};
pub use rng::SeededRng;
