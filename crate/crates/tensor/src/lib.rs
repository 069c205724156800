//! Dense `f64` tensors with a tape-based reverse-mode differentiator, the
//! convolution kernels used by unrolled sparse-coding layers, a Jacobi SVD,
//! the Adam optimizer and finite-difference gradient checking.
//!
//! ```
//! use lgn_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

pub mod adam;
pub mod conv;
mod error;
pub mod gradcheck;
pub mod svd;
pub mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, GradCheck};
pub use svd::{singular_values, svd, Svd};
pub use tape::{soft_threshold_scalar, BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
