//! Dense `f64` matrix kernels with graph-recorded reverse-mode
//! differentiation, including nested (second-order) gradients.
//!
//! ```
//! use numkit::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = x.mul(x);
//! let dx = g.grad(y, &[x], false).unwrap();
//! assert_eq!(dx[0].value().scalar_value().unwrap(), 6.0);
//! ```

mod check;
mod error;
mod graph;
pub mod ops;
mod tensor;

pub use check::{finite_diff_check, grad_norm_grad, grad_norm_penalty};
pub use error::{NumError, Result};
pub use graph::{Graph, Var};
pub use tensor::{cross_entropy, softmax_in_place, Tensor};
