//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Build a [`Graph`], register inputs with [`Graph::param`] or
//! [`Graph::constant`], compose operations, then call [`Graph::backward`] on a
//! scalar node and read gradients with [`Graph::grad`].
//!
//! ```
//! use aesvl_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul_scalar(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().item(), 6.0);
//! ```
//!
//! Broadcasting is limited to repeating a tensor over leading dimensions
//! ([`Graph::add`] with a suffix-shaped right operand, [`Graph::expand_leading`]).

mod error;
pub mod gradcheck;
mod graph;
mod tensor;

pub use error::{GraphError, Result};
pub use gradcheck::{finite_diff_check, GradCheckReport, ParamReport};
pub use graph::{Graph, Var};
pub use tensor::{DType, Real, Tensor, EPS};
