//! Minimal differentiable-array substrate: shapes, elementwise math, matrix
//! products, an attention primitive, positional encodings and a
//! finite-difference gradient checker.

pub mod array;
pub mod gradcheck;
pub mod graph;
pub mod positional;

pub use array::{matmul, scaled_dot_attention, softmax_rows, transpose, NdArray};
pub use gradcheck::{finite_diff_check, GradReport};
pub use graph::{Grads, Graph, Var};
pub use positional::{sinusoidal_positions, sinusoidal_positions_offset};
