//! Semantic-tube auxiliary loss laboratory.
//!
//! The crate bundles a small define-by-run autodiff engine ([`tensor`]), a
//! decoder-only transformer built on it ([`transformer`]), the next-token and
//! tube-prediction losses with their ablation variants ([`losses`]),
//! trajectory diagnostics ([`geometry`]), closed-form bounds and simulations
//! ([`theory`]) and the synthetic two-view tasks ([`data`]).

pub mod data;
pub mod geometry;
pub mod losses;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod transformer;

pub use tensor::{Graph, Op, Tensor, TensorError, Var};
