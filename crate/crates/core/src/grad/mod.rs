//! Reverse-mode automatic differentiation over dense arrays.

pub mod array;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use array::{gemm, is_portable, portable, Array, Float};
pub use conv::PadMode;
pub use gradcheck::{check_gradients, GradReport};
pub use layers::{Layer, LayerSpec, Sequential};
pub use params::{Group, ParamStore};
pub use tape::{Gradients, ParamId, Tape, Unary, Var};
