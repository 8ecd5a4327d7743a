//! Dense linear algebra, learnable parameters and reverse-mode gradients.

pub mod checkpoint;
pub mod gradcheck;
pub mod matrix;
pub mod params;
pub mod scalar;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_with, GradCheckConfig, GradCheckReport};
pub use matrix::Matrix;
pub use params::{Gradients, Init, ParamId, ParamStore};
pub use scalar::{Precision, Scalar};
pub use tape::{HeadSpec, RowGroup, Segments, Tape, Var};
