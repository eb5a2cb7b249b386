//! Dense matrices and reverse-mode gradients.

mod matrix;
mod tape;

pub use matrix::{
    l2_normalize_rows, log_softmax_rows, matmul, matmul_transpose_a, matmul_transpose_b, row_norms,
    softmax_rows, Matrix, Normalized,
};
pub use tape::{Gradients, Tape, Var, LOG_FLOOR};
