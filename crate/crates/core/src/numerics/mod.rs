//! Dense matrices, reverse-mode differentiation and Adam.

mod adam;
mod matrix;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use matrix::Matrix;
pub use tape::{
    attention_scores, softmax_rows, AttentionScores, BatchStats, Mode, RunningStats, Tape, Var,
    BATCH_NORM_EPS,
};
