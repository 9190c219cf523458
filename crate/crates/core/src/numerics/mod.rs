//! Dense matrix kernels, seeded randomness and loss primitives.

pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod rng;

pub use gradcheck::{finite_difference_check, DEFAULT_STEP};
pub use loss::{
    contrastive_alignment, contrastive_alignment_masked, contrastive_anchor_grad, cosine,
    cosine_similarity_matrix, log_sum_exp, softmax_cross_entropy, softmax_rows, squared_distance,
    Alignment,
};
pub use matrix::{dot, norm, Matrix};
pub use rng::{RngStream, StreamId};
