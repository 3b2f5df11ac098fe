//! Differentiable numeric kernels with hand-written backward passes.

pub mod attention;
pub mod dropout;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod param;
pub mod transformer;

pub use attention::{multi_head_attention, AttentionConfig, MultiHeadAttention};
pub use dropout::Mode;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{FeedForward, LayerNorm, Linear};
pub use loss::{weighted_cross_entropy, ClassWeights};
pub use ops::softmax_rows;
pub use optim::{adamw_step, AdamWConfig};
pub use param::{Param, Parameterized};
pub use transformer::{transformer_encode, TransformerEncoder};
