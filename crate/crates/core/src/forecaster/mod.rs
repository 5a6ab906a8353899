//! Multi-branch encoder–decoder Transformer emitting a one-step forecast for
//! every sensor.

pub mod attention;
pub mod complexity;
mod stack;

pub use attention::{
    local_conv_branch, scaled_dot_attention, BranchConfig, BranchMix, Dropout, GlobalAttention, LocalConv,
    MultiHead,
};
pub use complexity::{complexity_report, AttentionKind, Complexity};
pub use stack::{DecoderLayer, EncoderLayer, Forecaster, ForecasterConfig, LayerNorm};
