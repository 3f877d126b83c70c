//! Base encoder and masked transformer blocks.

mod features;
mod modules;
mod tokens;

pub use features::{AgentTensor, MapTensor, ANCHOR_SCALE, C_A, C_M, POS_SCALE, VEL_SCALE};
pub use modules::{AgentEncoder, BaseEncoder, Encoded, EncoderBlocks, EncoderConfig, MapEncoder};
pub use tokens::{TokenKind, TokenSet};

#[cfg(test)]
mod tests;
