//! Composite units built from engine kernels.

pub mod attention;
pub mod layers;
pub mod residual;

pub use attention::{AttentionBlock, AttentionBlockSpec, MaskSource};
pub use layers::{BatchNorm, Conv, Dense, LayerBuilder, Session, SessionOutput};
pub use residual::{PreActConv, ResidualBlock, ResidualBlockSpec};
