//! Deterministic toy decoder-only transformer: RMS pre-norm, rotary
//! grouped-query attention, SiLU-gated MLP, untied output head.

mod arch;
mod forward;
mod mask;
mod weights;

pub use arch::{ArchSpec, ParamCounts};
pub use forward::RowWrite;
pub use mask::AttentionMask;
pub use weights::{
    dot, LayerWeights, Matrix, ModelWeights, WEIGHTS_FORMAT_VERSION, WEIGHTS_HEADER_BYTES,
    WEIGHTS_MAGIC,
};
