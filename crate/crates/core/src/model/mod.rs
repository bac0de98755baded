//! The network: Expert Consultation projection, Nyström-attention encoder
//! and an autoregressive label decoder (or a linear classification head).

pub mod attention;
pub mod decode;
pub mod decoder;
pub mod encoder;
pub mod expert;
pub mod init;
pub mod network;
pub mod vocab;

pub use attention::{exact_attention, nystrom_attention, AttentionKind, MultiHeadAttention};
pub use decode::{classify_decoded, mask_woi, Decoded, DEFAULT_MAX_LEN};
pub use expert::{consult, ec_weights, Conditioning, EcNormalization, ExpertCommittee};
pub use network::{Cosformer, Forced, Head, HeadKind, ModelConfig, Projection, WordEmbedder};
pub use vocab::{Vocabulary, BOS, EOS};
