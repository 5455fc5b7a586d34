//! Vision encoder, cross-attending decoder, word bottleneck and linear head.

mod bottleneck;
mod checkpoint;
mod config;
mod forward;
mod params;

pub use bottleneck::{
    classify, classify_graph, classify_tokens, decode_soft, decode_soft_graph, encode_image, forward_hard,
    forward_hard_from_embeddings, forward_soft, forward_soft_from_embeddings, greedy_caption, hard_decode, next_word_logits,
    pool_tokens, sample_no_repetition, soft_bottleneck, soft_bottleneck_graph, soft_pass, BottleneckOutput,
    SoftPass,
};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ModelConfig;
pub use params::{Graph, NamedParam, ModelParams, ParamGroup, ParamId, PROMPT_INIT_STD};

pub(crate) use bottleneck::special_ids;
#[cfg(test)]
pub(crate) use bottleneck::image_memory;
pub(crate) use forward::{decoder, encoder, positions};

#[cfg(test)]
mod tests;
