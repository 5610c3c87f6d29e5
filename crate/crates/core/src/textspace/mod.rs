//! Toy text space: corpus, text encoder with a frozen twin, negative label
//! mining, distance grouping and learnable outlier prompts.

mod corpus;
mod mining;
mod prompts;
mod space;

pub use corpus::{Corpus, CORPUS_SEED, CORPUS_WORDS, TEXT_DIM};
pub use mining::{
    group_by_distance, group_mean, neg_mine, neg_mine_embeddings, order_statistic_selection, Binning, OODLabelSet,
    DEFAULT_FILTER_QUANTILE,
};
pub use prompts::{
    encode_prompts, prompt_alignment_loss, prompt_alignment_loss_on_tape, prompt_alignment_terms, prompt_name, train_prompts, MinedLabels,
    OODPromptSet, DEFAULT_PROMPT_LEN,
};
pub use space::{encode_rows, encode_vectors, EmbeddingSpace};
