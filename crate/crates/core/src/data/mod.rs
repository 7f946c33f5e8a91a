//! Tokenization, datasets, MLM masking and synthetic tasks.

mod dataset;
mod masking;
mod synthetic;
mod vocab;

pub use dataset::{
    load_corpus, load_tsv_dir, load_tsv_dir_with_vocab, subsample_low_resource, write_tsv_dir,
    LabeledExample, LoadOptions, Split, TaskDataset,
};
pub use masking::{mask_for_mlm, mask_with_rng, MaskedBatch, MlmTarget, MLM_SELECT_RATE};
pub use synthetic::{
    generate_synthetic_task, keyword_lookup_accuracy, SplitSizes, SyntheticTaskSpec,
};
pub use vocab::{
    tokenize, tokenize_corpus, VocabSettings, Vocabulary, CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID,
    SEP_ID, SPECIAL_TOKENS, UNK_ID,
};
