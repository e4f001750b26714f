//! Target-side language models: Kneser-Ney n-grams for data selection and a
//! transformer LM for shallow fusion.

mod neural;
mod ngram;

pub use neural::{tape_logprobs, train_neural_lm, LmReport, LmState, NeuralLm, NeuralLmConfig, LM_KIND};
pub use ngram::{
    continuation_probs, modified_kn_discounts, moore_lewis_filter, moore_lewis_select, train_ngram, NGramModel, BOS, EOS, FALLBACK_DISCOUNT, UNK,
};
