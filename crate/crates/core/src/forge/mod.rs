//! Model forges: handcrafted circuits and poisoned gradient training, plus
//! the synthetic corpus they share.

mod handcraft;
mod lang;
mod train;

pub use handcraft::{
    handcraft_model, read_blueprint, write_blueprint, CircuitBlueprint, DIM_LANG, DIM_LATENT,
    DIM_READOUT, STORE_SCALE,
};
pub use lang::{
    gen_corpus, read_corpus, write_corpus, BigramTable, Corpus, CorpusSequence, Language,
    LanguageSpec, SeqCondition, FACTOR_RANK, NEUTRAL_POOL_SIZE, TRIGGER_LEN,
};
pub use train::{grad_check, init_weights, train_model, TrainConfig};
