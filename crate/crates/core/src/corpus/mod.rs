//! Tokenization, vocabularies, noise models, synthetic data and batching.

mod batch;
mod features;
mod noise;
mod synth;
mod tokenize;
mod vocab;

pub use batch::{
    make_batches, Batch, BatchStream, EpochSampler, Example, Modality, ModalitySchedule,
    ParallelPair,
};
pub use features::{
    read_features, write_features, ImageFeatureGrid, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use noise::{corrupt_image, noise_delete, noise_permute};
pub use synth::{
    gen_synthetic, Cipher, EncodedSynth, SynthConfig, SynthData, SynthFingerprint, SynthSentence,
    WordClass,
};
pub use tokenize::tokenize;
pub use vocab::{
    build_vocab, Lang, TokenId, TokenSeq, Vocab, BOS, EOS, NUM_SPECIALS, PAD, SPECIAL_TOKENS, UNK,
};
