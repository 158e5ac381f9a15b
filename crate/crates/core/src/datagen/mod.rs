//! Toy bona fide corpus, acoustic features, and DSP copy-synthesis spoofs.

pub mod corpus;
pub mod features;
pub mod synth;
pub mod vocoder;

pub use corpus::{
    build_corpus, corpus_paths, extract_corpus_features, read_features, source_utt, vocode_corpus,
    write_bonafide, write_features, Split, VocoderAssign,
};
pub use features::{extract_features, AcousticFeatures, FeatConfig, LOG_EPS};
pub use synth::{synth_bonafide, CorpusConfig, SynthStyle};
pub use vocoder::{vocode, VocoderId};
