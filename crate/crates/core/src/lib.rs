//! Toolkit for building a masked language model of Early Modern French:
//! corpus compilation with licence tiers, graphemic normalization, byte-level
//! BPE, a from-scratch transformer encoder with analytic gradients, dynamic
//! masking pretraining, POS fine-tuning with mean subword pooling, stratified
//! evaluation and carbon accounting.

pub mod bpe;
pub mod carbon;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod mlm;
pub mod normalize;
pub mod synthetic;
pub mod tagger;
pub mod tensor;

pub use bpe::{BpeModel, TokenId, TokenSequence};
pub use corpus::{Document, Licence, LinguisticStatus, Tier};
pub use encoder::{EncoderConfig, EncoderModel, ForwardPass, NormPlacement};
pub use error::{Error, Result};
pub use normalize::RuleSet;
pub use tagger::{EvalReport, FinetuneConfig, HeadConfig, TagSet, TaggedDocument, TaggedSentence, Tagger};
pub use tensor::{Scalar, Tensor};
