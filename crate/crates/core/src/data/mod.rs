//! Dataset ingestion and featurization.

pub mod cache;
pub mod contextual;
pub mod embeddings;
pub mod features;
pub mod squad;
pub mod tokenize;
pub mod vocab;

pub use contextual::{parse_contextual, ContextualVectors};
pub use embeddings::{load_embeddings, parse_embeddings, random_embeddings, EmbeddingTable};
pub use features::{
    extend_vocabularies, featurize, mask_unknown_words, DefaultTagger, FeaturizedExample, LexiconTagger, TagProvider,
};
pub use squad::{parse_dataset, parse_gold, Example, GoldQuestion, ParsedDataset, NULL_TOKEN};
pub use tokenize::{char_span_to_token_span, tokenize, Token};
pub use vocab::{Vocabularies, Vocabulary, NULL_ID, PAD_ID, UNK_ID};
