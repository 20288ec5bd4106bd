//! Tagging, hand features and id resolution.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::squad::Example;
use super::tokenize::Token;
use super::vocab::{Vocabularies, NULL_ID, PAD_ID, UNK_ID};
use crate::error::{Error, Result};

/// Linguistic annotation of one token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenTags {
    pub pos: String,
    pub ner: String,
    pub lemma: String,
}

/// Source of part-of-speech, entity and lemma annotations.
pub trait TagProvider: Send + Sync {
    fn tag(&self, tokens: &[Token]) -> Vec<TokenTags>;
}

/// Emits one placeholder tag per layer and uses the lowercase form as lemma.
#[derive(Clone, Copy, Debug, Default)]
pub struct DefaultTagger;

pub const DEFAULT_POS: &str = "UNK-POS";
pub const DEFAULT_NER: &str = "UNK-NER";

impl TagProvider for DefaultTagger {
    fn tag(&self, tokens: &[Token]) -> Vec<TokenTags> {
        tokens
            .iter()
            .map(|t| TokenTags {
                pos: DEFAULT_POS.into(),
                ner: DEFAULT_NER.into(),
                lemma: t.text.to_lowercase(),
            })
            .collect()
    }
}

/// Token-level tag lexicon read from a tab-separated file:
/// `token<TAB>POS<TAB>NER[<TAB>lemma]`, `#` comments allowed.
/// Tokens missing from the lexicon fall back to [`DefaultTagger`].
#[derive(Clone, Debug, Default)]
pub struct LexiconTagger {
    entries: HashMap<String, (String, String, Option<String>)>,
}

impl LexiconTagger {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&fields.len()) || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::Format {
                    line: i + 1,
                    message: format!("expected 3 or 4 non-empty tab-separated fields, got {}", fields.len()),
                });
            }
            entries
                .entry(fields[0].to_string())
                .or_insert_with(|| (fields[1].to_string(), fields[2].to_string(), fields.get(3).map(|s| s.to_string())));
        }
        Ok(LexiconTagger { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl TagProvider for LexiconTagger {
    fn tag(&self, tokens: &[Token]) -> Vec<TokenTags> {
        tokens
            .iter()
            .map(|t| match self.entries.get(&t.text) {
                Some((pos, ner, lemma)) => TokenTags {
                    pos: pos.clone(),
                    ner: ner.clone(),
                    lemma: lemma.clone().unwrap_or_else(|| t.text.to_lowercase()),
                },
                None => DefaultTagger.tag(std::slice::from_ref(t)).remove(0),
            })
            .collect()
    }
}

/// Model-ready ids and features of one example. Sequences may be padded
/// beyond the true lengths with [`PAD_ID`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturizedExample {
    pub id: String,
    pub question_ids: Vec<usize>,
    /// Passage word ids, NULL sentinel included at `passage_len - 1`.
    pub passage_ids: Vec<usize>,
    pub pos_ids: Vec<usize>,
    pub ner_ids: Vec<usize>,
    /// Exact, lowercase and lemma match against the question, then term
    /// frequency.
    pub match_features: Vec<[f64; 4]>,
    pub question_len: usize,
    pub passage_len: usize,
    pub span: (usize, usize),
    pub is_unanswerable: bool,
}

impl FeaturizedExample {
    pub fn null_index(&self) -> usize {
        self.passage_len - 1
    }

    /// Copy padded with [`PAD_ID`] to at least the given sequence lengths.
    pub fn padded(&self, question_to: usize, passage_to: usize) -> FeaturizedExample {
        let mut out = self.clone();
        out.question_ids.resize(question_to.max(self.question_len), PAD_ID);
        let n = passage_to.max(self.passage_len);
        out.passage_ids.resize(n, PAD_ID);
        out.pos_ids.resize(n, PAD_ID);
        out.ner_ids.resize(n, PAD_ID);
        out.match_features.resize(n, [0.0; 4]);
        out
    }
}

/// Tags every token of the examples and registers words and tags.
pub fn extend_vocabularies(vocabs: &mut Vocabularies, examples: &[Example], tagger: &dyn TagProvider) {
    for ex in examples {
        let real = &ex.passage_tokens[..ex.null_index()];
        for t in real.iter().chain(&ex.question_tokens) {
            vocabs.words.add(&t.text);
        }
        for tags in tagger.tag(real) {
            vocabs.pos.add(&tags.pos);
            vocabs.ner.add(&tags.ner);
        }
    }
}

pub fn featurize(example: &Example, vocabs: &Vocabularies, tagger: &dyn TagProvider) -> FeaturizedExample {
    let n = example.null_index();
    let real = &example.passage_tokens[..n];
    let passage_tags = tagger.tag(real);
    let question_tags = tagger.tag(&example.question_tokens);

    let q_exact: HashSet<&str> = example.question_tokens.iter().map(|t| t.text.as_str()).collect();
    let q_lower: HashSet<String> = example.question_tokens.iter().map(|t| t.text.to_lowercase()).collect();
    let q_lemma: HashSet<&str> = question_tags.iter().map(|t| t.lemma.as_str()).collect();

    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in real {
        *counts.entry(t.text.to_lowercase()).or_default() += 1;
    }
    let passage_len = n + 1;

    let mut match_features: Vec<[f64; 4]> = real
        .iter()
        .zip(&passage_tags)
        .map(|(t, tags)| {
            let lower = t.text.to_lowercase();
            let bit = |b: bool| if b { 1.0 } else { 0.0 };
            [
                bit(q_exact.contains(t.text.as_str())),
                bit(q_lower.contains(&lower)),
                bit(q_lemma.contains(tags.lemma.as_str())),
                counts[&lower] as f64 / passage_len as f64,
            ]
        })
        .collect();
    match_features.push([0.0; 4]);

    let mut passage_ids: Vec<usize> = real.iter().map(|t| vocabs.words.id(&t.text)).collect();
    passage_ids.push(NULL_ID);
    let mut pos_ids: Vec<usize> = passage_tags.iter().map(|t| vocabs.pos.id(&t.pos)).collect();
    pos_ids.push(NULL_ID);
    let mut ner_ids: Vec<usize> = passage_tags.iter().map(|t| vocabs.ner.id(&t.ner)).collect();
    ner_ids.push(NULL_ID);

    FeaturizedExample {
        id: example.id.clone(),
        question_ids: example.question_tokens.iter().map(|t| vocabs.words.id(&t.text)).collect(),
        passage_ids,
        pos_ids,
        ner_ids,
        match_features,
        question_len: example.question_tokens.len(),
        passage_len,
        span: example.training_span(),
        is_unanswerable: example.is_unanswerable,
    }
}

/// Replaces each maskable word id by the unknown id with probability `rate`.
/// Padding and the NULL sentinel are never touched; every other position
/// consumes exactly one draw.
pub fn mask_unknown_words<R: Rng + ?Sized>(batch: &mut [FeaturizedExample], rate: f64, rng: &mut R) {
    if rate <= 0.0 {
        return;
    }
    let rate = rate.min(1.0);
    for fe in batch.iter_mut() {
        let (q_len, p_len) = (fe.question_len, fe.passage_len);
        let maskable = fe.question_ids[..q_len]
            .iter_mut()
            .chain(fe.passage_ids[..p_len].iter_mut())
            .filter(|id| **id != NULL_ID && **id != PAD_ID);
        for id in maskable {
            if rng.gen_bool(rate) {
                *id = UNK_ID;
            }
        }
    }
}
