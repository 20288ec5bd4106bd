//! Entry points for every parser and decoder, shared by the fuzz targets
//! and the seed-corpus replay test. Each accepts arbitrary bytes, must not
//! panic, checks the round trips that hold for accepted input and
//! returns whether the input was accepted.

use std::path::Path;

use crate::checkpoint::decode_checkpoint;
use crate::codec;
use crate::config::{parse_config_text, parse_overrides, RunConfig};
use crate::data::cache::{decode_featurized, decode_vocabularies, encode_featurized, encode_vocabularies};
use crate::data::tokenize::char_slice;
use crate::data::{parse_contextual, parse_dataset, parse_embeddings, parse_gold, tokenize, LexiconTagger, Vocabulary};
use crate::evaluation::{parse_na_probs, parse_predictions};
use crate::rng::seeded;

/// Names of all entry points, matching the fuzz target and corpus names.
pub const TARGETS: [&str; 14] = [
    "dataset",
    "gold",
    "tokenize",
    "embeddings",
    "config_file",
    "overrides",
    "tensor_container",
    "checkpoint",
    "featurized_cache",
    "vocabularies",
    "predictions",
    "na_probs",
    "tag_lexicon",
    "contextual",
];

/// Runs the named entry point. Panics on an unknown name.
pub fn run(target: &str, data: &[u8]) -> bool {
    let f: fn(&[u8]) -> bool = match target {
        "dataset" => dataset,
        "gold" => gold,
        "tokenize" => tokenize_text,
        "embeddings" => embeddings,
        "config_file" => config_file,
        "overrides" => overrides,
        "tensor_container" => tensor_container,
        "checkpoint" => checkpoint,
        "featurized_cache" => featurized_cache,
        "vocabularies" => vocabularies,
        "predictions" => predictions,
        "na_probs" => na_probs,
        "tag_lexicon" => tag_lexicon,
        "contextual" => contextual,
        other => panic!("unknown fuzz target {other}"),
    };
    f(data)
}

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

pub fn dataset(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let Ok(parsed) = parse_dataset(t) else { return false };
    for e in &parsed.examples {
        let (b, end) = e.training_span();
        assert!(b <= end && end <= e.null_index());
        assert!(!e.question_tokens.is_empty());
        for &(i, j) in &e.gold_spans {
            assert!(i <= j && j < e.null_index());
            let _ = e.span_text(i, j);
        }
    }
    true
}

pub fn gold(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let Ok(golds) = parse_gold(t) else { return false };
    assert!(golds.iter().all(|g| g.is_unanswerable == g.answers.is_empty()));
    true
}

pub fn tokenize_text(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let mut prev = 0;
    for tok in tokenize(t) {
        assert!(tok.start >= prev && tok.start < tok.end);
        assert_eq!(char_slice(t, tok.start, tok.end), tok.text);
        prev = tok.end;
    }
    true
}

/// The first byte picks the vector width; the rest is the file.
pub fn embeddings(data: &[u8]) -> bool {
    let Some((&first, rest)) = data.split_first() else { return false };
    let dim = 1 + (first % 8) as usize;
    let mut vocab = Vocabulary::new();
    for w in ["the", "harbor", "Velmont", "1642", "a"] {
        vocab.add(w);
    }
    let Ok(t) = parse_embeddings(rest, &vocab, dim, &mut seeded(1)) else { return false };
    assert_eq!(t.table.shape(), &[vocab.len(), dim]);
    assert!(t.table.is_finite());
    assert!(t.matched <= vocab.len());
    true
}

pub fn config_file(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let Ok(assignments) = parse_config_text(t, Path::new("/base"), "fuzz.cfg") else { return false };
    RunConfig::from_assignments(&assignments).is_ok_and(|cfg| cfg.validate().is_ok())
}

/// Arguments separated by NUL bytes.
pub fn overrides(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let args: Vec<String> = t.split('\0').map(str::to_string).collect();
    parse_overrides(&args, Path::new("/cwd")).is_ok_and(|a| RunConfig::from_assignments(&a).is_ok())
}

pub fn tensor_container(data: &[u8]) -> bool {
    let Ok(c) = codec::decode(data) else { return false };
    let again = codec::encode(&c);
    let back = codec::decode(&again).expect("re-encoded container decodes");
    assert_eq!(codec::encode(&back), again);
    true
}

pub fn checkpoint(data: &[u8]) -> bool {
    decode_checkpoint(data).is_ok_and(|ckpt| ckpt.into_trainer().is_ok())
}

pub fn featurized_cache(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let Ok(records) = decode_featurized(t) else { return false };
    let again = encode_featurized(&records);
    assert_eq!(decode_featurized(&again).expect("re-encoded cache decodes").len(), records.len());
    true
}

pub fn vocabularies(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let Ok(v) = decode_vocabularies(t) else { return false };
    let again = decode_vocabularies(&encode_vocabularies(&v)).expect("re-encoded vocabulary decodes");
    assert_eq!(again, v);
    true
}

pub fn predictions(data: &[u8]) -> bool {
    text(data).is_some_and(|t| parse_predictions(t).is_ok())
}

pub fn na_probs(data: &[u8]) -> bool {
    let Some(t) = text(data) else { return false };
    let Ok(p) = parse_na_probs(t) else { return false };
    assert!(p.values().all(|v| (0.0..=1.0).contains(v)));
    true
}

pub fn tag_lexicon(data: &[u8]) -> bool {
    text(data).is_some_and(|t| LexiconTagger::parse(t).is_ok())
}

/// The first byte picks the vector width; the rest is the file.
pub fn contextual(data: &[u8]) -> bool {
    let Some((&first, rest)) = data.split_first() else { return false };
    let Some(t) = text(rest) else { return false };
    let dim = 1 + (first % 4) as usize;
    let Ok(map) = parse_contextual(t, dim) else { return false };
    for v in map.values() {
        assert_eq!(v.question.rows(), dim);
        assert_eq!(v.passage.rows(), dim);
    }
    true
}
