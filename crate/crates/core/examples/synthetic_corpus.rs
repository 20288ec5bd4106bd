//! Writes the synthetic SQuAD-v2.0-format corpus used by the overfit and
//! variant-ordering checks.
//!
//! Every paragraph states three attributes of an invented place; each
//! paragraph carries one question about a stated attribute and one about an
//! attribute the paragraph never mentions.
//!
//! Usage: `cargo run --example synthetic_corpus -- OUT_DIR`

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const ATTRIBUTES: [&str; 6] = ["capital", "river", "mountain", "language", "currency", "founder"];
const ONSETS: [&str; 12] = ["v", "k", "t", "m", "r", "s", "d", "l", "n", "b", "z", "p"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "n", "r", "s", "l", "k"];

fn word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
        w.push_str(CODAS.choose(rng).unwrap());
    }
    let mut chars = w.chars();
    let first = chars.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(chars).collect()
}

fn value(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.3) {
        format!("{} {}", word(rng), word(rng))
    } else {
        word(rng)
    }
}

fn paragraph(rng: &mut ChaCha8Rng, index: usize, split: &str) -> Value {
    let place = word(rng);
    let mut attrs = ATTRIBUTES.to_vec();
    attrs.shuffle(rng);
    let (stated, absent) = attrs.split_at(3);
    let mut context = String::new();
    let mut answers = Vec::new();
    for attr in stated {
        let v = value(rng);
        if !context.is_empty() {
            context.push(' ');
        }
        let prefix = format!("The {attr} of {place} is ");
        let start = context.chars().count() + prefix.chars().count();
        context.push_str(&prefix);
        context.push_str(&v);
        context.push_str(" .");
        answers.push((attr.to_string(), v, start));
    }
    let (attr, text, start) = answers[rng.gen_range(0..answers.len())].clone();
    let missing = absent[rng.gen_range(0..absent.len())];
    json!({
        "context": context,
        "qas": [
            {
                "id": format!("{split}-{index:03}-a"),
                "question": format!("What is the {attr} of {place} ?"),
                "is_impossible": false,
                "answers": [{"text": text, "answer_start": start}]
            },
            {
                "id": format!("{split}-{index:03}-u"),
                "question": format!("What is the {missing} of {place} ?"),
                "is_impossible": true,
                "answers": []
            }
        ]
    })
}

fn corpus(seed: u64, paragraphs: usize, split: &str) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paras: Vec<Value> = (0..paragraphs).map(|i| paragraph(&mut rng, i, split)).collect();
    json!({"version": "v2.0", "data": [{"title": format!("synthetic-{split}"), "paragraphs": paras}]})
}

fn main() {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "data/synthetic".into()).into();
    std::fs::create_dir_all(&out).expect("create output directory");
    for (split, seed, count) in [("train", 11, 16), ("dev", 29, 16)] {
        let text = serde_json::to_string_pretty(&corpus(seed, count, split)).unwrap();
        std::fs::write(out.join(format!("{split}.json")), text + "\n").expect("write corpus");
    }
}
