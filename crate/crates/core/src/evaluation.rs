//! SQuAD v2.0 scoring: answer normalization, exact match, token F1 and
//! unanswerability accuracy.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::GoldQuestion;
use crate::error::{Error, Result};

/// ASCII punctuation, the set removed before comparison.
const PUNCTUATION: &str = r##"!"#$%&'()*+,-./:;<=>?@[\]^_`{|}~"##;

fn articles() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("article pattern"))
}

/// Lowercases, strips punctuation and articles, and collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !PUNCTUATION.contains(*c)).collect();
    let no_articles = articles().replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn answer_tokens(text: &str) -> Vec<String> {
    normalize_answer(text).split_whitespace().map(str::to_string).collect()
}

pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    f64::from(u8::from(normalize_answer(prediction) == normalize_answer(gold)))
}

/// Token-bag F1 with multiset intersection. If either side normalizes to no
/// tokens the score is 1 when both are empty and 0 otherwise.
pub fn f1_score(prediction: &str, gold: &str) -> f64 {
    let pred = answer_tokens(prediction);
    let gold = answer_tokens(gold);
    if pred.is_empty() || gold.is_empty() {
        return f64::from(u8::from(pred == gold));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut same = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return 0.0;
    }
    let precision = same as f64 / pred.len() as f64;
    let recall = same as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Gold strings a prediction is compared against: the answers that do not
/// normalize to nothing, or the single empty string when none remain.
pub fn comparison_golds(answers: &[String]) -> Vec<String> {
    let kept: Vec<String> = answers
        .iter()
        .filter(|a| !normalize_answer(a).is_empty())
        .cloned()
        .collect();
    if kept.is_empty() {
        vec![String::new()]
    } else {
        kept
    }
}

/// `(em, f1)` of one prediction: the maximum over the comparison golds.
pub fn score_question(prediction: &str, answers: &[String]) -> (f64, f64) {
    let golds = comparison_golds(answers);
    let em = golds.iter().map(|g| exact_match(prediction, g)).fold(0.0, f64::max);
    let f1 = golds.iter().map(|g| f1_score(prediction, g)).fold(0.0, f64::max);
    (em, f1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub id: String,
    pub em: f64,
    pub f1: f64,
    pub has_answer: bool,
    pub missing: bool,
    /// Whether the classifier called the question unanswerable, when
    /// probabilities were supplied.
    pub predicted_unanswerable: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub total: usize,
    pub em: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percentages over all questions.
    pub em: f64,
    pub f1: f64,
    pub classifier_accuracy: Option<f64>,
    pub total: usize,
    pub has_answer: Breakdown,
    pub no_answer: Breakdown,
    pub missing: usize,
    pub unknown_ids: Vec<String>,
    pub questions: Vec<QuestionScore>,
}

fn breakdown<'a>(scores: impl Iterator<Item = &'a QuestionScore>) -> Breakdown {
    let (mut total, mut em, mut f1) = (0usize, 0.0, 0.0);
    for s in scores {
        total += 1;
        em += s.em;
        f1 += s.f1;
    }
    if total == 0 {
        return Breakdown::default();
    }
    Breakdown {
        total,
        em: 100.0 * em / total as f64,
        f1: 100.0 * f1 / total as f64,
    }
}

/// Scores predictions against every gold question. Questions without a
/// prediction score zero and are counted in `missing`; predictions for
/// unknown ids are listed and ignored. Classifier accuracy is the share of
/// questions where `P_u > threshold` agrees with the gold label.
pub fn evaluate(
    golds: &[GoldQuestion],
    predictions: &BTreeMap<String, String>,
    na_probs: Option<&BTreeMap<String, f64>>,
    threshold: f64,
) -> EvalReport {
    let mut questions = Vec::with_capacity(golds.len());
    for gold in golds {
        let (em, f1, missing) = match predictions.get(&gold.id) {
            Some(pred) => {
                let (em, f1) = score_question(pred, &gold.answers);
                (em, f1, false)
            }
            None => (0.0, 0.0, true),
        };
        let predicted_unanswerable = na_probs.and_then(|p| p.get(&gold.id)).map(|&p| p > threshold);
        questions.push(QuestionScore {
            id: gold.id.clone(),
            em,
            f1,
            has_answer: !gold.is_unanswerable,
            missing,
            predicted_unanswerable,
        });
    }
    let known: std::collections::HashSet<&str> = golds.iter().map(|g| g.id.as_str()).collect();
    let unknown_ids = predictions
        .keys()
        .filter(|k| !known.contains(k.as_str()))
        .cloned()
        .collect();
    let all = breakdown(questions.iter());
    let classifier_accuracy = na_probs.map(|_| {
        let correct = questions
            .iter()
            .filter(|q| q.predicted_unanswerable == Some(!q.has_answer))
            .count();
        if questions.is_empty() {
            0.0
        } else {
            100.0 * correct as f64 / questions.len() as f64
        }
    });
    EvalReport {
        em: all.em,
        f1: all.f1,
        classifier_accuracy,
        total: all.total,
        has_answer: breakdown(questions.iter().filter(|q| q.has_answer)),
        no_answer: breakdown(questions.iter().filter(|q| !q.has_answer)),
        missing: questions.iter().filter(|q| q.missing).count(),
        unknown_ids,
        questions,
    }
}

/// Reads a predictions file: a JSON object mapping question id to answer
/// text, the empty string meaning "no answer".
pub fn parse_predictions(text: &str) -> Result<BTreeMap<String, String>> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::parse(format!("predictions {}", e.path()), e.inner()))
}

/// Reads a no-answer probability file: question id to a number in [0, 1].
pub fn parse_na_probs(text: &str) -> Result<BTreeMap<String, f64>> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let probs: BTreeMap<String, f64> =
        serde_path_to_error::deserialize(de).map_err(|e| Error::parse(format!("no-answer probabilities {}", e.path()), e.inner()))?;
    if let Some((id, p)) = probs.iter().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
        return Err(Error::parse(format!("no-answer probabilities .{id}"), format!("{p} is not a probability")));
    }
    Ok(probs)
}
