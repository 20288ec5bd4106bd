//! SQuAD v2.0 ingestion.

use serde::{Deserialize, Serialize};

use super::tokenize::{char_slice, char_span_to_token_span, tokenize, Token};
use crate::error::{Error, Result};

/// Text of the sentinel appended to every passage. Unanswerable questions
/// point their span at it.
pub const NULL_TOKEN: &str = "<NULL>";

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<Article>,
}

#[derive(Deserialize)]
struct Article {
    paragraphs: Vec<Paragraph>,
}

#[derive(Deserialize)]
struct Paragraph {
    context: String,
    qas: Vec<Qa>,
}

#[derive(Deserialize)]
struct Qa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<Answer>,
    #[serde(default)]
    is_impossible: bool,
}

#[derive(Deserialize)]
struct Answer {
    text: String,
    answer_start: usize,
}

/// One question over one passage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub context: String,
    pub question: String,
    /// Passage tokens followed by the NULL sentinel.
    pub passage_tokens: Vec<Token>,
    pub question_tokens: Vec<Token>,
    /// Inclusive token spans of the aligned gold answers.
    pub gold_spans: Vec<(usize, usize)>,
    pub gold_answer_texts: Vec<String>,
    pub is_unanswerable: bool,
}

impl Example {
    /// Position of the NULL sentinel, i.e. the number of real passage tokens.
    pub fn null_index(&self) -> usize {
        self.passage_tokens.len() - 1
    }

    /// Span used as the training target: the first gold span, or the NULL
    /// position for unanswerable questions.
    pub fn training_span(&self) -> (usize, usize) {
        if self.is_unanswerable {
            let n = self.null_index();
            (n, n)
        } else {
            self.gold_spans[0]
        }
    }

    /// Original passage text covered by an inclusive token span; empty for the
    /// NULL span.
    pub fn span_text(&self, begin: usize, end: usize) -> String {
        let n = self.null_index();
        if begin >= n || end >= n || begin > end {
            return String::new();
        }
        let (start, stop) = (self.passage_tokens[begin].start, self.passage_tokens[end].end);
        char_slice(&self.context, start, stop).to_string()
    }
}

#[derive(Debug, Default)]
pub struct ParsedDataset {
    pub examples: Vec<Example>,
    /// Questions dropped because no gold answer lined up with the passage.
    pub skipped_alignments: usize,
    /// Questions dropped because the question has no tokens.
    pub skipped_empty: usize,
    pub warnings: Vec<String>,
}

impl ParsedDataset {
    pub fn unanswerable_fraction(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        let k = self.examples.iter().filter(|e| e.is_unanswerable).count();
        k as f64 / self.examples.len() as f64
    }
}

fn null_token(context_chars: usize) -> Token {
    Token {
        text: NULL_TOKEN.to_string(),
        start: context_chars,
        end: context_chars,
    }
}

/// Parses SQuAD v2.0 JSON into one [`Example`] per question.
pub fn parse_dataset(json_text: &str) -> Result<ParsedDataset> {
    let de = &mut serde_json::Deserializer::from_str(json_text);
    let file: SquadFile = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::parse(e.path().to_string(), e.inner()))?;

    let mut out = ParsedDataset::default();
    for article in file.data {
        for paragraph in article.paragraphs {
            let context_chars = paragraph.context.chars().count();
            let mut passage_tokens = tokenize(&paragraph.context);
            passage_tokens.push(null_token(context_chars));
            for qa in paragraph.qas {
                let question_tokens = tokenize(&qa.question);
                if question_tokens.is_empty() {
                    out.skipped_empty += 1;
                    out.warnings.push(format!("{}: empty question", qa.id));
                    continue;
                }
                let mut gold_spans = Vec::new();
                let mut texts = Vec::new();
                if !qa.is_impossible {
                    for answer in &qa.answers {
                        let len = answer.text.chars().count();
                        let start = answer.answer_start;
                        let at_offset = char_slice(&paragraph.context, start, start + len);
                        let real = &passage_tokens[..passage_tokens.len() - 1];
                        let span = if at_offset == answer.text && start + len <= context_chars {
                            char_span_to_token_span(real, start, start + len).ok()
                        } else {
                            None
                        };
                        match span {
                            Some(s) => gold_spans.push(s),
                            None => out.warnings.push(format!(
                                "{}: answer {:?} not found at offset {start}",
                                qa.id, answer.text
                            )),
                        }
                        texts.push(answer.text.clone());
                    }
                    if gold_spans.is_empty() {
                        out.skipped_alignments += 1;
                        continue;
                    }
                }
                out.examples.push(Example {
                    id: qa.id,
                    context: paragraph.context.clone(),
                    question: qa.question,
                    passage_tokens: passage_tokens.clone(),
                    question_tokens,
                    gold_spans,
                    gold_answer_texts: texts,
                    is_unanswerable: qa.is_impossible,
                });
            }
        }
    }
    Ok(out)
}

/// Reference answers of one question, read without tokenization or
/// alignment so that every question in the file is scored.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldQuestion {
    pub id: String,
    pub answers: Vec<String>,
    pub is_unanswerable: bool,
}

/// Reads the gold answers of every question in a SQuAD v2.0 file.
pub fn parse_gold(json_text: &str) -> Result<Vec<GoldQuestion>> {
    let de = &mut serde_json::Deserializer::from_str(json_text);
    let file: SquadFile = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::parse(e.path().to_string(), e.inner()))?;
    let mut out = Vec::new();
    for article in file.data {
        for paragraph in article.paragraphs {
            for qa in paragraph.qas {
                out.push(GoldQuestion {
                    id: qa.id,
                    is_unanswerable: qa.answers.is_empty(),
                    answers: qa.answers.into_iter().map(|a| a.text).collect(),
                });
            }
        }
    }
    Ok(out)
}
