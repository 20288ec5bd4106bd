use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A token and its character span `[start, end)` in the source text.
/// Offsets count Unicode scalar values, matching SQuAD's `answer_start`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Characters kept inside a word when flanked by alphanumerics on both sides
/// ("don't", "well-known", "3.5").
fn joins_word(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '-' | '.')
}

/// Whitespace tokenizer that splits punctuation into single-character tokens.
///
/// Concatenating the token texts with the original gaps reproduces `text`.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |tokens: &mut Vec<Token>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            tokens.push(Token {
                text: chars[s..end].iter().collect(),
                start: s,
                end,
            });
        }
    };
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            flush(&mut tokens, &mut word_start, i);
        } else if is_punct(c) {
            let inner = joins_word(c)
                && word_start.is_some()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if inner {
                continue;
            }
            flush(&mut tokens, &mut word_start, i);
            tokens.push(Token {
                text: c.to_string(),
                start: i,
                end: i + 1,
            });
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    flush(&mut tokens, &mut word_start, chars.len());
    tokens
}

/// Smallest token interval `[begin, end]` (inclusive) covering the character
/// range `[char_begin, char_end)`.
pub fn char_span_to_token_span(tokens: &[Token], char_begin: usize, char_end: usize) -> Result<(usize, usize)> {
    let overlapping = |t: &Token| t.end > char_begin && t.start < char_end && t.end > t.start;
    let begin = tokens.iter().position(overlapping);
    let end = tokens.iter().rposition(overlapping);
    match (begin, end) {
        (Some(b), Some(e)) if char_begin < char_end => Ok((b, e)),
        _ => Err(Error::Alignment(format!(
            "character range {char_begin}..{char_end} covers no token"
        ))),
    }
}

/// Substring by character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let from = indices.clone().nth(start).unwrap_or(text.len());
    let to = indices.nth(end).unwrap_or(text.len());
    &text[from..to.max(from)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn splits_trailing_punctuation_with_offsets() {
        let text = "Super Bowl 50.";
        let tokens = tokenize(text);
        assert_eq!(texts(&tokens), ["Super", "Bowl", "50", "."]);
        let spans: Vec<(usize, usize)> = tokens.iter().map(|t| (t.start, t.end)).collect();
        assert_eq!(spans, [(0, 5), (6, 10), (11, 13), (13, 14)]);
        for t in &tokens {
            assert_eq!(char_slice(text, t.start, t.end), t.text);
        }
    }

    #[test]
    fn empty_and_inner_punctuation() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   ").is_empty());
        assert_eq!(texts(&tokenize("a,b")), ["a", ",", "b"]);
        assert_eq!(texts(&tokenize("(don't)")), ["(", "don't", ")"]);
        assert_eq!(texts(&tokenize("3.5 well-known U.S.")), ["3.5", "well-known", "U.S", "."]);
    }

    #[test]
    fn offsets_count_characters_not_bytes() {
        let text = "Málaga é bela";
        let tokens = tokenize(text);
        assert_eq!(tokens[1].start, 7);
        assert_eq!(char_slice(text, tokens[2].start, tokens[2].end), "bela");
    }

    #[test]
    fn covering_spans() {
        let tokens = tokenize("Super Bowl 50 was");
        assert_eq!(char_span_to_token_span(&tokens, 6, 13).unwrap(), (1, 2));
        assert_eq!(char_span_to_token_span(&tokens, 0, 5).unwrap(), (0, 0));
        assert_eq!(char_span_to_token_span(&tokens, 6, 8).unwrap(), (1, 1));
        assert!(char_span_to_token_span(&tokens, 5, 6).is_err());
        assert!(char_span_to_token_span(&tokens, 8, 8).is_err());
    }
}
