//! Optional precomputed contextual word vectors, one JSON object per line:
//! `{"id": ..., "question": [[...], ...], "passage": [[...], ...]}` with one
//! row per token (the passage rows exclude the NULL sentinel).

use std::collections::HashMap;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Column-per-token matrices (`dim x tokens`).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualVectors {
    pub question: Tensor,
    pub passage: Tensor,
}

#[derive(Deserialize)]
struct Record {
    id: String,
    question: Vec<Vec<f64>>,
    passage: Vec<Vec<f64>>,
}

fn to_columns(rows: &[Vec<f64>], dim: usize, line: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::Format {
            line,
            message: "empty vector list".into(),
        });
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Format {
            line,
            message: format!("expected {dim}-dimensional rows, found {}", bad.len()),
        });
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::new(vec![rows.len(), dim], flat)?.transpose())
}

pub fn parse_contextual(text: &str, dim: usize) -> Result<HashMap<String, ContextualVectors>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        let vectors = ContextualVectors {
            question: to_columns(&record.question, dim, i + 1)?,
            passage: to_columns(&record.passage, dim, i + 1)?,
        };
        out.insert(record.id, vectors);
    }
    Ok(out)
}
