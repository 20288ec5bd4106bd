//! Pretrained word vectors in the whitespace-separated text format
//! (`token v1 ... vD`, one token per line).

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;

use super::vocab::{Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_RANGE: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    /// `vocab x dim`; row `PAD_ID` is zero.
    pub table: Tensor,
    pub matched: usize,
    pub duplicates: usize,
}

/// Table where every non-padding row is drawn from uniform(-0.05, 0.05).
pub fn random_embeddings<R: Rng + ?Sized>(vocab: &Vocabulary, dim: usize, rng: &mut R) -> Tensor {
    let mut data = vec![0.0; vocab.len() * dim];
    for (row, chunk) in data.chunks_mut(dim).enumerate() {
        for v in chunk.iter_mut() {
            let x: f64 = rng.gen_range(-INIT_RANGE..INIT_RANGE);
            if row != PAD_ID {
                *v = x;
            }
        }
    }
    Tensor::new(vec![vocab.len(), dim], data).expect("embedding shape")
}

/// Copies vectors of in-vocabulary tokens over a randomly initialized table.
/// The first occurrence of a duplicated token wins.
pub fn parse_embeddings<B: BufRead, R: Rng + ?Sized>(
    reader: B,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<EmbeddingTable> {
    let mut table = random_embeddings(vocab, dim, rng);
    let mut seen = HashSet::new();
    let mut duplicates = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Format {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or_default();
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(Error::Format {
                line: line_no,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let mut parsed = Vec::with_capacity(dim);
        for v in values {
            let x: f64 = v.parse().map_err(|_| Error::Format {
                line: line_no,
                message: format!("invalid number {v:?}"),
            })?;
            if !x.is_finite() {
                return Err(Error::Format {
                    line: line_no,
                    message: format!("non-finite value {v:?}"),
                });
            }
            parsed.push(x);
        }
        if !vocab.contains(token) {
            continue;
        }
        if !seen.insert(token.to_string()) {
            duplicates += 1;
            continue;
        }
        let id = vocab.id(token);
        if id == PAD_ID {
            continue;
        }
        table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&parsed);
    }
    Ok(EmbeddingTable {
        table,
        matched: seen.len(),
        duplicates,
    })
}

pub fn load_embeddings<R: Rng + ?Sized>(path: &Path, vocab: &Vocabulary, dim: usize, rng: &mut R) -> Result<EmbeddingTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(std::io::BufReader::new(file), vocab, dim, rng)
}
