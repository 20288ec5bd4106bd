//! Shared lower layers: lexicon encoding, contextual encoding and memory
//! generation.

use rand::Rng;

use crate::data::FeaturizedExample;
use crate::model::{ModelConfig, Mode};
use crate::params::{Bound, ParamId, ParamSet};
use crate::recurrent::BiLstmParams;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

pub const HAND_FEATURES: usize = 4;

/// Position-wise two-layer feed-forward network `W2 relu(W1 x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Ffn {
    fn new<R: Rng + ?Sized>(params: &mut ParamSet, prefix: &str, input: usize, out: usize, rng: &mut R) -> Self {
        let b_in = 1.0 / (input as f64).sqrt();
        let b_out = 1.0 / (out as f64).sqrt();
        Ffn {
            w1: params.add_uniform(&format!("{prefix}.w1"), &[out, input], b_in, rng),
            b1: params.add(format!("{prefix}.b1"), Tensor::zeros(&[out, 1]), true),
            w2: params.add_uniform(&format!("{prefix}.w2"), &[out, out], b_out, rng),
            b2: params.add(format!("{prefix}.b2"), Tensor::zeros(&[out, 1]), true),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: Bound, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (p.var(g, self.w1), p.var(g, self.b1), p.var(g, self.w2), p.var(g, self.b2));
        let h = g.matmul(w1, x)?;
        let h = g.add_column(h, b1)?;
        let h = g.relu(h)?;
        let o = g.matmul(w2, h)?;
        g.add_column(o, b2)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub word_embedding: ParamId,
    pub pos_embedding: ParamId,
    pub ner_embedding: ParamId,
    pub align: ParamId,
    pub question_ffn: Ffn,
    pub passage_ffn: Ffn,
    pub layer1: BiLstmParams,
    pub layer2: BiLstmParams,
    pub question_proj: ParamId,
    pub passage_proj: ParamId,
    pub self_proj: ParamId,
    pub memory_lstm: BiLstmParams,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, cfg: &ModelConfig, embeddings: Tensor, rng: &mut R) -> Self {
        let d = cfg.hidden_size;
        let dw = cfg.embedding_dim;
        let ctx = cfg.contextual_dim.unwrap_or(0);
        let word_embedding = params.add("encoder.word_embedding", embeddings, cfg.tune_embeddings);
        let pos_embedding = params.add_uniform(
            "encoder.pos_embedding",
            &[cfg.pos_vocab_size, cfg.pos_dim],
            1.0 / (cfg.pos_dim as f64).sqrt(),
            rng,
        );
        let ner_embedding = params.add_uniform(
            "encoder.ner_embedding",
            &[cfg.ner_vocab_size, cfg.ner_dim],
            1.0 / (cfg.ner_dim as f64).sqrt(),
            rng,
        );
        let align = params.add_uniform("encoder.align", &[dw, dw], 1.0 / (dw as f64).sqrt(), rng);
        let passage_in = 2 * dw + cfg.pos_dim + cfg.ner_dim + HAND_FEATURES;
        let question_ffn = Ffn::new(params, "encoder.question_ffn", dw, d, rng);
        let passage_ffn = Ffn::new(params, "encoder.passage_ffn", passage_in, d, rng);
        let layer1 = BiLstmParams::new(params, "encoder.contextual1", d + ctx, d, rng);
        let layer2 = BiLstmParams::new(params, "encoder.contextual2", 2 * d + ctx, d, rng);
        let b4 = 1.0 / ((4 * d) as f64).sqrt();
        let question_proj = params.add_uniform("encoder.memory.question_proj", &[d, 4 * d], b4, rng);
        let passage_proj = params.add_uniform("encoder.memory.passage_proj", &[d, 4 * d], b4, rng);
        let self_proj = params.add_uniform(
            "encoder.memory.self_proj",
            &[d, 8 * d],
            1.0 / ((8 * d) as f64).sqrt(),
            rng,
        );
        let memory_lstm = BiLstmParams::new(params, "encoder.memory.lstm", 16 * d, d, rng);
        EncoderParams {
            word_embedding,
            pos_embedding,
            ner_embedding,
            align,
            question_ffn,
            passage_ffn,
            layer1,
            layer2,
            question_proj,
            passage_proj,
            self_proj,
            memory_lstm,
        }
    }
}

/// Keep-mask for a `rows x cols` score matrix restricted to the true lengths.
pub fn length_mask(rows: usize, cols: usize, row_len: usize, col_len: usize) -> Vec<bool> {
    (0..rows * cols).map(|k| k / cols < row_len && k % cols < col_len).collect()
}

/// Soft alignment of passage words to question words.
///
/// Returns the aligned question embedding per passage column (`dw x n`) and
/// the attention matrix (`n x m`, rows over question tokens).
pub fn align_question(
    g: &mut Graph,
    passage_emb: Var,
    question_emb: Var,
    proj: Var,
    question_len: usize,
    passage_len: usize,
) -> Result<(Var, Var)> {
    let pq = g.matmul(proj, question_emb)?;
    let pq = g.relu(pq)?;
    let pp = g.matmul(proj, passage_emb)?;
    let pp = g.relu(pp)?;
    let ppt = g.transpose(pp)?;
    let scores = g.matmul(ppt, pq)?;
    let (n, m) = (g.shape(scores)[0], g.shape(scores)[1]);
    let attention = g.masked_softmax_rows(scores, &length_mask(n, m, passage_len, question_len))?;
    let att_t = g.transpose(attention)?;
    let aligned = g.matmul(question_emb, att_t)?;
    Ok((aligned, attention))
}

pub struct LexiconOutput {
    pub question: Var,
    pub passage: Var,
    pub align_attention: Var,
}

pub fn lexicon_encode(
    g: &mut Graph,
    p: Bound,
    enc: &EncoderParams,
    fe: &FeaturizedExample,
    mode: &mut Mode,
) -> Result<LexiconOutput> {
    let q_words = p.lookup(g, enc.word_embedding, &fe.question_ids)?;
    let p_words = p.lookup(g, enc.word_embedding, &fe.passage_ids)?;
    let pos = p.lookup(g, enc.pos_embedding, &fe.pos_ids)?;
    let ner = p.lookup(g, enc.ner_embedding, &fe.ner_ids)?;
    let n = fe.passage_ids.len();
    let mut hand = Tensor::zeros(&[HAND_FEATURES, n]);
    for (col, feats) in fe.match_features.iter().enumerate() {
        for (row, &v) in feats.iter().enumerate() {
            hand.set(row, col, v);
        }
    }
    let hand = g.constant(hand);
    let proj = p.var(g, enc.align);
    let (aligned, align_attention) = align_question(g, p_words, q_words, proj, fe.question_len, fe.passage_len)?;

    let passage_in = g.concat(&[p_words, pos, ner, hand, aligned], 0)?;
    let passage = enc.passage_ffn.apply(g, p, passage_in)?;
    let question = enc.question_ffn.apply(g, p, q_words)?;
    let passage = mode.dropout(g, passage)?;
    let question = mode.dropout(g, question)?;
    Ok(LexiconOutput {
        question,
        passage,
        align_attention,
    })
}

/// Pads `dim x len` contextual vectors with zero columns up to `cols`.
fn pad_columns(g: &mut Graph, t: &Tensor, cols: usize) -> Result<Var> {
    let v = g.constant(t.clone());
    if t.cols() == cols {
        return Ok(v);
    }
    let pad = g.constant(Tensor::zeros(&[t.rows(), cols - t.cols()]));
    g.concat(&[v, pad], 1)
}

/// Contextual vectors aligned to the (padded) question and passage columns.
pub struct ContextualInput<'a> {
    pub question: &'a Tensor,
    /// One column per real passage token; the NULL column is zero.
    pub passage: &'a Tensor,
}

fn encode_side(
    g: &mut Graph,
    p: Bound,
    enc: &EncoderParams,
    lexicon: Var,
    extra: Option<Var>,
    len: usize,
    mode: &mut Mode,
) -> Result<Var> {
    let in1 = match extra {
        Some(c) => g.concat(&[lexicon, c], 0)?,
        None => lexicon,
    };
    let h1 = enc.layer1.encode(g, p, in1, len)?;
    let h1_dropped = mode.dropout(g, h1)?;
    let in2 = match extra {
        Some(c) => g.concat(&[h1_dropped, c], 0)?,
        None => h1_dropped,
    };
    let h2 = enc.layer2.encode(g, p, in2, len)?;
    g.concat(&[h1, h2], 0)
}

/// Two shared BiLSTM layers; returns `(H_q, H_p)`, each with `4d` rows.
#[allow(clippy::too_many_arguments)]
pub fn contextual_encode(
    g: &mut Graph,
    p: Bound,
    enc: &EncoderParams,
    lexicon: &LexiconOutput,
    contextual: Option<ContextualInput>,
    fe: &FeaturizedExample,
    expected_dim: Option<usize>,
    mode: &mut Mode,
) -> Result<(Var, Var)> {
    let (m_cols, n_cols) = (g.shape(lexicon.question)[1], g.shape(lexicon.passage)[1]);
    let extra = match (expected_dim, contextual) {
        (None, None) => None,
        (Some(dim), Some(c)) => {
            let q_ok = c.question.shape() == [dim, fe.question_len];
            let p_ok = c.passage.shape() == [dim, fe.passage_len - 1];
            if !q_ok || !p_ok {
                return Err(TensorError::Shape {
                    op: "contextual vectors",
                    lhs: vec![dim, fe.question_len, fe.passage_len - 1],
                    rhs: [c.question.shape(), c.passage.shape()].concat(),
                });
            }
            Some((pad_columns(g, c.question, m_cols)?, pad_columns(g, c.passage, n_cols)?))
        }
        (Some(dim), None) => {
            return Err(TensorError::Usage(format!(
                "model expects {dim}-dimensional contextual vectors for {}",
                fe.id
            )))
        }
        (None, Some(_)) => {
            return Err(TensorError::Usage(
                "contextual vectors supplied to a model built without them".into(),
            ))
        }
    };
    let h_q = encode_side(g, p, enc, lexicon.question, extra.map(|e| e.0), fe.question_len, mode)?;
    let h_p = encode_side(g, p, enc, lexicon.passage, extra.map(|e| e.1), fe.passage_len, mode)?;
    Ok((h_q, h_p))
}

pub struct MemoryOutput {
    /// Question-over-passage attention before dropout, `m x n`; each true
    /// passage column sums to one over the true question rows.
    pub question_attention: Var,
    /// Passage self-attention, `n x n`, row `i` is the distribution of query
    /// `i` over keys. The diagonal is always zero.
    pub self_attention: Var,
    pub fused: Var,
    pub memory: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn build_memory(
    g: &mut Graph,
    p: Bound,
    enc: &EncoderParams,
    h_q: Var,
    h_p: Var,
    question_len: usize,
    passage_len: usize,
    mode: &mut Mode,
) -> Result<MemoryOutput> {
    let d = g.shape(h_q)[0] / 4;
    let scale = 1.0 / (d as f64).sqrt();
    let (wq, wp, ws) = (p.var(g, enc.question_proj), p.var(g, enc.passage_proj), p.var(g, enc.self_proj));

    let hq_hat = g.matmul(wq, h_q)?;
    let hq_hat = g.relu(hq_hat)?;
    let hp_hat = g.matmul(wp, h_p)?;
    let hp_hat = g.relu(hp_hat)?;
    let hp_t = g.transpose(hp_hat)?;
    let scores = g.matmul(hp_t, hq_hat)?;
    let scores = g.scale(scores, scale)?;
    let (n, m) = (g.shape(scores)[0], g.shape(scores)[1]);
    let per_passage = g.masked_softmax_rows(scores, &length_mask(n, m, passage_len, question_len))?;
    let question_attention = g.transpose(per_passage)?;
    let c = mode.dropout(g, question_attention)?;

    let attended = g.matmul(h_q, c)?;
    let fused = g.concat(&[h_p, attended], 0)?;

    let z = g.matmul(ws, fused)?;
    let z = g.relu(z)?;
    let zt = g.transpose(z)?;
    let self_scores = g.matmul(zt, z)?;
    let self_scores = g.scale(self_scores, scale)?;
    let mut keep = length_mask(n, n, passage_len, passage_len);
    for i in 0..n {
        keep[i * n + i] = false;
    }
    let self_attention = g.masked_softmax_rows(self_scores, &keep)?;
    let self_t = g.transpose(self_attention)?;
    let self_attended = g.matmul(fused, self_t)?;

    let memory_in = g.concat(&[fused, self_attended], 0)?;
    let memory = enc.memory_lstm.encode(g, p, memory_in, passage_len)?;
    Ok(MemoryOutput {
        question_attention,
        self_attention,
        fused,
        memory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, SanModel};
    use crate::rng::seeded;

    fn cfg(d: usize) -> ModelConfig {
        ModelConfig {
            word_vocab_size: 10,
            embedding_dim: 3,
            pos_vocab_size: 3,
            ner_vocab_size: 3,
            pos_dim: 2,
            ner_dim: 2,
            hidden_size: d,
            contextual_dim: None,
            steps: 2,
            max_span_len: 15,
            tune_embeddings: false,
        }
    }

    fn model(d: usize) -> SanModel {
        let mut rng = seeded(4);
        let table = Tensor::new(vec![10, 3], (0..30).map(|k| ((k * 7 % 11) as f64 - 5.0) / 10.0).collect()).unwrap();
        SanModel::new(cfg(d), table, &mut rng).unwrap()
    }

    fn features(m: usize, n: usize) -> FeaturizedExample {
        let mut passage_ids: Vec<usize> = (0..n - 1).map(|k| 3 + k % 7).collect();
        passage_ids.push(crate::data::NULL_ID);
        FeaturizedExample {
            id: "e".into(),
            question_ids: (0..m).map(|k| 3 + (k * 3) % 7).collect(),
            passage_ids,
            pos_ids: vec![1; n],
            ner_ids: vec![2; n],
            match_features: vec![[1.0, 0.0, 0.0, 0.5]; n],
            question_len: m,
            passage_len: n,
            span: (n - 1, n - 1),
            is_unanswerable: true,
        }
    }

    #[test]
    fn alignment_closed_form() {
        let mut g = Graph::new();
        let passage = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let question = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]));
        let proj = g.constant(Tensor::identity(2));
        let (aligned, att) = align_question(&mut g, passage, question, proj, 2, 2).unwrap();
        let e = std::f64::consts::E;
        let a = g.value(att);
        let want = [[e / (e + 1.0), 1.0 / (e + 1.0)], [1.0 / (1.0 + e * e), e * e / (1.0 + e * e)]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.get(i, j) - want[i][j]).abs() < 1e-15);
            }
        }
        // Column i of the aligned matrix is sum_j att[i][j] * q_j.
        let al = g.value(aligned);
        assert!((al.get(0, 0) - want[0][0]).abs() < 1e-15);
        assert!((al.get(1, 1) - 2.0 * want[1][1]).abs() < 1e-15);
    }

    #[test]
    fn alignment_ignores_padded_question_columns() {
        let mut g = Graph::new();
        let passage = g.constant(Tensor::from_rows(&[&[1.0, 0.5, 0.0]]));
        let question = g.constant(Tensor::from_rows(&[&[1.0, 3.0]]));
        let proj = g.constant(Tensor::identity(1));
        let (_, att) = align_question(&mut g, passage, question, proj, 1, 2).unwrap();
        let a = g.value(att);
        assert_eq!(a.row(0), &[1.0, 0.0]);
        assert_eq!(a.row(1), &[1.0, 0.0]);
        assert_eq!(a.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn zero_ffn_outputs_zero() {
        let m = model(3);
        let mut params = m.params.clone();
        let ffn = &m.encoder.question_ffn;
        for id in [ffn.w1, ffn.b1, ffn.w2, ffn.b2] {
            params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let binding = params.bind(&mut g);
        let x = g.constant(Tensor::filled(&[3, 4], 0.7));
        let y = ffn.apply(&mut g, Bound::new(&params, &binding), x).unwrap();
        assert_eq!(g.value(y), &Tensor::zeros(&[3, 4]));
    }

    #[test]
    fn memory_shapes() {
        let d = 3;
        let m = model(d);
        let fe = features(4, 6).padded(5, 8);
        let mut g = Graph::new();
        let binding = m.params.bind(&mut g);
        let f = m.forward(&mut g, Bound::new(&m.params, &binding), &fe, None, &mut Mode::eval()).unwrap();
        let t = &f.trace;
        assert_eq!(g.shape(t.align_attention), &[8, 5]);
        assert_eq!(g.shape(t.question_attention), &[5, 8]);
        assert_eq!(g.shape(t.self_attention), &[8, 8]);
        assert_eq!(g.shape(t.memory), &[2 * d, 8]);
        assert_eq!(g.shape(f.p_begin), &[1, 8]);
        // Padding columns of the memory are exactly zero.
        let mem = g.value(t.memory);
        assert!((0..2 * d).all(|r| mem.get(r, 6) == 0.0 && mem.get(r, 7) == 0.0));
    }

    #[test]
    fn passage_of_only_the_sentinel() {
        let m = model(2);
        let fe = features(2, 1);
        let mut g = Graph::new();
        let binding = m.params.bind(&mut g);
        let f = m.forward(&mut g, Bound::new(&m.params, &binding), &fe, None, &mut Mode::eval()).unwrap();
        assert_eq!(g.value(f.trace.self_attention).data(), &[0.0]);
        assert!(g.value(f.trace.memory).is_finite());
        assert_eq!(g.value(f.p_begin).data(), &[1.0]);
        assert_eq!(g.value(f.p_end).data(), &[1.0]);
    }
}
