//! Featurized corpus files: a JSON header line carrying the format version,
//! then one JSON record per example.

use serde::{Deserialize, Serialize};

use super::features::FeaturizedExample;
use super::squad::Example;
use super::vocab::Vocabularies;
use crate::error::{Error, Result};

pub const FEATURIZED_FORMAT: &str = "joint-san-featurized";
pub const VOCAB_FORMAT: &str = "joint-san-vocab";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub example: Example,
    pub features: FeaturizedExample,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    format_version: u32,
    count: usize,
}

pub fn encode_featurized(records: &[CorpusRecord]) -> String {
    let header = Header {
        format: FEATURIZED_FORMAT.into(),
        format_version: FORMAT_VERSION,
        count: records.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn decode_featurized(text: &str) -> Result<Vec<CorpusRecord>> {
    let mut lines = text.lines();
    let header: Header = lines
        .next()
        .ok_or_else(|| Error::parse("featurized cache", "empty file"))
        .and_then(|l| serde_json::from_str(l).map_err(|e| Error::parse("featurized cache header", e)))?;
    if header.format != FEATURIZED_FORMAT || header.format_version != FORMAT_VERSION {
        return Err(Error::parse(
            "featurized cache header",
            format!("unsupported format {} v{}", header.format, header.format_version),
        ));
    }
    let mut records = Vec::with_capacity(header.count.min(1 << 20));
    for (i, line) in lines.enumerate() {
        let record: CorpusRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            line: i + 2,
            message: e.to_string(),
        })?;
        validate(&record).map_err(|message| Error::Format { line: i + 2, message })?;
        records.push(record);
    }
    if records.len() != header.count {
        return Err(Error::parse(
            "featurized cache",
            format!("header announces {} records, found {}", header.count, records.len()),
        ));
    }
    Ok(records)
}

fn validate(r: &CorpusRecord) -> std::result::Result<(), String> {
    let f = &r.features;
    let ok = f.question_len >= 1
        && f.passage_len >= 1
        && f.question_ids.len() >= f.question_len
        && f.passage_ids.len() >= f.passage_len
        && f.pos_ids.len() == f.passage_ids.len()
        && f.ner_ids.len() == f.passage_ids.len()
        && f.match_features.len() == f.passage_ids.len()
        && f.span.0 <= f.span.1
        && f.span.1 < f.passage_len
        && r.example.passage_tokens.len() == f.passage_len
        && r.example.question_tokens.len() == f.question_len;
    if ok {
        Ok(())
    } else {
        Err(format!("inconsistent record {}", r.example.id))
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    format_version: u32,
    vocabularies: Vocabularies,
}

pub fn encode_vocabularies(v: &Vocabularies) -> String {
    serde_json::to_string(&VocabFile {
        format: VOCAB_FORMAT.into(),
        format_version: FORMAT_VERSION,
        vocabularies: v.clone(),
    })
    .expect("vocabularies serialize")
}

pub fn decode_vocabularies(text: &str) -> Result<Vocabularies> {
    let file: VocabFile = serde_json::from_str(text).map_err(|e| Error::parse("vocabulary file", e))?;
    if file.format != VOCAB_FORMAT || file.format_version != FORMAT_VERSION {
        return Err(Error::parse("vocabulary file", "unsupported format"));
    }
    Ok(file.vocabularies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extend_vocabularies, featurize, parse_dataset, DefaultTagger};

    #[test]
    fn featurized_round_trip_is_exact() {
        let json = serde_json::json!({"data": [{"paragraphs": [{"context": "a b c a, d e f", "qas": [
            {"id": "q1", "question": "a?", "is_impossible": false, "answers": [{"text": "c", "answer_start": 4}]},
            {"id": "q2", "question": "z?", "is_impossible": true, "answers": []}]}]}]});
        let parsed = parse_dataset(&json.to_string()).unwrap();
        let mut v = Vocabularies::default();
        extend_vocabularies(&mut v, &parsed.examples, &DefaultTagger);
        let records: Vec<CorpusRecord> = parsed
            .examples
            .iter()
            .map(|e| CorpusRecord {
                example: e.clone(),
                features: featurize(e, &v, &DefaultTagger),
            })
            .collect();
        let text = encode_featurized(&records);
        assert!(text.starts_with("{\"format\":\"joint-san-featurized\",\"format_version\":1"));
        let back = decode_featurized(&text).unwrap();
        assert_eq!(back, records);
        for (a, b) in back.iter().zip(&records) {
            for (x, y) in a.features.match_features.iter().zip(&b.features.match_features) {
                assert_eq!(x.map(f64::to_bits), y.map(f64::to_bits));
            }
        }
        assert_eq!(decode_vocabularies(&encode_vocabularies(&v)).unwrap(), v);

        let truncated: String = text.lines().take(2).collect::<Vec<_>>().join("\n");
        assert!(decode_featurized(&truncated).is_err());
    }
}
