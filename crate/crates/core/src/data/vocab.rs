use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NULL_ID: usize = 2;
const RESERVED: [&str; 3] = ["<PAD>", "<UNK>", "<NULL>"];

/// String-to-id map with fixed ids for padding, unknown and the NULL
/// sentinel. An optional capacity (counting the reserved entries) sends
/// overflow entries to the unknown id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    limit: Option<usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            limit: None,
        }
    }

    pub fn with_limit(limit: usize) -> Self {
        Vocabulary {
            limit: Some(limit.max(RESERVED.len())),
            ..Self::new()
        }
    }

    /// Inserts `token` if absent, returning its id (or the unknown id once the
    /// capacity is reached).
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        if self.limit.is_some_and(|l| self.tokens.len() >= l) {
            return UNK_ID;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn from_tokens(tokens: Vec<String>, limit: Option<usize>) -> Result<Self, String> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err("vocabulary does not start with the reserved entries".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary entry {t:?}"));
            }
        }
        Ok(Vocabulary { tokens, index, limit })
    }
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    limit: Option<usize>,
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        VocabRepr {
            tokens: self.tokens.clone(),
            limit: self.limit,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = VocabRepr::deserialize(d)?;
        Vocabulary::from_tokens(repr.tokens, repr.limit).map_err(serde::de::Error::custom)
    }
}

/// Word, part-of-speech and named-entity vocabularies of one corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub words: Vocabulary,
    pub pos: Vocabulary,
    pub ner: Vocabulary,
}

pub const POS_LIMIT: usize = 64;
pub const NER_LIMIT: usize = 32;

impl Default for Vocabularies {
    fn default() -> Self {
        Vocabularies {
            words: Vocabulary::new(),
            pos: Vocabulary::with_limit(POS_LIMIT),
            ner: Vocabulary::with_limit(NER_LIMIT),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_stable() {
        let mut v = Vocabulary::new();
        assert_eq!(v.id("<PAD>"), PAD_ID);
        assert_eq!(v.id("<UNK>"), UNK_ID);
        assert_eq!(v.id("<NULL>"), NULL_ID);
        assert_eq!(v.add("Broncos"), 3);
        assert_eq!(v.add("Broncos"), 3);
        assert_eq!(v.id("missing"), UNK_ID);

        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"{"tokens":["a"],"limit":null}"#).is_err());
    }

    #[test]
    fn capacity_sends_overflow_to_unknown() {
        let mut v = Vocabulary::with_limit(5);
        assert_eq!(v.add("NN"), 3);
        assert_eq!(v.add("VB"), 4);
        assert_eq!(v.add("JJ"), UNK_ID);
        assert_eq!(v.len(), 5);
    }
}
