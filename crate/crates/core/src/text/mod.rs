//! Tokenization, vocabulary construction, fixed-length documents and
//! skip-gram word embeddings.

mod skipgram;

pub use skipgram::{
    nearest_neighbors, read_embedding_text, train_skipgram, write_embedding_text, EmbeddingMatrix,
    SkipGramConfig, SkipGramOutcome,
};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Documents are cut or padded to this many tokens.
pub const DEFAULT_MAX_LEN: usize = 140;

/// Lowercases and splits on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Tokens seen at least `min_count` times get ids from 2 upward in
    /// descending frequency, ties broken lexicographically.
    pub fn build(corpus: &[Vec<String>], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::usage("min_count must be at least 1"));
        }
        if corpus.iter().all(|doc| doc.is_empty()) {
            return Err(Error::usage("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for token in corpus.iter().flatten() {
            if token == PAD_TOKEN || token == UNK_TOKEN {
                continue;
            }
            *counts.entry(token.as_str()).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        id_to_token.extend(kept.iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_tokens(id_to_token))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 2
    }

    /// Id of an in-vocabulary token (reserved markers excluded).
    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// Tokenizes, encodes and pads/truncates `text` in one step.
    pub fn encode_document(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        pad_or_truncate(&self.encode(&tokenize(text)), max_len)
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, usize> = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(json)?;
        let mut id_to_token = vec![String::new(); map.len()];
        for (token, id) in map {
            let slot = id_to_token
                .get_mut(id)
                .ok_or_else(|| Error::Malformed(format!("vocabulary id {id} out of range")))?;
            *slot = token;
        }
        if id_to_token.len() < 2 || id_to_token[PAD_ID] != PAD_TOKEN || id_to_token[UNK_ID] != UNK_TOKEN
        {
            return Err(Error::Malformed("vocabulary lacks reserved ids".into()));
        }
        if id_to_token.iter().any(String::is_empty) {
            return Err(Error::Malformed("vocabulary ids are not contiguous".into()));
        }
        Ok(Self::from_tokens(id_to_token))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Token ids normalized to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Number of leading non-padding positions.
    pub true_length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// Keeps the first `max_len` ids and right-pads shorter input with PAD.
/// Trailing PAD ids in the input do not count towards `true_length`.
pub fn pad_or_truncate(ids: &[usize], max_len: usize) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::usage("max_len must be at least 1"));
    }
    let mut kept: Vec<usize> = ids.iter().copied().take(max_len).collect();
    while kept.last() == Some(&PAD_ID) {
        kept.pop();
    }
    let true_length = kept.len();
    kept.resize(max_len, PAD_ID);
    Ok(TokenSequence {
        ids: kept,
        true_length,
    })
}
