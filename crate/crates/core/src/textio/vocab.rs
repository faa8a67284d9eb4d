use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Post, TextError};

pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const UNK_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const DEFAULT_MIN_COUNT: usize = 2;
pub const DEFAULT_MAX_SIZE: usize = 50_000;

/// Token ↔ index mapping. Index 0 is `<unk>`, index 1 is `<pad>`; the rest follow
/// descending corpus frequency with ties broken by token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Vocab::from_tokens(f.tokens)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocab {
    /// Builds from an ordered token list whose first two entries are `<unk>`, `<pad>`.
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn build(corpus: &[Post], min_count: usize) -> Result<Self, TextError> {
        Self::build_capped(corpus.iter().map(|p| p.tokens.as_slice()), min_count, DEFAULT_MAX_SIZE)
    }

    pub fn build_capped<'a>(
        docs: impl IntoIterator<Item = &'a [String]>,
        min_count: usize,
        max_size: usize,
    ) -> Result<Self, TextError> {
        if min_count == 0 {
            return Err(TextError::InvalidConfig("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for doc in docs {
            any = true;
            for t in doc {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        if !any {
            return Err(TextError::EmptyCorpus);
        }
        let mut kept: Vec<(&str, usize)> =
            counts.into_iter().filter(|(t, c)| *c >= min_count && *t != UNK && *t != PAD).collect();
        kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        kept.truncate(max_size);
        let mut tokens = vec![UNK.to_string(), PAD.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
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

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}
