//! Posts, datasets, tokenization, vocabularies, word vectors, and synthetic corpora.

mod embeddings;
pub mod synth;
mod tokenize;
mod vocab;

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use embeddings::{hashed_vector, EmbeddingTable, EMBED_DIM, OOV_BOUND};
pub use synth::{gen_synthetic, SynthConfig, SynthCorpus};
pub use tokenize::{tokenize, NUM_TOKEN, URL_TOKEN, USER_TOKEN};
pub use vocab::{Vocab, DEFAULT_MAX_SIZE, DEFAULT_MIN_COUNT, PAD, PAD_ID, UNK, UNK_ID};

/// Users keep at most this many history posts.
pub const MAX_HISTORY: usize = 400;

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate post id {0}")]
    DuplicateId(String),
    #[error("post {0} has no label")]
    MissingLabel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary label: 0 = non-hate, 1 = hate.
pub type Label = u8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Post {
    pub id: String,
    pub user_id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub label: Option<Label>,
}

impl Post {
    pub fn new(
        id: impl Into<String>,
        user_id: impl Into<String>,
        text: impl Into<String>,
        label: Option<Label>,
    ) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { id: id.into(), user_id: user_id.into(), text, tokens, label }
    }
}

/// On-disk JSON Lines record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PostRecord {
    pub id: String,
    pub user: String,
    pub text: String,
    pub label: Option<Label>,
}

impl From<&Post> for PostRecord {
    fn from(p: &Post) -> Self {
        Self { id: p.id.clone(), user: p.user_id.clone(), text: p.text.clone(), label: p.label }
    }
}

impl From<PostRecord> for Post {
    fn from(r: PostRecord) -> Self {
        Post::new(r.id, r.user, r.text, r.label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled posts of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub posts: Vec<Post>,
    pub split: Split,
}

impl Dataset {
    pub fn new(posts: Vec<Post>, split: Split) -> Result<Self, TextError> {
        let mut seen = HashSet::new();
        for p in &posts {
            if p.label.is_none() {
                return Err(TextError::MissingLabel(p.id.clone()));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(TextError::DuplicateId(p.id.clone()));
            }
        }
        Ok(Self { posts, split })
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.posts.iter().map(|p| p.label.unwrap_or(0)).collect()
    }

    /// Fraction of posts labeled hate.
    pub fn positive_rate(&self) -> f64 {
        if self.posts.is_empty() {
            return 0.0;
        }
        self.labels().iter().filter(|l| **l == 1).count() as f64 / self.posts.len() as f64
    }
}

/// Unlabeled history of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct HistorySet {
    pub user_id: String,
    pub posts: Vec<Post>,
}

/// Histories indexed by user.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Histories {
    by_user: BTreeMap<String, Vec<Post>>,
}

impl Histories {
    pub fn from_posts(posts: impl IntoIterator<Item = Post>) -> Self {
        let mut by_user: BTreeMap<String, Vec<Post>> = BTreeMap::new();
        for p in posts {
            by_user.entry(p.user_id.clone()).or_default().push(p);
        }
        Self { by_user }
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.by_user.keys().map(String::as_str)
    }

    pub fn all_posts(&self) -> impl Iterator<Item = &Post> {
        self.by_user.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_user.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_user.is_empty()
    }

    /// `Z_t`: the author's history without the target itself, capped at `max` posts.
    /// Posts without tokens are skipped.
    pub fn for_target(&self, target: &Post, max: usize) -> HistorySet {
        let posts = self
            .by_user
            .get(&target.user_id)
            .map(|ps| ps.iter().filter(|p| p.id != target.id && !p.tokens.is_empty()).take(max).cloned().collect())
            .unwrap_or_default();
        HistorySet { user_id: target.user_id.clone(), posts }
    }
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Post>, TextError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PostRecord =
            serde_json::from_str(&line).map_err(|e| TextError::Malformed { line: i + 1, reason: e.to_string() })?;
        out.push(rec.into());
    }
    Ok(out)
}

pub fn load_posts(path: &Path) -> Result<Vec<Post>, TextError> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file))
}

pub fn write_jsonl<W: Write>(mut w: W, posts: &[Post]) -> Result<(), TextError> {
    for p in posts {
        let line = serde_json::to_string(&PostRecord::from(p)).map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_posts(path: &Path, posts: &[Post]) -> Result<(), TextError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_jsonl(&mut w, posts)?;
    w.flush()?;
    Ok(())
}

/// Maps a raw annotation to the binary label; racism and sexism both count as hate.
pub fn parse_label(raw: &str) -> Option<Label> {
    match raw.trim().to_lowercase().as_str() {
        "racism" | "sexism" | "hate" | "1" => Some(1),
        "none" | "neither" | "non-hate" | "0" => Some(0),
        _ => None,
    }
}
