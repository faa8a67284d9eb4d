//! MinHash LSH retrieval of the most similar pool posts by other authors.
//!
//! Candidates come from banded signature collisions and are re-ranked by exact Jaccard
//! similarity over unigram and bigram shingles. When the buckets yield fewer than `n`
//! candidates the set is topped up with a seeded uniform sample of the remaining
//! eligible posts and flagged as padded.

mod minhash;

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hashing::{derive_seed, mix64};
use crate::textio::{Post, PostRecord};

pub use minhash::{agreement, jaccard, minhash_signature, shingles, MinHasher};

pub const DEFAULT_K: usize = 128;
pub const DEFAULT_BANDS: usize = 16;
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LshError {
    #[error("cannot sign an empty shingle set")]
    EmptyShingles,
    #[error("duplicate post id {0}")]
    DuplicateId(String),
    #[error("pool has {available} eligible posts, {needed} requested")]
    InsufficientPool { needed: usize, available: usize },
    #[error("pool is empty")]
    EmptyPool,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LshConfig {
    /// Signature length.
    pub k: usize,
    pub bands: usize,
}

impl Default for LshConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K, bands: DEFAULT_BANDS }
    }
}

impl LshConfig {
    pub fn rows(&self) -> usize {
        self.k / self.bands
    }

    pub fn validate(&self) -> Result<(), LshError> {
        if self.k == 0 || self.bands == 0 || !self.k.is_multiple_of(self.bands) {
            return Err(LshError::InvalidConfig(format!("{} bands do not divide k = {}", self.bands, self.k)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Position in the index's post store.
    pub index: usize,
    pub id: String,
    pub similarity: f64,
}

/// `X_t`: exactly `n` pool posts by other authors, most similar first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub target_id: String,
    pub neighbors: Vec<Neighbor>,
    /// Some entries were sampled because LSH returned fewer than `n` candidates.
    pub padded: bool,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.neighbors.iter().map(|n| n.id.as_str()).collect()
    }
}

fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone)]
pub struct LshIndex {
    config: LshConfig,
    seed: u64,
    hasher: MinHasher,
    posts: Vec<Post>,
    signatures: Vec<Vec<u64>>,
    /// Sorted interned shingle ids per post.
    shingle_sets: Vec<Vec<u32>>,
    interner: HashMap<String, u32>,
    tables: Vec<HashMap<u64, Vec<u32>>>,
    user_counts: HashMap<String, usize>,
    positions: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    seed: u64,
    config: LshConfig,
    posts: Vec<PostRecord>,
    signatures: Vec<Vec<u64>>,
}

impl LshIndex {
    /// Indexes every pool post with at least one token; empty posts are skipped.
    pub fn build(pool: &[Post], config: LshConfig, seed: u64) -> Result<Self, LshError> {
        config.validate()?;
        let posts: Vec<Post> = pool.iter().filter(|p| !p.tokens.is_empty()).cloned().collect();
        if posts.is_empty() {
            return Err(LshError::EmptyPool);
        }
        let hasher = MinHasher::new(config.k, seed);
        let signatures = posts
            .par_iter()
            .map(|p| hasher.signature(shingles(&p.tokens).iter().map(String::as_str)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::assemble(posts, signatures, config, seed, hasher)
    }

    fn assemble(
        posts: Vec<Post>,
        signatures: Vec<Vec<u64>>,
        config: LshConfig,
        seed: u64,
        hasher: MinHasher,
    ) -> Result<Self, LshError> {
        let mut positions = HashMap::with_capacity(posts.len());
        let mut user_counts: HashMap<String, usize> = HashMap::new();
        let mut interner: HashMap<String, u32> = HashMap::new();
        let mut shingle_sets = Vec::with_capacity(posts.len());
        for (i, p) in posts.iter().enumerate() {
            if positions.insert(p.id.clone(), i).is_some() {
                return Err(LshError::DuplicateId(p.id.clone()));
            }
            *user_counts.entry(p.user_id.clone()).or_default() += 1;
            let mut ids: Vec<u32> = shingles(&p.tokens)
                .into_iter()
                .map(|s| {
                    let next = interner.len() as u32;
                    *interner.entry(s).or_insert(next)
                })
                .collect();
            ids.sort_unstable();
            shingle_sets.push(ids);
        }
        let mut tables: Vec<HashMap<u64, Vec<u32>>> = vec![HashMap::new(); config.bands];
        for (i, sig) in signatures.iter().enumerate() {
            for (band, table) in tables.iter_mut().enumerate() {
                table.entry(band_key(sig, band, config.rows())).or_default().push(i as u32);
            }
        }
        Ok(Self { config, seed, hasher, posts, signatures, shingle_sets, interner, tables, user_counts, positions })
    }

    pub fn config(&self) -> LshConfig {
        self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn posts(&self) -> &[Post] {
        &self.posts
    }

    pub fn post(&self, index: usize) -> &Post {
        &self.posts[index]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn signature(&self, index: usize) -> &[u64] {
        &self.signatures[index]
    }

    /// Number of buckets, over all bands, that contain post `index`.
    pub fn bucket_count(&self, index: usize) -> usize {
        self.tables.iter().flat_map(|t| t.values()).filter(|b| b.contains(&(index as u32))).count()
    }

    /// Bucket contents per band, sorted by key, for structural comparison.
    pub fn bucket_structure(&self) -> Vec<Vec<(u64, Vec<u32>)>> {
        self.tables
            .iter()
            .map(|t| {
                let mut v: Vec<(u64, Vec<u32>)> = t.iter().map(|(k, b)| (*k, b.clone())).collect();
                v.sort();
                v
            })
            .collect()
    }

    fn eligible_count(&self, target: &Post) -> usize {
        let own = self.user_counts.get(&target.user_id).copied().unwrap_or(0);
        let self_elsewhere = self.position(&target.id).is_some_and(|i| self.posts[i].user_id != target.user_id);
        self.posts.len() - own - usize::from(self_elsewhere)
    }

    fn eligible(&self, target: &Post, i: usize) -> bool {
        let p = &self.posts[i];
        p.user_id != target.user_id && p.id != target.id
    }

    /// The `n` nearest other-author posts to `target`.
    pub fn query(&self, target: &Post, n: usize) -> Result<NeighborSet, LshError> {
        if n == 0 {
            return Err(LshError::InvalidConfig("n must be at least 1".into()));
        }
        let available = self.eligible_count(target);
        if available < n {
            return Err(LshError::InsufficientPool { needed: n, available });
        }
        let target_shingles = shingles(&target.tokens);
        let mut known: Vec<u32> = target_shingles.iter().filter_map(|s| self.interner.get(s).copied()).collect();
        known.sort_unstable();
        let target_size = target_shingles.len();

        let mut seen = HashSet::new();
        let mut neighbors = Vec::new();
        if let Ok(sig) = self.hasher.signature(target_shingles.iter().map(String::as_str)) {
            for (band, table) in self.tables.iter().enumerate() {
                let Some(bucket) = table.get(&band_key(&sig, band, self.config.rows())) else { continue };
                for &i in bucket {
                    let i = i as usize;
                    if self.eligible(target, i) && seen.insert(i) {
                        neighbors.push(self.neighbor(i, &known, target_size));
                    }
                }
            }
        }
        neighbors.sort_by(rank);
        neighbors.truncate(n);
        let padded = neighbors.len() < n;
        if padded {
            let chosen: HashSet<usize> = neighbors.iter().map(|nb| nb.index).collect();
            let rest: Vec<usize> =
                (0..self.posts.len()).filter(|&i| self.eligible(target, i) && !chosen.contains(&i)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("pad:{}", target.id)));
            let fill: Vec<usize> = rest.choose_multiple(&mut rng, n - neighbors.len()).copied().collect();
            for i in fill {
                neighbors.push(self.neighbor(i, &known, target_size));
            }
            neighbors.sort_by(rank);
        }
        Ok(NeighborSet { target_id: target.id.clone(), neighbors, padded })
    }

    /// Queries many targets, in parallel, preserving order.
    pub fn query_many(&self, targets: &[Post], n: usize) -> Result<Vec<NeighborSet>, LshError> {
        targets.par_iter().map(|t| self.query(t, n)).collect()
    }

    fn neighbor(&self, i: usize, known: &[u32], target_size: usize) -> Neighbor {
        let other = &self.shingle_sets[i];
        let inter = sorted_intersection(known, other);
        let union = target_size + other.len() - inter;
        let similarity = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        Neighbor { index: i, id: self.posts[i].id.clone(), similarity }
    }

    pub fn save(&self, path: &Path) -> Result<(), LshError> {
        let file = IndexFile {
            version: INDEX_VERSION,
            seed: self.seed,
            config: self.config,
            posts: self.posts.iter().map(PostRecord::from).collect(),
            signatures: self.signatures.clone(),
        };
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, &file).map_err(|e| LshError::Format(e.to_string()))?;
        w.flush()?;
        Ok(())
    }

    /// Loads a saved index, checking the stored signatures against a recomputation.
    pub fn load(path: &Path) -> Result<Self, LshError> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let file: IndexFile = serde_json::from_reader(r).map_err(|e| LshError::Format(e.to_string()))?;
        if file.version != INDEX_VERSION {
            return Err(LshError::Format(format!("unsupported version {}", file.version)));
        }
        file.config.validate()?;
        let posts: Vec<Post> = file.posts.into_iter().map(Post::from).collect();
        let index = Self::build(&posts, file.config, file.seed)?;
        if index.signatures != file.signatures || index.posts.len() != posts.len() {
            return Err(LshError::Format("stored signatures do not match the posts".into()));
        }
        Ok(index)
    }
}

fn band_key(sig: &[u64], band: usize, rows: usize) -> u64 {
    sig[band * rows..(band + 1) * rows].iter().fold(mix64(band as u64), |h, v| mix64(h ^ v))
}

fn sorted_intersection(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Exact top-`n` by full scan, with the same exclusion and ordering rules as
/// [`LshIndex::query`]. `index` fields refer to positions in `pool`.
pub fn brute_force_topk(pool: &[Post], target: &Post, n: usize) -> Result<NeighborSet, LshError> {
    if n == 0 {
        return Err(LshError::InvalidConfig("n must be at least 1".into()));
    }
    let ts = shingles(&target.tokens);
    let mut all: Vec<Neighbor> = pool
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.tokens.is_empty() && p.user_id != target.user_id && p.id != target.id)
        .map(|(i, p)| Neighbor { index: i, id: p.id.clone(), similarity: jaccard(&ts, &shingles(&p.tokens)) })
        .collect();
    if all.len() < n {
        return Err(LshError::InsufficientPool { needed: n, available: all.len() });
    }
    all.sort_by(rank);
    all.truncate(n);
    Ok(NeighborSet { target_id: target.id.clone(), neighbors: all, padded: false })
}

/// Fraction of the oracle's neighbors that `found` also returned.
pub fn recall(found: &NeighborSet, oracle: &NeighborSet) -> f64 {
    let got: HashSet<&str> = found.ids().into_iter().collect();
    oracle.neighbors.iter().filter(|nb| got.contains(nb.id.as_str())).count() as f64 / oracle.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(id: &str, user: &str, text: &str) -> Post {
        Post::new(id, user, text, None)
    }

    fn small_pool() -> Vec<Post> {
        (0..40)
            .map(|i| post(&format!("x{i:02}"), &format!("u{}", i % 8), &format!("word{i} shared text {}", i % 5)))
            .collect()
    }

    #[test]
    fn single_post_lands_in_every_band() {
        let idx = LshIndex::build(&[post("a", "u", "hello world")], LshConfig::default(), 1).unwrap();
        assert_eq!(idx.bucket_count(0), DEFAULT_BANDS);
    }

    #[test]
    fn rebuild_is_identical() {
        let pool = small_pool();
        let a = LshIndex::build(&pool, LshConfig::default(), 3).unwrap();
        let b = LshIndex::build(&pool, LshConfig::default(), 3).unwrap();
        assert_eq!(a.bucket_structure(), b.bucket_structure());
    }

    #[test]
    fn duplicate_ids_and_bad_config_rejected() {
        let pool = vec![post("a", "u", "x y"), post("a", "v", "z")];
        assert!(matches!(LshIndex::build(&pool, LshConfig::default(), 0), Err(LshError::DuplicateId(_))));
        let cfg = LshConfig { k: 128, bands: 10 };
        assert!(matches!(LshIndex::build(&pool[..1], cfg, 0), Err(LshError::InvalidConfig(_))));
        assert!(matches!(LshIndex::build(&[], LshConfig::default(), 0), Err(LshError::EmptyPool)));
    }

    #[test]
    fn exact_duplicate_is_first() {
        let mut pool = small_pool();
        pool.push(post("dup", "other", "the very same words here"));
        let target = post("t", "me", "the very same words here");
        let idx = LshIndex::build(&pool, LshConfig::default(), 9).unwrap();
        let got = idx.query(&target, 5).unwrap();
        assert_eq!(got.neighbors[0].id, "dup");
        assert_eq!(got.neighbors[0].similarity, 1.0);
        assert_eq!(brute_force_topk(&pool, &target, 5).unwrap().neighbors[0].id, "dup");
    }

    #[test]
    fn same_author_only_is_insufficient() {
        let pool: Vec<Post> = (0..10).map(|i| post(&format!("p{i}"), "me", "a b c")).collect();
        let idx = LshIndex::build(&pool, LshConfig::default(), 0).unwrap();
        let target = post("t", "me", "a b c");
        assert!(matches!(idx.query(&target, 1), Err(LshError::InsufficientPool { available: 0, .. })));
        assert!(matches!(brute_force_topk(&pool, &target, 1), Err(LshError::InsufficientPool { .. })));
    }

    #[test]
    fn padding_fills_to_n_and_excludes_author() {
        let pool = small_pool();
        let idx = LshIndex::build(&pool, LshConfig::default(), 2).unwrap();
        let target = post("t", "u0", "completely unrelated tokens");
        let got = idx.query(&target, 20).unwrap();
        assert!(got.padded);
        assert_eq!(got.len(), 20);
        let ids: HashSet<&str> = got.ids().into_iter().collect();
        assert_eq!(ids.len(), 20);
        for nb in &got.neighbors {
            assert_ne!(idx.post(nb.index).user_id, "u0");
        }
        assert_eq!(idx.query(&target, 20).unwrap(), got);
    }

    #[test]
    fn indexed_target_is_excluded() {
        let pool = small_pool();
        let idx = LshIndex::build(&pool, LshConfig::default(), 2).unwrap();
        let got = idx.query(&pool[3], 10).unwrap();
        assert!(got.neighbors.iter().all(|nb| nb.id != pool[3].id && idx.post(nb.index).user_id != pool[3].user_id));
    }

    #[test]
    fn oracle_is_order_invariant() {
        let mut pool = small_pool();
        let target = post("t", "z", "shared text 3 word7");
        let a = brute_force_topk(&pool, &target, 10).unwrap();
        pool.reverse();
        let b = brute_force_topk(&pool, &target, 10).unwrap();
        assert_eq!(a.ids(), b.ids());
    }

    #[test]
    fn save_load_round_trip() {
        let pool = small_pool();
        let idx = LshIndex::build(&pool, LshConfig::default(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        idx.save(&path).unwrap();
        let back = LshIndex::load(&path).unwrap();
        assert_eq!(back.seed(), 11);
        assert_eq!(back.bucket_structure(), idx.bucket_structure());
        let target = post("t", "q", "shared text 1");
        assert_eq!(back.query(&target, 7).unwrap(), idx.query(&target, 7).unwrap());
    }
}
