use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branches::{Embedder, IntraSummary};
use crate::lsh::{LshIndex, NeighborSet};
use crate::textio::{Histories, Post, PostRecord};

use super::{Model, TrainConfig, TrainError};

pub const CACHE_VERSION: u32 = 1;

/// Everything about one target that stays fixed during joint training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    /// `X_t`; absent when the cache was built for a mode without the inter branch.
    pub neighbors: Option<NeighborSet>,
    pub intra: IntraSummary,
    /// `r_ia` under the `l_ia` present at precompute time.
    pub r_ia: Vec<f64>,
}

/// Per-target neighbor sets and intra summaries, plus the pool posts the neighbor
/// indices point into.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrecomputeCache {
    pub entries: BTreeMap<String, CacheEntry>,
    pub pool: Vec<Post>,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    pool: Vec<PostRecord>,
    entries: BTreeMap<String, CacheEntry>,
}

impl PrecomputeCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&CacheEntry, TrainError> {
        self.entries.get(id).ok_or_else(|| TrainError::MissingCache(id.to_string()))
    }

    /// The neighbor posts of an entry, in ranked order.
    pub fn neighbor_posts(&self, entry: &CacheEntry) -> Vec<&Post> {
        entry.neighbors.as_ref().map(|x| x.neighbors.iter().map(|n| &self.pool[n.index]).collect()).unwrap_or_default()
    }

    /// Adds the entries of `other`, which must share this cache's pool.
    pub fn merge(&mut self, other: PrecomputeCache) -> Result<(), TrainError> {
        if self.pool.is_empty() {
            self.pool = other.pool;
        } else if !other.pool.is_empty() && other.pool != self.pool {
            return Err(TrainError::Format("caches were built over different pools".into()));
        }
        self.entries.extend(other.entries);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = CacheFile {
            version: CACHE_VERSION,
            pool: self.pool.iter().map(PostRecord::from).collect(),
            entries: self.entries.clone(),
        };
        serde_json::to_string(&file).expect("cache serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let file: CacheFile = serde_json::from_str(s).map_err(|e| TrainError::Format(e.to_string()))?;
        if file.version != CACHE_VERSION {
            return Err(TrainError::Format(format!("unsupported cache version {}", file.version)));
        }
        let pool: Vec<Post> = file.pool.into_iter().map(Post::from).collect();
        for entry in file.entries.values() {
            for n in entry.neighbors.iter().flat_map(|x| &x.neighbors) {
                if pool.get(n.index).map(|p| p.id.as_str()) != Some(n.id.as_str()) {
                    return Err(TrainError::Format(format!(
                        "neighbor {} does not match pool position {}",
                        n.id, n.index
                    )));
                }
            }
        }
        Ok(Self { entries: file.entries, pool })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Collects `X_t` (when `index` is given) and the intra summary and `r_ia` of every
/// target, using the model's frozen `f_ia` and current `l_ia`. Targets are processed in
/// parallel; the result does not depend on scheduling.
pub fn precompute(
    targets: &[Post],
    histories: &Histories,
    index: Option<&LshIndex>,
    model: &Model,
    emb: &Embedder,
    config: &TrainConfig,
) -> Result<PrecomputeCache, TrainError> {
    if config.mode.uses_inter() && index.is_none() {
        return Err(TrainError::InvalidConfig(format!("mode {} needs a neighbor index", config.mode.name())));
    }
    let neighbors = match index {
        Some(ix) => ix.query_many(targets, config.neighbors)?.into_iter().map(Some).collect(),
        None => vec![None; targets.len()],
    };
    // Targets of one user usually share a history; summarize each distinct history once.
    let sets: Vec<Vec<Post>> = targets.iter().map(|t| histories.for_target(t, config.max_history).posts).collect();
    let mut slots: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
    let mut unique: Vec<&[Post]> = Vec::new();
    let slot_of: Vec<usize> = sets
        .iter()
        .map(|h| {
            *slots.entry(h.iter().map(|p| p.id.as_str()).collect()).or_insert_with(|| {
                unique.push(h);
                unique.len() - 1
            })
        })
        .collect();
    let summaries = unique
        .par_iter()
        .map(|h| {
            let summary = model.branches.intra_summary(&model.store, emb, h)?;
            let r_ia = model.branches.intra_rep_plain(&model.store, &summary);
            Ok((summary, r_ia))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let intra = slot_of.iter().map(|&i| summaries[i].clone());
    let entries = targets
        .iter()
        .zip(neighbors)
        .zip(intra)
        .map(|((t, neighbors), (intra, r_ia))| (t.id.clone(), CacheEntry { neighbors, intra, r_ia }))
        .collect();
    let pool = index.map(|ix| ix.posts().to_vec()).unwrap_or_default();
    Ok(PrecomputeCache { entries, pool })
}
