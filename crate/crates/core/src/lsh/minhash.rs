use std::collections::BTreeSet;

use crate::hashing::{derive_seed, fnv1a, mix64};

use super::LshError;

/// Unigrams plus `_`-joined bigrams.
pub fn shingles(tokens: &[String]) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = tokens.iter().cloned().collect();
    for w in tokens.windows(2) {
        out.insert(format!("{}_{}", w[0], w[1]));
    }
    out
}

/// Exact Jaccard similarity; two empty sets have similarity 0.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `k` seeded hash functions; slot `j` of a signature is the minimum of hash `j` over
/// the shingles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinHasher {
    seeds: Vec<u64>,
}

impl MinHasher {
    pub fn new(k: usize, seed: u64) -> Self {
        let base = derive_seed(seed, "minhash");
        Self { seeds: (0..k as u64).map(|j| mix64(base ^ j.wrapping_mul(0x9e37_79b9_7f4a_7c15))).collect() }
    }

    pub fn k(&self) -> usize {
        self.seeds.len()
    }

    pub fn signature<'a>(&self, shingles: impl IntoIterator<Item = &'a str>) -> Result<Vec<u64>, LshError> {
        let mut sig = vec![u64::MAX; self.seeds.len()];
        let mut any = false;
        for s in shingles {
            any = true;
            let h = fnv1a(s.as_bytes());
            for (slot, seed) in sig.iter_mut().zip(&self.seeds) {
                let v = mix64(h ^ seed);
                if v < *slot {
                    *slot = v;
                }
            }
        }
        if any {
            Ok(sig)
        } else {
            Err(LshError::EmptyShingles)
        }
    }
}

pub fn minhash_signature(shingles: &BTreeSet<String>, k: usize, seed: u64) -> Result<Vec<u64>, LshError> {
    MinHasher::new(k, seed).signature(shingles.iter().map(String::as_str))
}

/// Fraction of slots on which two signatures agree.
pub fn agreement(a: &[u64], b: &[u64]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}
