//! Baseline pretraining, precomputation of neighbor sets and intra summaries, and the
//! joint loop that interleaves per-episode REINFORCE updates with minibatched supervised
//! steps.

mod cache;
mod episode;
mod fit;
mod run;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentError, EpsilonSchedule, PolicyParams};
use crate::branches::{BranchDims, BranchParams, Embedder};
use crate::eval::EvalError;
use crate::hashing::derive_seed;
use crate::lsh::{LshConfig, LshError};
use crate::nn::{NnError, ParamId, ParamStore};
use crate::textio::{EmbeddingTable, Post, TextError, Vocab, MAX_HISTORY};

pub use cache::{precompute, CacheEntry, PrecomputeCache, CACHE_VERSION};
pub use episode::{predict, predict_all, Prediction};
pub use fit::{init_joint, pretrain_baseline, train_epochs, EpochMetrics, PretrainReport, TrainOutcome};
pub use run::{JsonlObserver, RunDir};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Lsh(#[from] LshError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no cache entry for target {0}")]
    MissingCache(String),
    #[error("numerical fault at epoch {epoch} on target {target}: {source}")]
    NumericalFault { epoch: usize, target: String, source: NnError },
    #[error("cache format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Target branch only.
    Baseline,
    /// Target and intra-user branches; prediction is `y′`.
    Intra,
    /// Adds the inter-user branch with uniformly random neighbor selection.
    IntraRandom,
    /// Adds the inter-user branch with the learned selection policy.
    IntraRl,
}

impl Mode {
    pub fn uses_intra(self) -> bool {
        self != Mode::Baseline
    }

    pub fn uses_inter(self) -> bool {
        matches!(self, Mode::IntraRandom | Mode::IntraRl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Intra => "intra",
            Mode::IntraRandom => "intra-random",
            Mode::IntraRl => "intra-rl",
        }
    }

    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Intra, Mode::IntraRandom, Mode::IntraRl];
}

impl std::str::FromStr for Mode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TrainError::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Upper bound on joint-training epochs.
    pub epochs: usize,
    pub pretrain_epochs: usize,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    pub holdout_fraction: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_policy: f64,
    /// `T`.
    pub steps: usize,
    pub alpha: f64,
    pub epsilon: EpsilonSchedule,
    /// `n`, the size of each neighbor set.
    pub neighbors: usize,
    pub max_history: usize,
    pub seed: u64,
    /// Initialize `f_ta` (and the inter encoder and fusion heads) from the pretrained
    /// baseline.
    pub warm_start: bool,
    pub train_l_ia: bool,
    /// Fine-tune `f_ie` jointly. When frozen, each target's `B` is encoded once per run.
    pub train_f_ie: bool,
    pub lsh: LshConfig,
    pub dims: BranchDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::IntraRl,
            epochs: 10,
            pretrain_epochs: 20,
            patience: 3,
            holdout_fraction: 0.1,
            batch_size: 25,
            lr: 1e-3,
            lr_policy: 1e-3,
            steps: 3,
            alpha: 2.0,
            epsilon: EpsilonSchedule::default(),
            neighbors: 50,
            max_history: MAX_HISTORY,
            seed: 0,
            warm_start: true,
            train_l_ia: true,
            train_f_ie: false,
            lsh: LshConfig::default(),
            dims: BranchDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.neighbors == 0 {
            return bad("neighbors must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must be in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr_policy > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(AgentError::InvalidAlpha(self.alpha).into());
        }
        self.epsilon.validate()?;
        self.lsh.validate()?;
        Ok(())
    }
}

/// Parameters of every branch and the policy in one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub store: ParamStore,
    pub branches: BranchParams,
    pub policy: PolicyParams,
}

impl Model {
    pub fn new(dims: BranchDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
        let mut store = ParamStore::new();
        let branches = BranchParams::register(&mut store, dims, &mut rng);
        let policy = PolicyParams::register(&mut store, dims.state(), &mut rng);
        Self { store, branches, policy }
    }

    pub fn from_store(store: ParamStore, dims: BranchDims) -> Result<Self, NnError> {
        let branches = BranchParams::bind(&store, dims)?;
        let policy = PolicyParams::bind(&store)?;
        Ok(Self { store, branches, policy })
    }

    /// `θ_e`: every non-policy parameter. Frozen ones are skipped by the optimizer.
    pub fn theta_e(&self) -> Vec<ParamId> {
        let policy = self.policy.ids();
        self.store.ids().filter(|id| !policy.contains(id)).collect()
    }

    pub fn inter_encoder_frozen(&self) -> bool {
        self.store.group("f_ie").into_iter().all(|id| self.store.is_frozen(id))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.store.write_checkpoint(f)?;
        Ok(())
    }

    pub fn load(path: &Path, dims: BranchDims) -> Result<Self, TrainError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let store = ParamStore::read_checkpoint(f)?;
        Ok(Self::from_store(store, dims)?)
    }
}

/// Where word vectors come from.
#[derive(Debug, Clone, Copy)]
pub enum Vectors<'a> {
    Hashed,
    File(&'a Path),
    Pairs(&'a [(String, Vec<f64>)]),
}

/// Vocabulary over every text the model will see, with frozen vectors for it.
pub fn build_embedder<'a>(
    posts: impl IntoIterator<Item = &'a Post>,
    min_count: usize,
    vectors: Vectors<'_>,
) -> Result<Embedder, TrainError> {
    let docs = posts.into_iter().map(|p| p.tokens.as_slice());
    let vocab = Vocab::build_capped(docs, min_count, crate::textio::DEFAULT_MAX_SIZE)?;
    let table = match vectors {
        Vectors::Hashed => EmbeddingTable::hashed(&vocab),
        Vectors::File(p) => EmbeddingTable::load(p, &vocab)?,
        Vectors::Pairs(pairs) => EmbeddingTable::from_pairs(&vocab, pairs, crate::textio::EMBED_DIM),
    };
    Ok(Embedder::new(vocab, table))
}

/// Progress events, in the order the loop produces them.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    EpochStart { epoch: usize },
    PolicyUpdate { epoch: usize, target: String, reward: f64, stepped: bool },
    EncoderStep { epoch: usize, targets: Vec<String>, loss: f64 },
    EpochEnd(EpochMetrics),
}

pub trait TrainObserver {
    fn on_event(&mut self, event: &TrainEvent);
}

/// Discards every event.
pub struct NoopObserver;

impl TrainObserver for NoopObserver {
    fn on_event(&mut self, _: &TrainEvent) {}
}

impl TrainObserver for Vec<TrainEvent> {
    fn on_event(&mut self, event: &TrainEvent) {
        self.push(event.clone());
    }
}
