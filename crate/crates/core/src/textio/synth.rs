//! Synthetic labeled corpora with user personas, histories, and planted near-duplicates.
//!
//! Each user is either a hate persona or not. A post is hate with a persona-dependent
//! rate; hate posts carry one or two words from a small signal lexicon, drawn among
//! Zipf-distributed neutral words. An *ambiguous* hate post has its signal words swapped
//! for neutral ones, so only context (the author's history, or cleaner copies posted by
//! other users) reveals its label. Near-duplicates of labeled posts are planted in the
//! unlabeled pool under other users' names; the first `clean_copies` of each group are
//! copies of the unobfuscated text.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use super::{Dataset, Histories, Label, Post, Split, TextError};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    /// Labeled posts per user.
    pub posts_per_user: usize,
    /// Unlabeled history posts per user.
    pub history_per_user: usize,
    /// Size of the neutral lexicon.
    pub vocab_size: usize,
    pub signal_vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub hate_user_fraction: f64,
    /// P(hate post | hate persona).
    pub hate_user_rate: f64,
    /// P(hate post | other persona).
    pub other_user_rate: f64,
    pub label_noise: f64,
    /// Fraction of hate posts whose signal words are obfuscated.
    pub ambiguous_rate: f64,
    /// Fraction of labeled posts that get near-duplicates in the pool.
    pub near_duplicate_rate: f64,
    pub duplicate_copies: usize,
    /// Leading copies of each duplicate group built from the unobfuscated text.
    pub clean_copies: usize,
    /// Copies after the clean ones that repeat the observed text verbatim.
    pub exact_copies: usize,
    /// Additional unrelated pool posts.
    pub pool_filler: usize,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 150,
            posts_per_user: 10,
            history_per_user: 20,
            vocab_size: 1200,
            signal_vocab_size: 30,
            min_len: 8,
            max_len: 14,
            hate_user_fraction: 0.35,
            hate_user_rate: 0.9,
            other_user_rate: 0.02,
            label_noise: 0.01,
            ambiguous_rate: 0.25,
            near_duplicate_rate: 0.1,
            duplicate_copies: 2,
            clean_copies: 2,
            exact_copies: 0,
            pool_filler: 2000,
            test_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    /// Hate is largely invisible in the text but strongly tied to the author: every hate
    /// post of a hate persona has even odds of being obfuscated.
    pub fn ambiguous() -> Self {
        Self {
            n_users: 250,
            posts_per_user: 6,
            history_per_user: 12,
            ambiguous_rate: 0.5,
            near_duplicate_rate: 0.0,
            pool_filler: 500,
            ..Self::default()
        }
    }

    /// Personas carry no signal; half of the hate posts are obfuscated, and each labeled
    /// post has a cluster of 19 near-duplicates in the pool of which five are clean.
    pub fn planted_duplicates() -> Self {
        Self {
            n_users: 128,
            posts_per_user: 5,
            history_per_user: 4,
            signal_vocab_size: 10,
            hate_user_fraction: 1.0,
            hate_user_rate: 0.33,
            other_user_rate: 0.33,
            ambiguous_rate: 0.5,
            near_duplicate_rate: 1.0,
            duplicate_copies: 19,
            clean_copies: 5,
            pool_filler: 0,
            test_fraction: 0.5,
            ..Self::default()
        }
    }

    /// One labeled post per user, each with 50 near-duplicates (the first verbatim) in
    /// a 5,000-post pool.
    pub fn retrieval_pool() -> Self {
        Self {
            n_users: 100,
            posts_per_user: 1,
            history_per_user: 0,
            near_duplicate_rate: 1.0,
            duplicate_copies: 50,
            clean_copies: 0,
            exact_copies: 1,
            pool_filler: 0,
            test_fraction: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TextError> {
        let fractions = [
            ("hate_user_fraction", self.hate_user_fraction),
            ("hate_user_rate", self.hate_user_rate),
            ("other_user_rate", self.other_user_rate),
            ("label_noise", self.label_noise),
            ("ambiguous_rate", self.ambiguous_rate),
            ("near_duplicate_rate", self.near_duplicate_rate),
            ("test_fraction", self.test_fraction),
        ];
        for (name, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return Err(TextError::InvalidConfig(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.n_users == 0 || self.posts_per_user == 0 {
            return Err(TextError::InvalidConfig("need at least one user and one post per user".into()));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(TextError::InvalidConfig("post length range must satisfy 2 <= min_len <= max_len".into()));
        }
        if self.vocab_size < 10 || self.signal_vocab_size == 0 {
            return Err(TextError::InvalidConfig("lexicons too small".into()));
        }
        if self.vocab_size + self.signal_vocab_size > SYLLABLES.len().pow(3) {
            return Err(TextError::InvalidConfig("lexicons too large".into()));
        }
        if self.clean_copies + self.exact_copies > self.duplicate_copies {
            return Err(TextError::InvalidConfig("clean_copies + exact_copies exceeds duplicate_copies".into()));
        }
        if self.near_duplicate_rate > 0.0 && self.duplicate_copies >= self.n_users {
            return Err(TextError::InvalidConfig("duplicate_copies needs that many other users".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Dataset,
    pub test: Dataset,
    pub histories: Histories,
    pub pool: Vec<Post>,
    pub signal_lexicon: Vec<String>,
    /// Neutral words, most frequent first.
    pub neutral_lexicon: Vec<String>,
}

/// Per-component standard deviation of synthetic word vectors.
pub const SYNTH_EMBED_NOISE: f64 = 0.1;
/// Length of the offset shared by every signal word's vector.
pub const SYNTH_SIGNAL_OFFSET: f64 = 1.0;

impl SynthCorpus {
    /// True when the post contains no signal-lexicon word.
    pub fn is_ambiguous(&self, post: &Post) -> bool {
        !post.tokens.iter().any(|t| self.signal_lexicon.binary_search(t).is_ok())
    }

    pub fn history_posts(&self) -> Vec<Post> {
        self.histories.all_posts().cloned().collect()
    }

    /// Stand-ins for pretrained word vectors over the lexicon. Every word gets Gaussian
    /// noise; signal words also share one random offset of length
    /// [`SYNTH_SIGNAL_OFFSET`], the way abusive terms cluster in embeddings trained on
    /// social-media text.
    pub fn embeddings(&self, dim: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::hashing::derive_seed(seed, "embeddings"));
        let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
        let mut direction: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        direction.iter_mut().for_each(|v| *v *= SYNTH_SIGNAL_OFFSET / norm);
        let mut rows = Vec::with_capacity(self.neutral_lexicon.len() + self.signal_lexicon.len());
        for word in &self.neutral_lexicon {
            rows.push((word.clone(), (0..dim).map(|_| SYNTH_EMBED_NOISE * normal.sample(&mut rng)).collect()));
        }
        for word in &self.signal_lexicon {
            let v = direction.iter().map(|d| d + SYNTH_EMBED_NOISE * normal.sample(&mut rng)).collect();
            rows.push((word.clone(), v));
        }
        rows
    }
}

const SYLLABLES: [&str; 60] = [
    "ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du", "fa", "fe", "fi", "fo", "fu", "ga", "ge", "gi", "go",
    "gu", "ka", "ke", "ki", "ko", "ku", "la", "le", "li", "lo", "lu", "ma", "me", "mi", "mo", "mu", "na", "ne", "ni",
    "no", "nu", "pa", "pe", "pi", "po", "pu", "ra", "re", "ri", "ro", "ru", "sa", "se", "si", "so", "su", "ta", "te",
    "ti", "to", "tu",
];

/// Distinct pronounceable words; the first 3600 have two syllables, later ones three.
fn lexicon_word(i: usize) -> String {
    let n = SYLLABLES.len();
    if i < n * n {
        format!("{}{}", SYLLABLES[i / n], SYLLABLES[i % n])
    } else {
        let j = i - n * n;
        format!("{}{}{}", SYLLABLES[(j / (n * n)) % n], SYLLABLES[(j / n) % n], SYLLABLES[j % n])
    }
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    neutral: Vec<String>,
    signal: Vec<String>,
    zipf: Zipf<f64>,
}

/// Observed and unobfuscated token sequences of one generated post.
struct Draft {
    observed: Vec<String>,
    clean: Vec<String>,
    hate: bool,
}

impl Generator<'_> {
    fn neutral_word(&mut self) -> String {
        let r = self.zipf.sample(&mut self.rng) as usize;
        self.neutral[r.clamp(1, self.neutral.len()) - 1].clone()
    }

    fn draft(&mut self, hate_rate: f64) -> Draft {
        let hate = self.rng.gen_bool(hate_rate);
        let len = self.rng.gen_range(self.cfg.min_len..=self.cfg.max_len);
        let mut observed: Vec<String> = (0..len).map(|_| self.neutral_word()).collect();
        let mut clean = observed.clone();
        if hate {
            let k = if self.rng.gen_bool(0.5) { 2 } else { 1 };
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(&mut self.rng);
            let obfuscated = self.rng.gen_bool(self.cfg.ambiguous_rate);
            for &pos in &positions[..k] {
                let w = self.signal.choose(&mut self.rng).expect("signal lexicon").clone();
                clean[pos] = w.clone();
                if !obfuscated {
                    observed[pos] = w;
                }
            }
        }
        if self.rng.gen_bool(0.15) {
            let mention = format!("@{}", self.neutral_word());
            observed.insert(0, mention.clone());
            clean.insert(0, mention);
        }
        if self.rng.gen_bool(0.1) {
            let tag = format!("#{}", self.neutral_word());
            observed.push(tag.clone());
            clean.push(tag);
        }
        Draft { observed, clean, hate }
    }

    /// Retweet-style near-copy: one small edit of `words`.
    fn variant(&mut self, words: &[String]) -> Vec<String> {
        let mut out = words.to_vec();
        match self.rng.gen_range(0..10) {
            0..=2 => out.insert(0, "rt".to_string()),
            3..=5 => {
                let w = self.neutral_word();
                out.push(w);
            }
            6..=8 => {
                let tag = format!("#{}", self.neutral_word());
                out.push(tag);
            }
            _ => {
                let pos = self.rng.gen_range(0..out.len());
                out[pos] = self.neutral_word();
            }
        }
        out
    }
}

/// Generates a corpus; identical `(config, seed)` gives identical output.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus, TextError> {
    cfg.validate()?;
    let neutral: Vec<String> = (0..cfg.vocab_size).map(lexicon_word).collect();
    let mut signal: Vec<String> =
        (0..cfg.signal_vocab_size).map(|i| lexicon_word(SYLLABLES.len().pow(2) + 7 * i)).collect();
    signal.sort();
    let zipf = Zipf::new(cfg.vocab_size as u64, 1.05).map_err(|e| TextError::InvalidConfig(e.to_string()))?;
    let mut gen = Generator { cfg, rng: ChaCha8Rng::seed_from_u64(seed), neutral, signal, zipf };

    let n_hate_users = (cfg.hate_user_fraction * cfg.n_users as f64).round() as usize;
    let mut personas: Vec<bool> = (0..cfg.n_users).map(|u| u < n_hate_users).collect();
    personas.shuffle(&mut gen.rng);
    let rate = |hate_persona: bool| if hate_persona { cfg.hate_user_rate } else { cfg.other_user_rate };
    let user = |u: usize| format!("u{u:04}");

    let mut labeled: Vec<(Post, Draft)> = Vec::new();
    let mut history = Vec::new();
    for (u, &persona) in personas.iter().enumerate() {
        for _ in 0..cfg.posts_per_user {
            let d = gen.draft(rate(persona));
            let mut label: Label = d.hate.into();
            if gen.rng.gen_bool(cfg.label_noise) {
                label = 1 - label;
            }
            let id = format!("p{:06}", labeled.len());
            let post = Post::new(id, user(u), d.observed.join(" "), Some(label));
            labeled.push((post, d));
        }
        for _ in 0..cfg.history_per_user {
            let d = gen.draft(rate(persona));
            let id = format!("h{:06}", history.len());
            history.push(Post::new(id, user(u), d.observed.join(" "), None));
        }
    }

    let mut pool = Vec::new();
    for (post, d) in &labeled {
        if !gen.rng.gen_bool(cfg.near_duplicate_rate) {
            continue;
        }
        let author: usize = post.user_id[1..].parse().expect("generated user id");
        let mut others: Vec<usize> = (0..cfg.n_users).filter(|&u| u != author).collect();
        others.shuffle(&mut gen.rng);
        for (c, &other) in others.iter().take(cfg.duplicate_copies).enumerate() {
            let words = if c < cfg.clean_copies {
                gen.variant(&d.clean)
            } else if c < cfg.clean_copies + cfg.exact_copies {
                d.observed.clone()
            } else {
                gen.variant(&d.observed)
            };
            let id = format!("x{:06}", pool.len());
            pool.push(Post::new(id, user(other), words.join(" "), None));
        }
    }
    for _ in 0..cfg.pool_filler {
        let u = gen.rng.gen_range(0..cfg.n_users);
        let d = gen.draft(rate(personas[u]));
        let id = format!("x{:06}", pool.len());
        pool.push(Post::new(id, user(u), d.observed.join(" "), None));
    }

    let mut posts: Vec<Post> = labeled.into_iter().map(|(p, _)| p).collect();
    posts.shuffle(&mut gen.rng);
    let n_test = (cfg.test_fraction * posts.len() as f64).round() as usize;
    let train_posts = posts.split_off(n_test);
    let signal_lexicon = gen.signal;
    let neutral_lexicon = gen.neutral;
    Ok(SynthCorpus {
        train: Dataset::new(train_posts, Split::Train)?,
        test: Dataset::new(posts, Split::Test)?,
        histories: Histories::from_posts(history),
        pool,
        signal_lexicon,
        neutral_lexicon,
    })
}
