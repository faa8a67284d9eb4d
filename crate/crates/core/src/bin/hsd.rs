use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hsd::agent::EpsilonSchedule;
use hsd::eval::{align, load_predictions, save_predictions, MetricsReport, PredictionRecord};
use hsd::lsh::{LshConfig, LshIndex, DEFAULT_BANDS, DEFAULT_K};
use hsd::textio::{
    gen_synthetic, load_posts, parse_label, save_posts, Dataset, EmbeddingTable, Histories, Post, Split, SynthConfig,
    DEFAULT_MIN_COUNT, EMBED_DIM, MAX_HISTORY,
};
use hsd::trainer::{
    build_embedder, init_joint, precompute, predict_all, pretrain_baseline, train_epochs, Mode, Model, PrecomputeCache,
    RunDir, TrainConfig, Vectors,
};

const BASELINE: &str = "baseline";

#[derive(Parser)]
#[command(name = "hsd", version, about = "Hate-speech detection with intra-user and reinforced inter-user context")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a labeled CSV file (id,user,text,label) to JSON Lines.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Field delimiter.
        #[arg(long, default_value_t = ',')]
        delimiter: char,
    },
    /// Write a synthetic corpus and matching word vectors to a directory.
    GenSynthetic {
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override the number of users.
        #[arg(long)]
        users: Option<usize>,
    },
    /// Train the target-only baseline and set up a run directory.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        /// Word vectors in text format; hashed vectors when absent.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
        min_count: usize,
        /// Extra files whose tokens join the vocabulary (test set, pool).
        #[arg(long = "vocab-from")]
        vocab_from: Vec<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Build the MinHash LSH index over an unlabeled pool.
    BuildIndex {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_BANDS)]
        bands: usize,
    },
    /// Joint training in one mode, starting from the run's baseline.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// LSH index; required by the inter modes.
        #[arg(long)]
        index: Option<PathBuf>,
        /// baseline, intra, intra-random or intra-rl.
        #[arg(long)]
        mode: Mode,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Greedy predictions of a trained mode, as JSON Lines.
    Predict {
        #[arg(long)]
        run: PathBuf,
        /// baseline, intra, intra-random or intra-rl.
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction files against gold labels and compare each with the first.
    Evaluate {
        /// Labeled posts.
        #[arg(long)]
        gold: PathBuf,
        /// Prediction files, as NAME=PATH or PATH.
        #[arg(long = "pred", required = true)]
        preds: Vec<String>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Ambiguous,
    PlantedDuplicates,
    RetrievalPool,
}

impl Preset {
    fn config(self) -> SynthConfig {
        match self {
            Preset::Default => SynthConfig::default(),
            Preset::Ambiguous => SynthConfig::ambiguous(),
            Preset::PlantedDuplicates => SynthConfig::planted_duplicates(),
            Preset::RetrievalPool => SynthConfig::retrieval_pool(),
        }
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    run: PathBuf,
    /// Labeled training posts.
    #[arg(long)]
    train: PathBuf,
    /// Unlabeled history posts of the same users.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Upper bound on epochs; early stopping may end sooner.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_policy: Option<f64>,
    /// Size of each neighbor set.
    #[arg(long, value_parser = ["50", "100", "200"])]
    neighbors: Option<String>,
    /// Reward amplification when the prior prediction is wrong.
    #[arg(long)]
    alpha: Option<f64>,
    /// Agent steps per target.
    #[arg(long)]
    steps: Option<usize>,
    /// Initial exploration rate.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Exploration rate reached at the end of training.
    #[arg(long)]
    epsilon_final: Option<f64>,
    #[arg(long, default_value_t = MAX_HISTORY)]
    max_history: usize,
    /// Train the intra-user projection jointly.
    #[arg(long, action = clap::ArgAction::Set, default_value_t = true)]
    train_l_ia: bool,
    /// Fine-tune the inter-user encoder jointly.
    #[arg(long, action = clap::ArgAction::Set, default_value_t = false)]
    train_f_ie: bool,
    /// Start joint training from the baseline's weights.
    #[arg(long, action = clap::ArgAction::Set, default_value_t = true)]
    warm_start: bool,
}

impl TrainArgs {
    fn config(&self, mode: Mode, pretraining: bool) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let epochs = self.epochs.unwrap_or(if pretraining { d.pretrain_epochs } else { d.epochs });
        let config = TrainConfig {
            mode,
            epochs,
            pretrain_epochs: epochs,
            patience: self.patience.unwrap_or(d.patience),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            lr_policy: self.lr_policy.unwrap_or(d.lr_policy),
            steps: self.steps.unwrap_or(d.steps),
            alpha: self.alpha.unwrap_or(d.alpha),
            epsilon: EpsilonSchedule {
                start: self.epsilon.unwrap_or(d.epsilon.start),
                end: self.epsilon_final.or(self.epsilon).unwrap_or(d.epsilon.end),
            },
            neighbors: self.neighbors.as_deref().map(str::parse).transpose()?.unwrap_or(d.neighbors),
            max_history: self.max_history,
            seed: self.seed,
            warm_start: self.warm_start,
            train_l_ia: self.train_l_ia,
            train_f_ie: self.train_f_ie,
            ..d
        };
        config.validate()?;
        Ok(config)
    }
}

fn read_posts(path: &Path) -> Result<Vec<Post>> {
    load_posts(path).with_context(|| format!("reading {}", path.display()))
}

fn read_histories(path: Option<&Path>) -> Result<Histories> {
    Ok(match path {
        Some(p) => Histories::from_posts(read_posts(p)?),
        None => Histories::default(),
    })
}

fn ingest(input: &Path, output: &Path, delimiter: char) -> Result<()> {
    let delimiter = u8::try_from(delimiter).context("delimiter must be a single ASCII character")?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_path(input)
        .with_context(|| format!("opening {}", input.display()))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let (Some(id), Some(user), Some(text)) = (column("id"), column("user"), column("text")) else {
        bail!("{} needs id, user and text columns", input.display());
    };
    let label = column("label");
    let mut posts = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let raw = label.and_then(|c| row.get(c)).unwrap_or("").trim();
        let label = if raw.is_empty() {
            None
        } else {
            Some(parse_label(raw).with_context(|| format!("line {line}: unknown label {raw:?}"))?)
        };
        posts.push(Post::new(&row[id], &row[user], &row[text], label));
    }
    save_posts(output, &posts)?;
    println!("wrote {} posts to {}", posts.len(), output.display());
    Ok(())
}

fn gen(preset: Preset, seed: u64, out: &Path, users: Option<usize>) -> Result<()> {
    let mut config = preset.config();
    if let Some(u) = users {
        config.n_users = u;
    }
    let corpus = gen_synthetic(&config, seed)?;
    fs::create_dir_all(out)?;
    save_posts(&out.join("train.jsonl"), &corpus.train.posts)?;
    save_posts(&out.join("test.jsonl"), &corpus.test.posts)?;
    save_posts(&out.join("history.jsonl"), &corpus.history_posts())?;
    save_posts(&out.join("pool.jsonl"), &corpus.pool)?;
    let vectors = corpus.embeddings(EMBED_DIM, seed);
    let mut w = std::io::BufWriter::new(fs::File::create(out.join("embeddings.txt"))?);
    EmbeddingTable::write_pairs(&mut w, &vectors, EMBED_DIM)?;
    std::io::Write::flush(&mut w)?;
    fs::write(out.join("synth.json"), serde_json::to_string_pretty(&config)?)?;
    println!(
        "train {} / test {} / history {} / pool {} posts in {}",
        corpus.train.len(),
        corpus.test.len(),
        corpus.histories.len(),
        corpus.pool.len(),
        out.display()
    );
    Ok(())
}

fn labeled(path: &Path, split: Split) -> Result<Dataset> {
    Dataset::new(read_posts(path)?, split).with_context(|| format!("{} must contain labeled posts", path.display()))
}

fn pretrain(
    data: &DataArgs,
    embeddings: Option<&Path>,
    min_count: usize,
    vocab_from: &[PathBuf],
    args: &TrainArgs,
) -> Result<()> {
    let config = args.config(Mode::Baseline, true)?;
    let train = labeled(&data.train, Split::Train)?;
    let mut extra = Vec::new();
    if let Some(h) = &data.history {
        extra.extend(read_posts(h)?);
    }
    for p in vocab_from {
        extra.extend(read_posts(p)?);
    }
    let vectors = embeddings.map_or(Vectors::Hashed, Vectors::File);
    let emb = build_embedder(train.posts.iter().chain(&extra), min_count, vectors)?;
    let run = RunDir::create(&data.run)?;
    run.save_embedder(&emb)?;
    run.write_config(BASELINE, &config)?;
    let mut metrics = run.metrics_writer(BASELINE)?;
    let (model, report) = pretrain_baseline(&train, &emb, &config, &mut metrics)?;
    model.save(&run.checkpoint(BASELINE))?;
    println!(
        "baseline: {} epochs, kept epoch {}, vocabulary {} tokens",
        report.epochs.len(),
        report.best_epoch,
        emb.vocab.len()
    );
    Ok(())
}

fn build_index(pool: &Path, out: &Path, seed: u64, k: usize, bands: usize) -> Result<()> {
    let posts = read_posts(pool)?;
    let index = LshIndex::build(&posts, LshConfig { k, bands }, seed)?;
    index.save(out)?;
    println!("indexed {} posts into {}", index.len(), out.display());
    Ok(())
}

fn load_index(path: Option<&Path>, mode: Mode) -> Result<Option<LshIndex>> {
    match path {
        Some(p) if mode.uses_inter() => {
            Ok(Some(LshIndex::load(p).with_context(|| format!("loading index {}", p.display()))?))
        }
        None if mode.uses_inter() => bail!("mode {} needs --index", mode.name()),
        _ => Ok(None),
    }
}

fn train(data: &DataArgs, index: Option<&Path>, mode: Mode, args: &TrainArgs) -> Result<()> {
    if mode == Mode::Baseline {
        bail!("the baseline is trained by `pretrain`");
    }
    let run = RunDir::open(&data.run)?;
    let config = args.config(mode, false)?;
    let emb = run.load_embedder()?;
    let pretrained = Model::load(&run.checkpoint(BASELINE), config.dims).context("loading the baseline checkpoint")?;
    let train = labeled(&data.train, Split::Train)?;
    let histories = read_histories(data.history.as_deref())?;
    let index = load_index(index, mode)?;
    let model = init_joint(&pretrained, &config)?;
    let cache = precompute(&train.posts, &histories, index.as_ref(), &model, &emb, &config)?;
    cache.save(&run.cache(mode.name()))?;
    run.write_config(mode.name(), &config)?;
    let mut metrics = run.metrics_writer(mode.name())?;
    let out = train_epochs(model, &emb, &train, &cache, &config, &mut metrics)?;
    out.model.save(&run.checkpoint(mode.name()))?;
    println!("{}: {} epochs, kept epoch {}", mode.name(), out.epochs.len(), out.best_epoch);
    Ok(())
}

fn predict(
    run: &Path,
    mode: Mode,
    input: &Path,
    history: Option<&Path>,
    index: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let run = RunDir::open(run)?;
    let config = run.read_config(mode.name()).with_context(|| format!("mode {} has not been trained", mode.name()))?;
    let emb = run.load_embedder()?;
    let model = Model::load(&run.checkpoint(mode.name()), config.dims)?;
    let posts = read_posts(input)?;
    let cache = if mode.uses_intra() {
        let histories = read_histories(history)?;
        let index = load_index(index, mode)?;
        precompute(&posts, &histories, index.as_ref(), &model, &emb, &config)?
    } else {
        PrecomputeCache::default()
    };
    let preds = predict_all(&model, &emb, &posts, &cache, &config)?;
    let records: Vec<PredictionRecord> = preds
        .iter()
        .map(|p| PredictionRecord { id: p.id.clone(), pred: p.label(), scores: [p.probs[0], p.probs[1]] })
        .collect();
    save_predictions(out, &records)?;
    println!("wrote {} predictions to {}", records.len(), out.display());
    Ok(())
}

/// Returns whether every comparison had a defined McNemar test.
fn evaluate(gold: &Path, preds: &[String], out: Option<&Path>) -> Result<bool> {
    let gold = labeled(gold, Split::Test)?;
    let ids: Vec<&str> = gold.posts.iter().map(|p| p.id.as_str()).collect();
    let mut models = Vec::new();
    for arg in preds {
        let (name, path) = match arg.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(arg);
                (p.file_stem().map_or_else(|| arg.clone(), |s| s.to_string_lossy().into_owned()), p)
            }
        };
        let records = load_predictions(&path).with_context(|| format!("reading {}", path.display()))?;
        models.push((name, align(&records, &ids)?));
    }
    let report = MetricsReport::build(&gold.labels(), &models)?;
    print!("{}", report.to_table());
    if let Some(p) = out {
        fs::write(p, report.to_json())?;
    }
    Ok(!report.has_undefined_test())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest { input, output, delimiter } => ingest(&input, &output, delimiter)?,
        Command::GenSynthetic { preset, seed, out, users } => gen(preset, seed, &out, users)?,
        Command::Pretrain { data, embeddings, min_count, vocab_from, train } => {
            pretrain(&data, embeddings.as_deref(), min_count, &vocab_from, &train)?
        }
        Command::BuildIndex { pool, out, seed, k, bands } => build_index(&pool, &out, seed, k, bands)?,
        Command::Train { data, index, mode, train: args } => train(&data, index.as_deref(), mode, &args)?,
        Command::Predict { run, mode, input, history, index, out } => {
            predict(&run, mode, &input, history.as_deref(), index.as_deref(), &out)?
        }
        Command::Evaluate { gold, preds, out } => {
            if !evaluate(&gold, &preds, out.as_deref())? {
                eprintln!("error: McNemar test undefined (no discordant pairs) for at least one comparison");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
