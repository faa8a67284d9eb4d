use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::branches::Embedder;
use crate::textio::{EmbeddingTable, Vocab};

use super::{TrainConfig, TrainError, TrainEvent, TrainObserver};

/// Layout of a training run on disk:
///
/// ```text
/// <root>/vocab.json
/// <root>/vectors.txt
/// <root>/metrics.jsonl
/// <root>/configs/<name>.json
/// <root>/checkpoints/<name>.ckpt
/// <root>/cache/<name>.json
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("cache"))?;
        fs::create_dir_all(root.join("configs"))?;
        Ok(Self { root })
    }

    /// Opens an existing run without creating anything.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let root = root.into();
        if !root.is_dir() {
            return Err(TrainError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("run directory {} does not exist", root.display()),
            )));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self, name: &str) -> PathBuf {
        self.root.join("configs").join(format!("{name}.json"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn cache(&self, name: &str) -> PathBuf {
        self.root.join("cache").join(format!("{name}.json"))
    }

    pub fn write_config(&self, name: &str, config: &TrainConfig) -> Result<(), TrainError> {
        let json = serde_json::to_string_pretty(config).map_err(|e| TrainError::Format(e.to_string()))?;
        fs::write(self.config_path(name), json)?;
        Ok(())
    }

    pub fn read_config(&self, name: &str) -> Result<TrainConfig, TrainError> {
        let raw = fs::read_to_string(self.config_path(name))?;
        serde_json::from_str(&raw).map_err(|e| TrainError::Format(e.to_string()))
    }

    /// Stores the vocabulary and every row of the embedding table, so later stages see
    /// exactly the same inputs.
    pub fn save_embedder(&self, emb: &Embedder) -> Result<(), TrainError> {
        let vocab = serde_json::to_string(&emb.vocab).map_err(|e| TrainError::Format(e.to_string()))?;
        fs::write(self.root.join("vocab.json"), vocab)?;
        let pairs: Vec<(String, Vec<f64>)> =
            emb.vocab.tokens().iter().enumerate().map(|(i, t)| (t.clone(), emb.table.row(i).to_vec())).collect();
        let mut w = BufWriter::new(File::create(self.root.join("vectors.txt"))?);
        EmbeddingTable::write_pairs(&mut w, &pairs, emb.dim())?;
        w.flush()?;
        Ok(())
    }

    pub fn load_embedder(&self) -> Result<Embedder, TrainError> {
        let raw = fs::read_to_string(self.root.join("vocab.json"))?;
        let vocab: Vocab = serde_json::from_str(&raw).map_err(|e| TrainError::Format(e.to_string()))?;
        let table = EmbeddingTable::load(&self.root.join("vectors.txt"), &vocab)?;
        Ok(Embedder::new(vocab, table))
    }

    /// Observer appending one JSON line per finished epoch to `metrics.jsonl`.
    pub fn metrics_writer(&self, tag: &str) -> Result<JsonlObserver, TrainError> {
        let f = OpenOptions::new().create(true).append(true).open(self.metrics_path())?;
        Ok(JsonlObserver { out: BufWriter::new(f), tag: tag.to_string() })
    }
}

pub struct JsonlObserver {
    out: BufWriter<File>,
    tag: String,
}

impl TrainObserver for JsonlObserver {
    fn on_event(&mut self, event: &TrainEvent) {
        if let TrainEvent::EpochEnd(m) = event {
            let mut line = serde_json::to_value(m).expect("metrics serialize");
            line["stage"] = serde_json::Value::String(self.tag.clone());
            if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
                log::warn!("could not write metrics: {e}");
            }
        }
    }
}
