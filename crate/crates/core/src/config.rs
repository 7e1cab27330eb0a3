//! Plain-text `key = value` experiment configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adapters::{AdapterConfig, AdapterKind};
use crate::corpus::{SynthSpec, DEFAULT_VOCAB_CAP};
use crate::distillation::TrainConfig;
use crate::encoder::{EncoderConfig, EncoderMode};
use crate::error::{Error, Result};

/// Encoder shape without the vocabulary, which comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
}

impl EncoderShape {
    pub fn with_vocab(&self, vocab_size: usize, mode: EncoderMode) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len,
            mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Existing dataset directory; the synthetic generator is used when unset.
    pub data_dir: Option<PathBuf>,
    pub synth: SynthSpec,
    pub vocab_cap: usize,
    pub mode: EncoderMode,
    pub student: EncoderShape,
    pub teacher: EncoderShape,
    pub adapter: AdapterConfig,
    pub full_train: TrainConfig,
    pub adapter_train: TrainConfig,
    pub gate_train: TrainConfig,
    pub negatives_depth: usize,
    pub rerank_depth: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    /// Desk-scale profile: bi-encoder, Houlsby adapters, teacher equal in
    /// shape to the student, learning rates and epochs sized for a single
    /// CPU core.
    fn default() -> Self {
        let student = EncoderShape { hidden_dim: 64, num_layers: 2, num_heads: 4, ffn_dim: 128, max_seq_len: 128 };
        ExperimentConfig {
            data_dir: None,
            synth: SynthSpec::default(),
            vocab_cap: DEFAULT_VOCAB_CAP,
            mode: EncoderMode::Bi,
            student,
            teacher: student,
            adapter: AdapterConfig::houlsby(4),
            full_train: TrainConfig { epochs: 8, batch_size: 16, learning_rate: 1e-3, ..TrainConfig::full_model() },
            adapter_train: TrainConfig { epochs: 8, batch_size: 16, learning_rate: 1e-3, ..TrainConfig::adapter() },
            gate_train: TrainConfig { epochs: 10, batch_size: 16, learning_rate: 1e-3, ..TrainConfig::gate() },
            negatives_depth: 20,
            rerank_depth: 100,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("out"),
            jobs: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_str(&text, base)
    }

    /// Parses overrides on top of the defaults; relative paths resolve
    /// against `base`.
    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.out_dir = base.join(&c.out_dir);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got {line:?}") })?;
            c.set(key.trim(), value.trim(), base)
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let s = &mut self.synth;
        match key {
            "data_dir" => self.data_dir = Some(base.join(v)),
            "out" => self.out_dir = base.join(v),
            "synth.num_domains" => s.num_domains = parse(key, v)?,
            "synth.vocab_per_domain" => s.vocab_per_domain = parse(key, v)?,
            "synth.shared_fraction" => s.shared_fraction = parse(key, v)?,
            "synth.topics_per_domain" => s.topics_per_domain = parse(key, v)?,
            "synth.docs_per_domain" => s.docs_per_domain = parse(key, v)?,
            "synth.train_queries" => s.train_queries = parse(key, v)?,
            "synth.val_queries" => s.val_queries = parse(key, v)?,
            "synth.test_queries" => s.test_queries = parse(key, v)?,
            "synth.min_relevant" => s.min_relevant = parse(key, v)?,
            "synth.max_relevant" => s.max_relevant = parse(key, v)?,
            "synth.min_doc_len" => s.doc_len.0 = parse(key, v)?,
            "synth.max_doc_len" => s.doc_len.1 = parse(key, v)?,
            "synth.min_query_len" => s.query_len.0 = parse(key, v)?,
            "synth.max_query_len" => s.query_len.1 = parse(key, v)?,
            "synth.topic_purity" => s.topic_purity = parse(key, v)?,
            "synth.copy_rate" => s.copy_rate = parse(key, v)?,
            "synth.query_noise" => s.query_noise = parse(key, v)?,
            "vocab_cap" => self.vocab_cap = parse(key, v)?,
            "encoder.mode" => self.mode = parse(key, v)?,
            "encoder.hidden_dim" => self.student.hidden_dim = parse(key, v)?,
            "encoder.num_layers" => self.student.num_layers = parse(key, v)?,
            "encoder.num_heads" => self.student.num_heads = parse(key, v)?,
            "encoder.ffn_dim" => self.student.ffn_dim = parse(key, v)?,
            "encoder.max_seq_len" => {
                self.student.max_seq_len = parse(key, v)?;
                self.teacher.max_seq_len = self.student.max_seq_len;
            }
            "teacher.hidden_dim" => self.teacher.hidden_dim = parse(key, v)?,
            "teacher.num_layers" => self.teacher.num_layers = parse(key, v)?,
            "teacher.num_heads" => self.teacher.num_heads = parse(key, v)?,
            "teacher.ffn_dim" => self.teacher.ffn_dim = parse(key, v)?,
            "adapter.kind" => self.adapter.kind = parse::<AdapterKind>(key, v)?,
            "adapter.reduction_factor" => self.adapter.reduction_factor = parse(key, v)?,
            "adapter.rank" => self.adapter.rank = parse(key, v)?,
            "adapter.alpha" => self.adapter.alpha = parse(key, v)?,
            "train.epochs" => self.full_train.epochs = parse(key, v)?,
            "train.batch_size" => self.full_train.batch_size = parse(key, v)?,
            "train.lr" => self.full_train.learning_rate = parse(key, v)?,
            "adapter_train.epochs" => self.adapter_train.epochs = parse(key, v)?,
            "adapter_train.batch_size" => self.adapter_train.batch_size = parse(key, v)?,
            "adapter_train.lr" => self.adapter_train.learning_rate = parse(key, v)?,
            "gate_train.epochs" => self.gate_train.epochs = parse(key, v)?,
            "gate_train.batch_size" => self.gate_train.batch_size = parse(key, v)?,
            "gate_train.lr" => self.gate_train.learning_rate = parse(key, v)?,
            "margin" => {
                let m: f64 = parse(key, v)?;
                self.full_train.margin = m;
                self.adapter_train.margin = m;
                self.gate_train.margin = m;
            }
            "distill_weight" => self.adapter_train.distill_weight = parse(key, v)?,
            "negatives_depth" => self.negatives_depth = parse(key, v)?,
            "rerank_depth" => self.rerank_depth = parse(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|x| parse::<u64>(key, x.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "jobs" => self.jobs = parse(key, v)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dir.is_none() {
            self.synth.validate()?;
        }
        for shape in [self.student, self.teacher] {
            shape.with_vocab(1, self.mode).validate()?;
        }
        self.full_train.validate()?;
        self.adapter_train.validate()?;
        self.gate_train.validate()?;
        if self.negatives_depth == 0 || self.rerank_depth == 0 {
            return Err(Error::config("negatives_depth and rerank_depth must be ≥ 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be ≥ 1"));
        }
        if self.vocab_cap == 0 {
            return Err(Error::config("vocab_cap must be ≥ 1"));
        }
        Ok(())
    }

    pub fn teacher_is_student(&self) -> bool {
        self.teacher == self.student
    }

    /// Resolved configuration in the same syntax, for the run record.
    pub fn render(&self) -> String {
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        if let Some(d) = &self.data_dir {
            kv("data_dir", d.display().to_string());
        }
        kv("synth.num_domains", s.num_domains.to_string());
        kv("synth.vocab_per_domain", s.vocab_per_domain.to_string());
        kv("synth.shared_fraction", s.shared_fraction.to_string());
        kv("synth.topics_per_domain", s.topics_per_domain.to_string());
        kv("synth.docs_per_domain", s.docs_per_domain.to_string());
        kv("synth.train_queries", s.train_queries.to_string());
        kv("synth.val_queries", s.val_queries.to_string());
        kv("synth.test_queries", s.test_queries.to_string());
        kv("synth.min_relevant", s.min_relevant.to_string());
        kv("synth.max_relevant", s.max_relevant.to_string());
        kv("synth.min_doc_len", s.doc_len.0.to_string());
        kv("synth.max_doc_len", s.doc_len.1.to_string());
        kv("synth.min_query_len", s.query_len.0.to_string());
        kv("synth.max_query_len", s.query_len.1.to_string());
        kv("synth.topic_purity", s.topic_purity.to_string());
        kv("synth.copy_rate", s.copy_rate.to_string());
        kv("synth.query_noise", s.query_noise.to_string());
        kv("vocab_cap", self.vocab_cap.to_string());
        kv("encoder.mode", self.mode.name().to_string());
        kv("encoder.hidden_dim", self.student.hidden_dim.to_string());
        kv("encoder.num_layers", self.student.num_layers.to_string());
        kv("encoder.num_heads", self.student.num_heads.to_string());
        kv("encoder.ffn_dim", self.student.ffn_dim.to_string());
        kv("encoder.max_seq_len", self.student.max_seq_len.to_string());
        kv("teacher.hidden_dim", self.teacher.hidden_dim.to_string());
        kv("teacher.num_layers", self.teacher.num_layers.to_string());
        kv("teacher.num_heads", self.teacher.num_heads.to_string());
        kv("teacher.ffn_dim", self.teacher.ffn_dim.to_string());
        kv("adapter.kind", self.adapter.kind.name().to_string());
        kv("adapter.reduction_factor", self.adapter.reduction_factor.to_string());
        kv("adapter.rank", self.adapter.rank.to_string());
        kv("adapter.alpha", self.adapter.alpha.to_string());
        kv("train.epochs", self.full_train.epochs.to_string());
        kv("train.batch_size", self.full_train.batch_size.to_string());
        kv("train.lr", self.full_train.learning_rate.to_string());
        kv("adapter_train.epochs", self.adapter_train.epochs.to_string());
        kv("adapter_train.batch_size", self.adapter_train.batch_size.to_string());
        kv("adapter_train.lr", self.adapter_train.learning_rate.to_string());
        kv("gate_train.epochs", self.gate_train.epochs.to_string());
        kv("gate_train.batch_size", self.gate_train.batch_size.to_string());
        kv("gate_train.lr", self.gate_train.learning_rate.to_string());
        kv("margin", self.full_train.margin.to_string());
        kv("distill_weight", self.adapter_train.distill_weight.to_string());
        kv("negatives_depth", self.negatives_depth.to_string());
        kv("rerank_depth", self.rerank_depth.to_string());
        kv("seeds", self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        kv("jobs", self.jobs.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_relative_paths() {
        let c = ExperimentConfig::parse_str(
            "# profile\nsynth.shared_fraction = 0.5\nseeds = 3, 4\nout = runs\nadapter.kind = lora\ndata_dir = d\n",
            Path::new("/cfg"),
        )
        .unwrap();
        assert_eq!(c.synth.shared_fraction, 0.5);
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.out_dir, PathBuf::from("/cfg/runs"));
        assert_eq!(c.data_dir, Some(PathBuf::from("/cfg/d")));
        assert_eq!(c.adapter.kind, AdapterKind::Lora);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let err = ExperimentConfig::parse_str("colour = blue\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, ref msg } if msg.contains("colour")));
        assert!(ExperimentConfig::parse_str("margin = -1\n", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse_str("seeds = a\n", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse_str("jobs\n", Path::new(".")).is_err());
    }

    #[test]
    fn render_round_trips() {
        let c = ExperimentConfig::parse_str("encoder.mode = cross\nmargin = 0.2\n", Path::new("/x")).unwrap();
        let back = ExperimentConfig::parse_str(&c.render(), Path::new("/x")).unwrap();
        assert_eq!(back, c);
    }
}
