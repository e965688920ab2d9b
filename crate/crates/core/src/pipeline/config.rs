//! Flat TOML configuration with `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::composer::{AnswerSource, ComposeMode};
use crate::error::{Error, Result};
use crate::reader::FusionMode;
use crate::retriever::TrainHyper;

/// Which answers a composed query carries for earlier turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// Questions only.
    None,
    /// The reader's own earlier answers.
    Predicted,
    /// Ground-truth earlier answers.
    Gold,
}

impl HistoryMode {
    pub const ALL: [HistoryMode; 3] = [HistoryMode::None, HistoryMode::Predicted, HistoryMode::Gold];

    pub fn compose_mode(self) -> ComposeMode {
        match self {
            HistoryMode::None => ComposeMode::QuestionOnly,
            _ => ComposeMode::AnswerAware,
        }
    }

    pub fn answer_source(self) -> Option<AnswerSource> {
        match self {
            HistoryMode::None => None,
            HistoryMode::Predicted => Some(AnswerSource::Predicted),
            HistoryMode::Gold => Some(AnswerSource::Gold),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HistoryMode::None => "none",
            HistoryMode::Predicted => "predicted",
            HistoryMode::Gold => "gold",
        }
    }
}

impl std::str::FromStr for HistoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HistoryMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown history mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,

    pub vocab_buckets: usize,
    pub embed_dim: usize,
    pub init_scale: f64,

    pub retriever_learning_rate: f64,
    pub retriever_epochs: usize,
    pub retriever_batch_size: usize,
    pub reader_learning_rate: f64,
    pub reader_epochs: usize,
    pub reader_batch_size: usize,
    /// Retrieved non-gold passages sharing each reader example's softmax.
    pub reader_distractors: usize,

    /// Passage tokens the reader sees.
    pub max_seq_length: usize,
    /// Budget of a composed query, separators included.
    pub max_question_length: usize,
    /// Ranked passages kept per turn in run files.
    pub retrieval_depth: usize,
    /// Leading ranked passages the reader reads.
    pub top_k: usize,
    pub max_answer_length: usize,
    pub fusion: FusionMode,

    pub history_answer_source: HistoryMode,
    pub train_history_source: HistoryMode,
    /// Whether the reader's question input also carries earlier answers.
    pub reader_sees_answers: bool,
    /// Human F1 assumed for turns that carry none.
    pub human_f1_fallback: f64,

    pub synth_subjects: usize,
    pub synth_conversations: usize,
    pub synth_turns: usize,

    pub passages: PathBuf,
    pub conversations: PathBuf,
    pub train_conversations: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 13,
            vocab_buckets: 4096,
            embed_dim: 64,
            init_scale: 1.0,
            retriever_learning_rate: 0.05,
            retriever_epochs: 100,
            retriever_batch_size: 16,
            reader_learning_rate: 0.05,
            reader_epochs: 20,
            reader_batch_size: 16,
            reader_distractors: 0,
            max_seq_length: 512,
            max_question_length: 125,
            retrieval_depth: 10,
            top_k: 1,
            max_answer_length: 30,
            fusion: FusionMode::Normalized,
            history_answer_source: HistoryMode::Predicted,
            train_history_source: HistoryMode::Gold,
            reader_sees_answers: false,
            human_f1_fallback: 1.0,
            synth_subjects: 100,
            synth_conversations: 100,
            synth_turns: 4,
            passages: "data/passages.jsonl".into(),
            conversations: "data/conversations.jsonl".into(),
            train_conversations: "data/train_conversations.jsonl".into(),
            out_dir: "out".into(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies one `key=value` override. Values are parsed as TOML, falling
    /// back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        table.insert(key.to_string(), value);
        let updated: PipelineConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_buckets", self.vocab_buckets),
            ("embed_dim", self.embed_dim),
            ("retriever_batch_size", self.retriever_batch_size),
            ("reader_batch_size", self.reader_batch_size),
            ("max_seq_length", self.max_seq_length),
            ("max_question_length", self.max_question_length),
            ("retrieval_depth", self.retrieval_depth),
            ("top_k", self.top_k),
            ("max_answer_length", self.max_answer_length),
            ("synth_subjects", self.synth_subjects),
            ("synth_turns", self.synth_turns),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let reals = [
            ("init_scale", self.init_scale),
            ("retriever_learning_rate", self.retriever_learning_rate),
            ("reader_learning_rate", self.reader_learning_rate),
        ];
        for (name, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.human_f1_fallback) {
            return Err(Error::Config(format!(
                "human_f1_fallback {} outside [0, 1]",
                self.human_f1_fallback
            )));
        }
        Ok(())
    }

    pub fn teacher_hyper(&self) -> TrainHyper {
        TrainHyper {
            learning_rate: self.retriever_learning_rate,
            epochs: self.retriever_epochs,
            batch_size: self.retriever_batch_size,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn student_hyper(&self) -> TrainHyper {
        TrainHyper {
            seed: self.seed.wrapping_add(2),
            ..self.teacher_hyper()
        }
    }

    pub fn reader_hyper(&self) -> TrainHyper {
        TrainHyper {
            learning_rate: self.reader_learning_rate,
            epochs: self.reader_epochs,
            batch_size: self.reader_batch_size,
            seed: self.seed.wrapping_add(3),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        let mut d = c.clone();
        d.human_f1_fallback = 0.25;
        d.fusion = FusionMode::Literal;
        assert_eq!(PipelineConfig::from_toml(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = PipelineConfig::from_toml("top_k = 3\nhistory_answer_source = \"gold\"\n").unwrap();
        assert_eq!(c.top_k, 3);
        assert_eq!(c.history_answer_source, HistoryMode::Gold);
        assert_eq!(c.embed_dim, 64);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(PipelineConfig::from_toml("topk = 3").is_err());
        assert!(PipelineConfig::from_toml("top_k = 0").is_err());
        assert!(PipelineConfig::from_toml("fusion = \"mean\"").is_err());
        assert!(PipelineConfig::from_toml("init_scale = -1.0").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = PipelineConfig::default();
        c.set("top_k=7").unwrap();
        c.set("fusion = literal").unwrap();
        c.set("out_dir=/tmp/x").unwrap();
        assert_eq!(c.top_k, 7);
        assert_eq!(c.fusion, FusionMode::Literal);
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
        c.set("human_f1_fallback=0.5").unwrap();
        assert_eq!(c.human_f1_fallback, 0.5);
        assert!(c.set("human_f1_fallback=2").is_err());
        assert!(c.set("nope=1").is_err());
        assert!(c.set("top_k=zero").is_err());
        assert!(c.set("top_k").is_err());
        assert_eq!(c.top_k, 7);
    }
}
