//! Configuration, synthetic data, training and evaluation glue.

mod config;
mod examples;
mod session;
mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub use config::{HistoryMode, PipelineConfig};
pub use examples::{attach_distractors, reader_answers_on_gold, reader_examples, retrieval_examples};
pub use session::{run_session, run_sessions, SessionModels, SessionSettings, SessionState};
pub use synth::{generate_synthetic, resolved_entity, SynthData, SynthSpec, MAX_TURNS};

use crate::corpus::{
    load_conversations, load_passages, validate_gold, write_conversations, write_passages,
    Conversation, PassageCollection,
};
use crate::encoder::{init_params, EncoderParams};
use crate::error::Result;
use crate::evalkit::{
    evaluate, per_turn_tsv, save_metrics, save_predictions, save_trec, MetricsReport, Prediction,
    TurnKey, TurnResult,
};
use crate::reader::{train_reader, ReadOptions, ReaderParams};
use crate::retriever::{build_index, train_student, train_teacher, DenseIndex, RankedList, StudentObjective, TrainReport};

pub const TEACHER_QUESTION_FILE: &str = "teacher_question.cadr";
pub const PASSAGE_ENCODER_FILE: &str = "passage_encoder.cadr";
pub const STUDENT_FILE: &str = "student.cadr";
pub const READER_FILE: &str = "reader.cadr";
pub const INDEX_FILE: &str = "index.cidx";

pub fn synth_spec(config: &PipelineConfig) -> SynthSpec {
    SynthSpec {
        subjects: config.synth_subjects,
        eval_conversations: config.synth_conversations,
        turns: config.synth_turns,
        seed: config.seed,
    }
}

pub fn read_options(config: &PipelineConfig) -> ReadOptions {
    ReadOptions {
        fusion: config.fusion,
        max_passage_tokens: config.max_seq_length,
    }
}

pub fn session_settings(config: &PipelineConfig, history: HistoryMode) -> SessionSettings {
    SessionSettings {
        history,
        retrieval_depth: config.retrieval_depth,
        top_k: config.top_k,
        max_query_tokens: config.max_question_length,
        read: read_options(config),
        reader_sees_answers: config.reader_sees_answers,
    }
}

/// Writes the three data files named in `config`.
pub fn write_synthetic(config: &PipelineConfig, data: &SynthData) -> Result<()> {
    for path in [&config.passages, &config.conversations, &config.train_conversations] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_passages(&config.passages, &data.passages)?;
    write_conversations(&config.conversations, &data.conversations)?;
    write_conversations(&config.train_conversations, &data.train_conversations)
}

/// Passages plus evaluation and training conversations, gold spans checked.
pub fn load_data(config: &PipelineConfig) -> Result<(PassageCollection, Vec<Conversation>, Vec<Conversation>)> {
    let passages = load_passages(&config.passages)?;
    let eval = load_conversations(&config.conversations)?;
    let train = load_conversations(&config.train_conversations)?;
    validate_gold(&eval, &passages)?;
    validate_gold(&train, &passages)?;
    Ok((passages, eval, train))
}

/// Teacher question and passage encoders, trained on rewrites. Both start
/// from the same draw.
pub fn train_teacher_pair(
    config: &PipelineConfig,
    collection: &PassageCollection,
    train: &[Conversation],
) -> Result<(EncoderParams, EncoderParams, TrainReport)> {
    let examples = retrieval_examples(
        train,
        collection,
        HistoryMode::Gold,
        &BTreeMap::new(),
        config.max_question_length,
    )?;
    let mut question = init_params(config.vocab_buckets, config.embed_dim, config.seed, config.init_scale)?;
    let mut passage = question.clone();
    let report = train_teacher(&mut question, &mut passage, &examples, collection, &config.teacher_hyper())?;
    Ok((question, passage, report))
}

/// Reader trained on gold passages; each shares its softmax with the
/// passages the teacher ranks highest for the turn's rewrite.
pub fn train_reader_model(
    config: &PipelineConfig,
    collection: &PassageCollection,
    train: &[Conversation],
    teacher_question: &EncoderParams,
    index: &DenseIndex,
) -> Result<(ReaderParams, TrainReport)> {
    let mut examples = reader_examples(train, collection, config.reader_sees_answers, config.max_question_length)?;
    let queries: Vec<Vec<String>> = retrieval_examples(
        train,
        collection,
        HistoryMode::Gold,
        &BTreeMap::new(),
        config.max_question_length,
    )?
    .into_iter()
    .map(|ex| ex.rewrite.unwrap_or(ex.query))
    .collect();
    attach_distractors(&mut examples, &queries, teacher_question, index, config.reader_distractors)?;
    let mut reader = ReaderParams::init(
        config.vocab_buckets,
        config.embed_dim,
        config.seed.wrapping_add(100),
        config.init_scale,
        config.max_answer_length,
    )?;
    let report = train_reader(&mut reader, &examples, collection, &config.reader_hyper(), config.max_seq_length)?;
    Ok((reader, report))
}

/// Student question encoder, started from the teacher question encoder and
/// trained on composed queries against the frozen index.
pub fn train_student_model(
    config: &PipelineConfig,
    collection: &PassageCollection,
    train: &[Conversation],
    teacher_question: &EncoderParams,
    index: &DenseIndex,
    reader: &ReaderParams,
) -> Result<(EncoderParams, TrainReport)> {
    let predicted = if config.train_history_source == HistoryMode::Predicted {
        reader_answers_on_gold(train, collection, reader, &read_options(config), config.max_question_length)?
    } else {
        BTreeMap::new()
    };
    let examples = retrieval_examples(
        train,
        collection,
        config.train_history_source,
        &predicted,
        config.max_question_length,
    )?;
    let mut student = teacher_question.clone();
    let report = train_student(
        &mut student,
        index,
        teacher_question,
        &examples,
        &config.student_hyper(),
        StudentObjective::Multitask,
    )?;
    Ok((student, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModels {
    pub teacher_question: EncoderParams,
    pub passage_encoder: EncoderParams,
    pub student: EncoderParams,
    pub reader: ReaderParams,
    pub index: DenseIndex,
}

impl TrainedModels {
    pub fn session_models<'a>(&'a self, collection: &'a PassageCollection) -> SessionModels<'a> {
        SessionModels {
            collection,
            index: &self.index,
            question_encoder: &self.student,
            reader: &self.reader,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.teacher_question.save(dir.join(TEACHER_QUESTION_FILE))?;
        self.passage_encoder.save(dir.join(PASSAGE_ENCODER_FILE))?;
        self.student.save(dir.join(STUDENT_FILE))?;
        self.reader.save(dir.join(READER_FILE))?;
        self.index.save(dir.join(INDEX_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(TrainedModels {
            teacher_question: EncoderParams::load(dir.join(TEACHER_QUESTION_FILE))?,
            passage_encoder: EncoderParams::load(dir.join(PASSAGE_ENCODER_FILE))?,
            student: EncoderParams::load(dir.join(STUDENT_FILE))?,
            reader: ReaderParams::load(dir.join(READER_FILE))?,
            index: DenseIndex::load(dir.join(INDEX_FILE))?,
        })
    }
}

/// Teacher, index, reader, then student.
pub fn train_all(
    config: &PipelineConfig,
    collection: &PassageCollection,
    train: &[Conversation],
) -> Result<TrainedModels> {
    let (teacher_question, passage_encoder, _) = train_teacher_pair(config, collection, train)?;
    let index = build_index(&passage_encoder, collection)?;
    let (reader, _) = train_reader_model(config, collection, train, &teacher_question, &index)?;
    let (student, _) = train_student_model(config, collection, train, &teacher_question, &index, &reader)?;
    Ok(TrainedModels {
        teacher_question,
        passage_encoder,
        student,
        reader,
        index,
    })
}

/// Everything one evaluation pass over a history mode produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeOutcome {
    pub mode: HistoryMode,
    pub runs: BTreeMap<TurnKey, RankedList>,
    pub predictions: Vec<Prediction>,
    pub results: Vec<TurnResult>,
    pub report: MetricsReport,
}

pub fn run_mode(
    config: &PipelineConfig,
    collection: &PassageCollection,
    conversations: &[Conversation],
    models: &TrainedModels,
    mode: HistoryMode,
) -> Result<ModeOutcome> {
    let sessions = run_sessions(
        conversations,
        models.session_models(collection),
        &session_settings(config, mode),
    )?;
    let mut runs = BTreeMap::new();
    let mut predictions = Vec::new();
    let mut results = Vec::new();
    for s in sessions {
        for (p, r) in s.predictions.iter().zip(s.rankings) {
            runs.insert((p.cid.clone(), p.turn), r);
        }
        predictions.extend(s.predictions);
        results.extend(s.results);
    }
    let report = evaluate(&results, Some(config.human_f1_fallback))?;
    Ok(ModeOutcome {
        mode,
        runs,
        predictions,
        results,
        report,
    })
}

pub fn run_file(dir: &Path, mode: HistoryMode) -> PathBuf {
    dir.join(format!("run_{}.trec", mode.name()))
}

pub fn predictions_file(dir: &Path, mode: HistoryMode) -> PathBuf {
    dir.join(format!("predictions_{}.jsonl", mode.name()))
}

pub fn metrics_file(dir: &Path, mode: HistoryMode) -> PathBuf {
    dir.join(format!("metrics_{}.json", mode.name()))
}

pub fn per_turn_file(dir: &Path, mode: HistoryMode) -> PathBuf {
    dir.join(format!("per_turn_{}.tsv", mode.name()))
}

pub fn run_tag(mode: HistoryMode) -> String {
    format!("cqa-{}", mode.name())
}

/// Writes the run file, predictions, metrics JSON and per-turn table.
pub fn save_outcome(dir: &Path, outcome: &ModeOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_trec(run_file(dir, outcome.mode), &outcome.runs, &run_tag(outcome.mode))?;
    save_predictions(predictions_file(dir, outcome.mode), &outcome.predictions)?;
    save_metrics(metrics_file(dir, outcome.mode), &outcome.report)?;
    std::fs::write(per_turn_file(dir, outcome.mode), per_turn_tsv(&outcome.report.per_turn))?;
    Ok(())
}

/// Per-turn mean F1 of `a` minus that of `b`, for turns present in both.
pub fn per_turn_advantage(a: &MetricsReport, b: &MetricsReport) -> Vec<(usize, f64)> {
    a.per_turn
        .iter()
        .filter_map(|x| {
            b.per_turn
                .iter()
                .find(|y| y.turn == x.turn)
                .map(|y| (x.turn, x.mean_f1 - y.mean_f1))
        })
        .collect()
}

/// Turn-by-turn comparison table: `turn, mean_f1, count, baseline_f1, delta`.
pub fn advantage_tsv(a: &MetricsReport, b: &MetricsReport) -> String {
    let mut s = String::from("turn\tmean_f1\tcount\tbaseline_f1\tdelta\n");
    for x in &a.per_turn {
        if let Some(y) = b.per_turn.iter().find(|y| y.turn == x.turn) {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                x.turn,
                x.mean_f1,
                x.count,
                y.mean_f1,
                x.mean_f1 - y.mean_f1
            ));
        }
    }
    s
}

/// Synthetic data, trained models and all three history modes, in memory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub data: SynthData,
    pub models: TrainedModels,
    pub outcomes: BTreeMap<&'static str, ModeOutcome>,
}

impl Experiment {
    pub fn outcome(&self, mode: HistoryMode) -> &ModeOutcome {
        &self.outcomes[mode.name()]
    }
}

pub fn run_experiment(config: &PipelineConfig) -> Result<Experiment> {
    config.validate()?;
    let data = generate_synthetic(&synth_spec(config))?;
    let models = train_all(config, &data.passages, &data.train_conversations)?;
    let mut outcomes = BTreeMap::new();
    for mode in HistoryMode::ALL {
        let o = run_mode(config, &data.passages, &data.conversations, &models, mode)?;
        outcomes.insert(mode.name(), o);
    }
    Ok(Experiment {
        data,
        models,
        outcomes,
    })
}
