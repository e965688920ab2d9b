use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cqa_core::corpus::{load_conversations, load_passages, validate_gold};
use cqa_core::evalkit::{
    assemble_results, evaluate, load_predictions, load_trec, metrics_json, per_turn_tsv,
    save_predictions, save_trec,
};
use cqa_core::pipeline::{
    advantage_tsv, generate_synthetic, load_data, metrics_file, per_turn_file, predictions_file,
    run_file, run_mode, run_tag, synth_spec, train_reader_model, train_student_model,
    train_teacher_pair, write_synthetic, HistoryMode, PipelineConfig, TrainedModels,
    INDEX_FILE, PASSAGE_ENCODER_FILE, READER_FILE, STUDENT_FILE, TEACHER_QUESTION_FILE,
};
use cqa_core::retriever::{build_index, DenseIndex, TrainReport};
use cqa_core::{EncoderParams, MetricsReport, ReaderParams};

#[derive(Parser)]
#[command(name = "cqa", version, about = "Conversational QA: answer-aware dense retrieval and span reading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        for o in &self.overrides {
            config.set(o)?;
        }
        Ok(config)
    }
}

#[derive(Args)]
struct ModeArgs {
    /// History mode; defaults to the config's `history_answer_source`.
    #[arg(long)]
    mode: Option<HistoryMode>,
}

impl ModeArgs {
    fn get(&self, config: &PipelineConfig) -> HistoryMode {
        self.mode.unwrap_or(config.history_answer_source)
    }
}

#[derive(Args)]
struct ResultArgs {
    #[command(flatten)]
    mode: ModeArgs,
    /// TREC run file; defaults to the mode's file in `out_dir`.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Predictions JSONL; defaults to the mode's file in `out_dir`.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration as TOML.
    Config(Common),
    /// Validate the passage and conversation files.
    Ingest(Common),
    /// Write a synthetic corpus to the configured data paths.
    Gen(Common),
    /// Train the teacher question and passage encoders on rewrites.
    TrainTeacher(Common),
    /// Encode every passage with the frozen passage encoder.
    Index(Common),
    /// Train the span reader.
    TrainReader(Common),
    /// Train the student question encoder on answer-aware queries.
    TrainRetriever(Common),
    /// Run conversational sessions; writes a TREC run and predictions.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mode: ModeArgs,
    },
    /// Score a run and its predictions; writes metrics JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        result: ResultArgs,
        /// Metrics output path; defaults to the mode's file in `out_dir`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Mean F1 per turn; with a baseline, the per-turn difference.
    AnalyzeTurns {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        result: ResultArgs,
        /// Mode to compare against, read from its files in `out_dir`.
        #[arg(long)]
        baseline: Option<HistoryMode>,
        /// Table output path; defaults to the mode's file in `out_dir`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Config(c) => {
            print!("{}", c.resolve()?.to_toml());
            Ok(())
        }
        Command::Ingest(c) => ingest(&c.resolve()?),
        Command::Gen(c) => gen(&c.resolve()?),
        Command::TrainTeacher(c) => train_teacher(&c.resolve()?),
        Command::Index(c) => index(&c.resolve()?),
        Command::TrainReader(c) => train_reader(&c.resolve()?),
        Command::TrainRetriever(c) => train_retriever(&c.resolve()?),
        Command::Run { common, mode } => {
            let config = common.resolve()?;
            run(&config, mode.get(&config))
        }
        Command::Eval {
            common,
            result,
            output,
        } => {
            let config = common.resolve()?;
            eval(&config, &result, output)
        }
        Command::AnalyzeTurns {
            common,
            result,
            baseline,
            output,
        } => {
            let config = common.resolve()?;
            analyze_turns(&config, &result, baseline, output)
        }
    }
}

fn out_path(config: &PipelineConfig, name: &str) -> PathBuf {
    config.out_dir.join(name)
}

fn create_out_dir(config: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating {}", config.out_dir.display()))
}

fn load_encoder(config: &PipelineConfig, name: &str) -> Result<EncoderParams> {
    let path = out_path(config, name);
    EncoderParams::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn load_index(config: &PipelineConfig) -> Result<DenseIndex> {
    let path = out_path(config, INDEX_FILE);
    DenseIndex::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn load_reader(config: &PipelineConfig) -> Result<ReaderParams> {
    let path = out_path(config, READER_FILE);
    ReaderParams::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn log_training(what: &str, report: &TrainReport, started: Instant) {
    let first = report.epoch_loss.first().copied().unwrap_or(f64::NAN);
    let last = report.epoch_loss.last().copied().unwrap_or(f64::NAN);
    eprintln!(
        "{what}: {} epochs, loss {first:.4} -> {last:.4} ({:.1}s)",
        report.epoch_loss.len(),
        started.elapsed().as_secs_f64()
    );
}

fn ingest(config: &PipelineConfig) -> Result<()> {
    let passages = load_passages(&config.passages)?;
    println!("{}: {} passages", config.passages.display(), passages.len());
    for path in [&config.conversations, &config.train_conversations] {
        if !path.exists() {
            println!("{}: not present", path.display());
            continue;
        }
        let convs = load_conversations(path)?;
        validate_gold(&convs, &passages)?;
        let turns: usize = convs.iter().map(|c| c.turns.len()).sum();
        println!("{}: {} conversations, {turns} turns", path.display(), convs.len());
    }
    Ok(())
}

fn gen(config: &PipelineConfig) -> Result<()> {
    let data = generate_synthetic(&synth_spec(config))?;
    write_synthetic(config, &data)?;
    eprintln!(
        "wrote {} passages, {} evaluation and {} training conversations",
        data.passages.len(),
        data.conversations.len(),
        data.train_conversations.len()
    );
    Ok(())
}

fn train_teacher(config: &PipelineConfig) -> Result<()> {
    let (collection, _, train) = load_data(config)?;
    let started = Instant::now();
    let (question, passage, report) = train_teacher_pair(config, &collection, &train)?;
    log_training("teacher", &report, started);
    create_out_dir(config)?;
    question.save(out_path(config, TEACHER_QUESTION_FILE))?;
    passage.save(out_path(config, PASSAGE_ENCODER_FILE))?;
    Ok(())
}

fn index(config: &PipelineConfig) -> Result<()> {
    let collection = load_passages(&config.passages)?;
    let passage = load_encoder(config, PASSAGE_ENCODER_FILE)?;
    let index = build_index(&passage, &collection)?;
    index.save(out_path(config, INDEX_FILE))?;
    eprintln!("indexed {} passages, dim {}", index.len(), index.dim());
    Ok(())
}

fn train_reader(config: &PipelineConfig) -> Result<()> {
    let (collection, _, train) = load_data(config)?;
    let teacher = load_encoder(config, TEACHER_QUESTION_FILE)?;
    let index = load_index(config)?;
    let started = Instant::now();
    let (reader, report) = train_reader_model(config, &collection, &train, &teacher, &index)?;
    log_training("reader", &report, started);
    reader.save(out_path(config, READER_FILE))?;
    Ok(())
}

fn train_retriever(config: &PipelineConfig) -> Result<()> {
    let (collection, _, train) = load_data(config)?;
    let teacher = load_encoder(config, TEACHER_QUESTION_FILE)?;
    let index = load_index(config)?;
    let reader = load_reader(config)?;
    let started = Instant::now();
    let (student, report) = train_student_model(config, &collection, &train, &teacher, &index, &reader)?;
    log_training("student", &report, started);
    student.save(out_path(config, STUDENT_FILE))?;
    Ok(())
}

fn run(config: &PipelineConfig, mode: HistoryMode) -> Result<()> {
    let (collection, eval, _) = load_data(config)?;
    let models = TrainedModels::load(&config.out_dir)
        .with_context(|| format!("loading models from {}", config.out_dir.display()))?;
    let outcome = run_mode(config, &collection, &eval, &models, mode)?;
    let dir = &config.out_dir;
    save_trec(run_file(dir, mode), &outcome.runs, &run_tag(mode))?;
    save_predictions(predictions_file(dir, mode), &outcome.predictions)?;
    eprintln!(
        "{}: {} turns, wrote {} and {}",
        mode.name(),
        outcome.predictions.len(),
        run_file(dir, mode).display(),
        predictions_file(dir, mode).display()
    );
    Ok(())
}

fn score(config: &PipelineConfig, mode: HistoryMode, run: &Path, predictions: &Path) -> Result<MetricsReport> {
    let conversations = load_conversations(&config.conversations)?;
    let runs = load_trec(run).with_context(|| format!("reading {}", run.display()))?;
    let preds = load_predictions(predictions).with_context(|| format!("reading {}", predictions.display()))?;
    let results = assemble_results(&conversations, &runs, &preds)
        .with_context(|| format!("scoring the {} run", mode.name()))?;
    Ok(evaluate(&results, Some(config.human_f1_fallback))?)
}

fn score_mode(config: &PipelineConfig, result: &ResultArgs) -> Result<(HistoryMode, MetricsReport)> {
    let mode = result.mode.get(config);
    let dir = &config.out_dir;
    let run = result.run.clone().unwrap_or_else(|| run_file(dir, mode));
    let preds = result
        .predictions
        .clone()
        .unwrap_or_else(|| predictions_file(dir, mode));
    Ok((mode, score(config, mode, &run, &preds)?))
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn eval(config: &PipelineConfig, result: &ResultArgs, output: Option<PathBuf>) -> Result<()> {
    let (mode, report) = score_mode(config, result)?;
    let path = output.unwrap_or_else(|| metrics_file(&config.out_dir, mode));
    let json = metrics_json(&report);
    write_output(&path, &json)?;
    print!("{json}");
    Ok(())
}

fn analyze_turns(
    config: &PipelineConfig,
    result: &ResultArgs,
    baseline: Option<HistoryMode>,
    output: Option<PathBuf>,
) -> Result<()> {
    let (mode, report) = score_mode(config, result)?;
    let table = match baseline {
        None => per_turn_tsv(&report.per_turn),
        Some(b) => {
            let dir = &config.out_dir;
            let base = score(config, b, &run_file(dir, b), &predictions_file(dir, b))?;
            advantage_tsv(&report, &base)
        }
    };
    let path = output.unwrap_or_else(|| per_turn_file(&config.out_dir, mode));
    write_output(&path, &table)?;
    print!("{table}");
    Ok(())
}
