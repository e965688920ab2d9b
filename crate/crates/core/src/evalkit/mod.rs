//! Retrieval and answer metrics, plus the result file formats they read.

mod io;
mod metrics;

pub use io::{
    assemble_results, load_predictions, load_trec, metrics_json, parse_qid, per_turn_tsv, qid,
    read_predictions, read_trec, save_metrics, save_predictions, save_trec, write_trec,
    Prediction, TurnKey,
};
pub use metrics::{
    average_precision_at_k, evaluate, heq_d, heq_q, per_turn_accuracy, recall_at_k,
    reciprocal_rank_at_k, word_f1, MetricsReport, TurnBucket, TurnResult,
};
