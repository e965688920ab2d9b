//! Run files, predictions, metrics and per-turn tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{MetricsReport, TurnBucket, TurnResult};
use crate::corpus::Conversation;
use crate::error::{Error, Result};
use crate::retriever::{RankedList, ScoredPassage};

/// Conversation id and 1-based turn index.
pub type TurnKey = (String, usize);

pub fn qid(cid: &str, turn: usize) -> String {
    format!("{cid}_{turn}")
}

pub fn parse_qid(qid: &str) -> Option<TurnKey> {
    let (cid, turn) = qid.rsplit_once('_')?;
    Some((cid.to_string(), turn.parse().ok()?))
}

fn malformed(origin: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        path: origin.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// One `qid Q0 passage_id rank score tag` line per ranked entry.
pub fn write_trec<'a>(
    w: &mut impl Write,
    runs: impl IntoIterator<Item = (&'a TurnKey, &'a RankedList)>,
    tag: &str,
) -> Result<()> {
    for ((cid, turn), ranked) in runs {
        let q = qid(cid, *turn);
        for (i, e) in ranked.entries.iter().enumerate() {
            writeln!(w, "{q} Q0 {} {} {} {tag}", e.passage_id, i + 1, e.score)?;
        }
    }
    Ok(())
}

/// Ranks within a query must run 1, 2, 3, ... in file order.
pub fn read_trec(reader: impl BufRead, origin: &Path) -> Result<BTreeMap<TurnKey, RankedList>> {
    let mut runs: BTreeMap<TurnKey, RankedList> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(malformed(origin, n, format!("expected 6 fields, got {}", f.len())));
        }
        let key = parse_qid(f[0]).ok_or_else(|| malformed(origin, n, format!("bad qid {:?}", f[0])))?;
        let rank: usize = f[3]
            .parse()
            .map_err(|_| malformed(origin, n, format!("bad rank {:?}", f[3])))?;
        let score: f64 = f[4]
            .parse()
            .map_err(|_| malformed(origin, n, format!("bad score {:?}", f[4])))?;
        let list = runs.entry(key).or_default();
        if rank != list.entries.len() + 1 {
            return Err(malformed(origin, n, format!("rank {rank} out of sequence")));
        }
        list.entries.push(ScoredPassage {
            passage_id: f[2].to_string(),
            score,
        });
        list.k = list.entries.len();
    }
    Ok(runs)
}

pub fn save_trec(path: impl AsRef<Path>, runs: &BTreeMap<TurnKey, RankedList>, tag: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trec(&mut w, runs, tag)?;
    w.flush()?;
    Ok(())
}

pub fn load_trec(path: impl AsRef<Path>) -> Result<BTreeMap<TurnKey, RankedList>> {
    let path = path.as_ref();
    read_trec(BufReader::new(File::open(path)?), path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub cid: String,
    pub turn: usize,
    pub answer: String,
    pub passage_id: String,
    /// `None` when the answer is CANNOTANSWER.
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub s_rt: f64,
    pub s_rd: f64,
    pub combined: f64,
}

pub fn save_predictions(path: impl AsRef<Path>, predictions: &[Prediction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in predictions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(reader: impl BufRead, origin: &Path) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| malformed(origin, i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    read_predictions(BufReader::new(File::open(path)?), path)
}

/// Joins runs and predictions against the conversations' gold answers, in
/// conversation then turn order. Turns without a gold answer are skipped.
pub fn assemble_results(
    conversations: &[Conversation],
    runs: &BTreeMap<TurnKey, RankedList>,
    predictions: &[Prediction],
) -> Result<Vec<TurnResult>> {
    let preds: BTreeMap<TurnKey, &Prediction> = predictions
        .iter()
        .map(|p| ((p.cid.clone(), p.turn), p))
        .collect();
    let mut out = Vec::new();
    for c in conversations {
        for t in &c.turns {
            let Some(gold) = &t.gold else { continue };
            let key = (c.id.clone(), t.turn_index);
            let ranked = runs
                .get(&key)
                .ok_or_else(|| Error::missing(format!("run for {}", qid(&c.id, t.turn_index))))?;
            let pred = preds.get(&key).ok_or_else(|| {
                Error::missing(format!("prediction for {}", qid(&c.id, t.turn_index)))
            })?;
            out.push(TurnResult {
                cid: c.id.clone(),
                turn_index: t.turn_index,
                ranked: ranked.clone(),
                gold_passage_id: gold.passage_id.clone(),
                predicted: pred.answer.clone(),
                gold: gold.text.clone(),
                human_f1: t.human_f1,
            });
        }
    }
    Ok(out)
}

pub fn metrics_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("metrics serialize");
    s.push('\n');
    s
}

pub fn save_metrics(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    std::fs::write(path, metrics_json(report))?;
    Ok(())
}

pub fn per_turn_tsv(buckets: &[TurnBucket]) -> String {
    let mut s = String::from("turn\tmean_f1\tcount\n");
    for b in buckets {
        s.push_str(&format!("{}\t{}\t{}\n", b.turn, b.mean_f1, b.count));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::evaluate;

    fn sample() -> BTreeMap<TurnKey, RankedList> {
        let mut runs = BTreeMap::new();
        runs.insert(
            ("c_1".to_string(), 2),
            RankedList {
                entries: vec![
                    ScoredPassage { passage_id: "p3".into(), score: 0.1 + 0.2 },
                    ScoredPassage { passage_id: "p1".into(), score: -1e-300 },
                    ScoredPassage { passage_id: "p2".into(), score: -7.25 },
                ],
                k: 3,
            },
        );
        runs.insert(
            ("d".to_string(), 1),
            RankedList {
                entries: vec![ScoredPassage { passage_id: "p1".into(), score: 2.0 / 3.0 }],
                k: 1,
            },
        );
        runs
    }

    #[test]
    fn qid_round_trip_with_underscores() {
        assert_eq!(parse_qid(&qid("conv_12", 3)), Some(("conv_12".into(), 3)));
        assert_eq!(parse_qid("nounderscore"), None);
    }

    #[test]
    fn trec_round_trip_is_exact() {
        let runs = sample();
        let mut buf = Vec::new();
        write_trec(&mut buf, &runs, "dense").unwrap();
        let back = read_trec(buf.as_slice(), Path::new("run.trec")).unwrap();
        assert_eq!(back, runs);
    }

    #[test]
    fn trec_rejects_bad_lines() {
        let bad = ["q_1 Q0 p 1 0.5", "q_1 Q0 p 2 0.5 t", "q_1 Q0 p 1 x t", "q Q0 p 1 0.5 t"];
        for line in bad {
            assert!(read_trec(line.as_bytes(), Path::new("r")).is_err(), "{line}");
        }
    }

    #[test]
    fn reimported_metrics_match() {
        use crate::corpus::{ConversationTurn, GoldAnswer};
        let runs = sample();
        let convs: Vec<Conversation> = [("c_1", 2, "p1"), ("d", 1, "p1")]
            .iter()
            .map(|&(cid, turn, gold)| Conversation {
                id: cid.into(),
                turns: vec![ConversationTurn {
                    conversation_id: cid.into(),
                    turn_index: turn,
                    question: "q".into(),
                    rewrite: None,
                    gold: Some(GoldAnswer {
                        text: "x".into(),
                        passage_id: gold.into(),
                        start: 0,
                        end: 0,
                    }),
                    human_f1: None,
                }],
            })
            .collect();
        let preds: Vec<Prediction> = convs
            .iter()
            .map(|c| Prediction {
                cid: c.id.clone(),
                turn: c.turns[0].turn_index,
                answer: "x".into(),
                passage_id: "p1".into(),
                start: Some(0),
                end: Some(0),
                s_rt: 0.0,
                s_rd: 0.0,
                combined: 0.0,
            })
            .collect();
        let direct = evaluate(&assemble_results(&convs, &runs, &preds).unwrap(), Some(1.0)).unwrap();
        let mut buf = Vec::new();
        write_trec(&mut buf, &runs, "t").unwrap();
        let back = read_trec(buf.as_slice(), Path::new("r")).unwrap();
        let again = evaluate(&assemble_results(&convs, &back, &preds).unwrap(), Some(1.0)).unwrap();
        assert_eq!(direct, again);
        assert_eq!(direct.mrr_at_5, 0.75);
    }

    #[test]
    fn tsv_layout() {
        let s = per_turn_tsv(&[TurnBucket { turn: 1, mean_f1: 0.5, count: 2 }]);
        assert_eq!(s, "turn\tmean_f1\tcount\n1\t0.5\t2\n");
    }
}
