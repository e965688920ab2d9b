//! Ranking and answer metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, CANNOTANSWER};
use crate::error::{Error, Result};
use crate::retriever::RankedList;

#[derive(Debug, Clone, PartialEq)]
pub struct TurnResult {
    pub cid: String,
    /// 1-based.
    pub turn_index: usize,
    pub ranked: RankedList,
    pub gold_passage_id: String,
    pub predicted: String,
    pub gold: String,
    pub human_f1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnBucket {
    pub turn: usize,
    pub mean_f1: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr_at_5: f64,
    pub recall_at_5: f64,
    pub map_at_10: f64,
    pub f1: f64,
    pub heq_q: f64,
    pub heq_d: f64,
    #[serde(skip)]
    pub per_turn: Vec<TurnBucket>,
}

pub fn reciprocal_rank_at_k(ranked: &RankedList, gold_id: &str, k: usize) -> f64 {
    match ranked.rank_of(gold_id) {
        Some(r) if r <= k => 1.0 / r as f64,
        _ => 0.0,
    }
}

pub fn recall_at_k(ranked: &RankedList, gold_id: &str, k: usize) -> f64 {
    match ranked.rank_of(gold_id) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// With a single relevant passage this is the reciprocal rank cut at `k`.
pub fn average_precision_at_k(ranked: &RankedList, relevant: &[&str], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, e) in ranked.entries.iter().take(k).enumerate() {
        if relevant.contains(&e.passage_id.as_str()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

/// Multiset token-overlap F1. The unanswerable sentinel only matches itself;
/// two answers that normalize to nothing count as equal.
pub fn word_f1(predicted: &str, gold: &str) -> f64 {
    let (p_cannot, g_cannot) = (predicted.trim() == CANNOTANSWER, gold.trim() == CANNOTANSWER);
    if p_cannot || g_cannot {
        return if p_cannot && g_cannot { 1.0 } else { 0.0 };
    }
    let p = tokenize(predicted);
    let g = tokenize(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// 1 when the system matches or beats the human reference.
pub fn heq_q(f1: f64, human_f1: f64) -> f64 {
    if f1 >= human_f1 {
        1.0
    } else {
        0.0
    }
}

pub fn heq_d(turns: &[f64]) -> f64 {
    if turns.iter().all(|&h| h == 1.0) {
        1.0
    } else {
        0.0
    }
}

/// Mean F1 per turn index, ascending.
pub fn per_turn_accuracy(results: &[TurnResult]) -> Vec<TurnBucket> {
    let mut groups: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in results {
        let g = groups.entry(r.turn_index).or_default();
        g.0 += word_f1(&r.predicted, &r.gold);
        g.1 += 1;
    }
    groups
        .into_iter()
        .map(|(turn, (sum, count))| TurnBucket {
            turn,
            mean_f1: sum / count as f64,
            count,
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Corpus-level metrics. `human_fallback` stands in for turns without a
/// human F1.
pub fn evaluate(results: &[TurnResult], human_fallback: Option<f64>) -> Result<MetricsReport> {
    let mut heq = Vec::with_capacity(results.len());
    let mut f1s = Vec::with_capacity(results.len());
    for r in results {
        let f1 = word_f1(&r.predicted, &r.gold);
        let human = r.human_f1.or(human_fallback).ok_or_else(|| {
            Error::missing(format!("human F1 for {} turn {}", r.cid, r.turn_index))
        })?;
        f1s.push(f1);
        heq.push(heq_q(f1, human));
    }

    // dialogues in order of first appearance
    let mut dialogues: Vec<(&str, Vec<f64>)> = Vec::new();
    let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
    for (r, &h) in results.iter().zip(&heq) {
        let i = *slot.entry(&r.cid).or_insert_with(|| {
            dialogues.push((&r.cid, Vec::new()));
            dialogues.len() - 1
        });
        dialogues[i].1.push(h);
    }

    Ok(MetricsReport {
        mrr_at_5: mean(results.iter().map(|r| reciprocal_rank_at_k(&r.ranked, &r.gold_passage_id, 5))),
        recall_at_5: mean(results.iter().map(|r| recall_at_k(&r.ranked, &r.gold_passage_id, 5))),
        map_at_10: mean(
            results
                .iter()
                .map(|r| average_precision_at_k(&r.ranked, &[&r.gold_passage_id], 10)),
        ),
        f1: mean(f1s.into_iter()),
        heq_q: mean(heq.iter().copied()),
        heq_d: mean(dialogues.iter().map(|(_, h)| heq_d(h))),
        per_turn: per_turn_accuracy(results),
    })
}
