//! Training tuples built from conversations.

use std::collections::BTreeMap;

use crate::composer::{answer_tokens, compose, ComposeMode, HistoryTurn};
use crate::corpus::{tokenize, Conversation, PassageCollection, CANNOTANSWER};
use crate::error::{Error, Result};
use crate::evalkit::TurnKey;
use crate::reader::{answer, ReadOptions, ReaderExample, ReaderParams};
use crate::encoder::EncoderParams;
use crate::retriever::{DenseIndex, RankedList, RetrievalExample, ScoredPassage};

use rayon::prelude::*;

use super::config::HistoryMode;

fn gold_position(
    collection: &PassageCollection,
    cid: &str,
    turn: usize,
    passage_id: &str,
) -> Result<usize> {
    collection.position(passage_id).ok_or_else(|| Error::InvalidGold {
        cid: cid.to_string(),
        turn,
        message: format!("unknown passage {passage_id:?}"),
    })
}

/// Walks each conversation, calling `f` with the history so far, the current
/// turn's tokens and the turn. History answers come from `history`:
/// nothing, gold answers, or `predicted[(cid, turn)]`.
fn walk<T>(
    conversations: &[Conversation],
    history: HistoryMode,
    predicted: &BTreeMap<TurnKey, String>,
    mut f: impl FnMut(&[HistoryTurn], &[String], &crate::corpus::ConversationTurn) -> Result<Option<T>>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for c in conversations {
        let mut past: Vec<HistoryTurn> = Vec::new();
        for t in &c.turns {
            let current = tokenize(&t.question);
            if let Some(x) = f(&past, &current, t)? {
                out.push(x);
            }
            let fed = match history {
                HistoryMode::None => Vec::new(),
                HistoryMode::Gold => answer_tokens(
                    &t.gold
                        .as_ref()
                        .ok_or_else(|| Error::missing(format!("gold answer for {} turn {}", c.id, t.turn_index)))?
                        .text,
                ),
                HistoryMode::Predicted => answer_tokens(
                    predicted
                        .get(&(c.id.clone(), t.turn_index))
                        .ok_or_else(|| Error::missing(format!("prediction for {} turn {}", c.id, t.turn_index)))?,
                ),
            };
            past.push((current, fed));
        }
    }
    Ok(out)
}

/// Retrieval tuples for every turn with a gold answer. The query is composed
/// per `history`; the rewrite, when present, is composed in rewrite mode.
pub fn retrieval_examples(
    conversations: &[Conversation],
    collection: &PassageCollection,
    history: HistoryMode,
    predicted: &BTreeMap<TurnKey, String>,
    max_query_tokens: usize,
) -> Result<Vec<RetrievalExample>> {
    walk(conversations, history, predicted, |past, current, t| {
        let Some(gold) = &t.gold else { return Ok(None) };
        let query = compose(past, current, history.compose_mode(), max_query_tokens)?;
        let rewrite = t
            .rewrite
            .as_deref()
            .map(|r| compose(&[], &tokenize(r), ComposeMode::Rewrite, max_query_tokens))
            .transpose()?;
        Ok(Some(RetrievalExample {
            query: query.tokens,
            rewrite: rewrite.map(|r| r.tokens),
            gold: gold_position(collection, &t.conversation_id, t.turn_index, &gold.passage_id)?,
        }))
    })
}

/// Reader tuples over the gold passage, with gold history answers when the
/// reader is configured to see them.
pub fn reader_examples(
    conversations: &[Conversation],
    collection: &PassageCollection,
    reader_sees_answers: bool,
    max_query_tokens: usize,
) -> Result<Vec<ReaderExample>> {
    let (history, mode) = if reader_sees_answers {
        (HistoryMode::Gold, ComposeMode::AnswerAware)
    } else {
        (HistoryMode::None, ComposeMode::QuestionOnly)
    };
    walk(conversations, history, &BTreeMap::new(), |past, current, t| {
        let Some(gold) = &t.gold else { return Ok(None) };
        let query = compose(past, current, mode, max_query_tokens)?;
        Ok(Some(ReaderExample {
            question: query.tokens,
            passage: gold_position(collection, &t.conversation_id, t.turn_index, &gold.passage_id)?,
            span: (gold.text != CANNOTANSWER).then_some((gold.start, gold.end)),
            distractors: Vec::new(),
        }))
    })
}

/// Gives every reader example the `n` best-ranked non-gold passages for its
/// query. `queries[i]` is the retrieval query of `examples[i]`.
pub fn attach_distractors(
    examples: &mut [ReaderExample],
    queries: &[Vec<String>],
    encoder: &EncoderParams,
    index: &DenseIndex,
    n: usize,
) -> Result<()> {
    if queries.len() != examples.len() {
        return Err(Error::InvalidArgument(format!(
            "{} queries for {} reader examples",
            queries.len(),
            examples.len()
        )));
    }
    if n == 0 {
        return Ok(());
    }
    let ranked: Vec<RankedList> = queries
        .par_iter()
        .map(|q| index.search(&encoder.encode(q)?, n + 1))
        .collect::<Result<_>>()?;
    for (ex, r) in examples.iter_mut().zip(ranked) {
        let gold = &index.ids()[ex.passage];
        ex.distractors = r
            .entries
            .iter()
            .filter(|e| &e.passage_id != gold)
            .take(n)
            .map(|e| index.ids().iter().position(|id| *id == e.passage_id).expect("id from index"))
            .collect();
    }
    Ok(())
}

/// The reader's answer for every gold-bearing turn when handed the gold
/// passage alone; used to train on predicted history.
pub fn reader_answers_on_gold(
    conversations: &[Conversation],
    collection: &PassageCollection,
    reader: &ReaderParams,
    options: &ReadOptions,
    max_query_tokens: usize,
) -> Result<BTreeMap<TurnKey, String>> {
    let keys: Vec<TurnKey> = conversations
        .iter()
        .flat_map(|c| c.turns.iter().filter(|t| t.gold.is_some()).map(|t| (c.id.clone(), t.turn_index)))
        .collect();
    let examples = reader_examples(conversations, collection, false, max_query_tokens)?;
    let mut out = BTreeMap::new();
    for (key, ex) in keys.into_iter().zip(examples) {
        let ranked = RankedList {
            entries: vec![ScoredPassage {
                passage_id: collection.passages()[ex.passage].id.clone(),
                score: 0.0,
            }],
            k: 1,
        };
        let span = answer(reader, &ex.question, &ranked, collection, options)?;
        out.insert(key, span.text);
    }
    Ok(out)
}
