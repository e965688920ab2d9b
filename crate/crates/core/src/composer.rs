//! Query composition from conversation history.
//!
//! The answer-aware form interleaves every earlier question with the answer
//! that was given to it, so the question encoder sees the entities the
//! conversation has already surfaced.

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, ConversationTurn, CANNOTANSWER};
use crate::error::{Error, Result};

pub const QUESTION_MARK: &str = "⟨Q⟩";
pub const ANSWER_MARK: &str = "⟨A⟩";
pub const CANNOT_MARK: &str = "⟨CANNOT⟩";

/// Reserved tokens in bucket order.
pub const RESERVED: [&str; 3] = [QUESTION_MARK, ANSWER_MARK, CANNOT_MARK];

/// Default token budget for a composed query.
pub const DEFAULT_MAX_QUERY_TOKENS: usize = 125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeMode {
    QuestionOnly,
    AnswerAware,
    /// Self-contained rewrite with no history; `current` carries the rewrite.
    Rewrite,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedQuery {
    pub tokens: Vec<String>,
    pub turn_index: usize,
    pub mode: ComposeMode,
}

/// One completed turn: question tokens and the answer tokens fed back.
pub type HistoryTurn = (Vec<String>, Vec<String>);

fn segment_len(turn: &HistoryTurn, with_answer: bool) -> usize {
    let q = 1 + turn.0.len();
    if with_answer {
        q + 1 + turn.1.len()
    } else {
        q
    }
}

/// Serializes history and the current question into one token sequence.
///
/// Over budget, whole turns are dropped oldest first. In answer-aware mode
/// the newest dropped turn is kept instead if head-truncating its answer to
/// at least one token is enough to fit.
pub fn compose(
    history: &[HistoryTurn],
    current: &[String],
    mode: ComposeMode,
    max_query_tokens: usize,
) -> Result<ComposedQuery> {
    let needed = current.len() + 1;
    if max_query_tokens < needed {
        return Err(Error::BudgetTooSmall {
            budget: max_query_tokens,
            needed,
        });
    }
    let turn_index = history.len() + 1;

    let mut tokens = Vec::with_capacity(max_query_tokens);
    if mode == ComposeMode::Rewrite {
        tokens.push(QUESTION_MARK.to_string());
        tokens.extend(current.iter().cloned());
        return Ok(ComposedQuery {
            tokens,
            turn_index,
            mode,
        });
    }

    let with_answer = mode == ComposeMode::AnswerAware;
    let mut total = needed + history.iter().map(|t| segment_len(t, with_answer)).sum::<usize>();
    let mut dropped = 0;
    while total > max_query_tokens {
        total -= segment_len(&history[dropped], with_answer);
        dropped += 1;
    }

    // (turn, answer tokens skipped from its head)
    let mut partial: Option<(usize, usize)> = None;
    if with_answer && dropped > 0 {
        let candidate = &history[dropped - 1];
        let overflow = total + segment_len(candidate, true) - max_query_tokens;
        if overflow < candidate.1.len() {
            partial = Some((dropped - 1, overflow));
        }
    }

    let start = partial.map_or(dropped, |(i, _)| i);
    for (i, (q, a)) in history.iter().enumerate().skip(start) {
        tokens.push(QUESTION_MARK.to_string());
        tokens.extend(q.iter().cloned());
        if with_answer {
            let skip = match partial {
                Some((j, skip)) if j == i => skip,
                _ => 0,
            };
            tokens.push(ANSWER_MARK.to_string());
            tokens.extend(a[skip..].iter().cloned());
        }
    }
    tokens.push(QUESTION_MARK.to_string());
    tokens.extend(current.iter().cloned());
    debug_assert!(tokens.len() <= max_query_tokens);

    Ok(ComposedQuery {
        tokens,
        turn_index,
        mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Predicted,
    Gold,
}

/// Answer tokens to append to history for `turn`.
pub fn answer_for_history(
    turn: &ConversationTurn,
    predicted: Option<&str>,
    source: AnswerSource,
) -> Result<Vec<String>> {
    let text = match source {
        AnswerSource::Predicted => predicted.ok_or_else(|| {
            Error::missing(format!(
                "prediction for {} turn {}",
                turn.conversation_id, turn.turn_index
            ))
        })?,
        AnswerSource::Gold => {
            &turn
                .gold
                .as_ref()
                .ok_or_else(|| {
                    Error::missing(format!(
                        "gold answer for {} turn {}",
                        turn.conversation_id, turn.turn_index
                    ))
                })?
                .text
        }
    };
    Ok(answer_tokens(text))
}

/// Tokenized answer text; the unanswerable sentinel becomes its marker.
pub fn answer_tokens(text: &str) -> Vec<String> {
    if text == CANNOTANSWER {
        vec![CANNOT_MARK.to_string()]
    } else {
        tokenize(text)
    }
}
