//! The turn-by-turn conversational loop with answer feedback.

use rayon::prelude::*;

use crate::composer::{answer_for_history, compose, ComposeMode, ComposedQuery, HistoryTurn};
use crate::corpus::{tokenize, Conversation, PassageCollection};
use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::evalkit::{Prediction, TurnResult};
use crate::reader::{answer, ReadOptions, ReaderParams};
use crate::retriever::{DenseIndex, RankedList};

use super::config::HistoryMode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionSettings {
    pub history: HistoryMode,
    pub retrieval_depth: usize,
    pub top_k: usize,
    pub max_query_tokens: usize,
    pub read: ReadOptions,
    pub reader_sees_answers: bool,
}

/// Trained models a session reads from.
#[derive(Clone, Copy)]
pub struct SessionModels<'a> {
    pub collection: &'a PassageCollection,
    pub index: &'a DenseIndex,
    pub question_encoder: &'a EncoderParams,
    pub reader: &'a ReaderParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub cid: String,
    /// Question and fed answer of every completed turn.
    pub history: Vec<HistoryTurn>,
    pub queries: Vec<ComposedQuery>,
    pub rankings: Vec<RankedList>,
    pub predictions: Vec<Prediction>,
    /// Only turns that carry a gold answer.
    pub results: Vec<TurnResult>,
}

pub fn run_session(
    conversation: &Conversation,
    models: SessionModels<'_>,
    settings: &SessionSettings,
) -> Result<SessionState> {
    let mut state = SessionState {
        cid: conversation.id.clone(),
        history: Vec::new(),
        queries: Vec::new(),
        rankings: Vec::new(),
        predictions: Vec::new(),
        results: Vec::new(),
    };
    let reader_mode = if settings.reader_sees_answers {
        settings.history.compose_mode()
    } else {
        ComposeMode::QuestionOnly
    };
    for turn in &conversation.turns {
        let current = tokenize(&turn.question);
        let query = compose(
            &state.history,
            &current,
            settings.history.compose_mode(),
            settings.max_query_tokens,
        )?;
        let q = models.question_encoder.encode(&query.tokens)?;
        let ranked = models.index.search(&q, settings.retrieval_depth.max(settings.top_k))?;
        let read = RankedList {
            entries: ranked.entries.iter().take(settings.top_k).cloned().collect(),
            k: settings.top_k,
        };

        let reader_query = compose(&state.history, &current, reader_mode, settings.max_query_tokens)?;
        let span = answer(
            models.reader,
            &reader_query.tokens,
            &read,
            models.collection,
            &settings.read,
        )?;

        let fed = match settings.history.answer_source() {
            None => Vec::new(),
            Some(source) => answer_for_history(turn, Some(&span.text), source)?,
        };
        if let Some(gold) = &turn.gold {
            state.results.push(TurnResult {
                cid: conversation.id.clone(),
                turn_index: turn.turn_index,
                ranked: ranked.clone(),
                gold_passage_id: gold.passage_id.clone(),
                predicted: span.text.clone(),
                gold: gold.text.clone(),
                human_f1: turn.human_f1,
            });
        }
        state.predictions.push(Prediction {
            cid: conversation.id.clone(),
            turn: turn.turn_index,
            answer: span.text,
            passage_id: span.passage_id,
            start: span.span.map(|s| s.0),
            end: span.span.map(|s| s.1),
            s_rt: span.s_rt,
            s_rd: span.s_rd,
            combined: span.combined,
        });
        state.history.push((current, fed));
        state.queries.push(query);
        state.rankings.push(ranked);
    }
    Ok(state)
}

/// Runs every conversation; conversations are independent, turns within
/// one are sequential. Output order follows the input.
pub fn run_sessions(
    conversations: &[Conversation],
    models: SessionModels<'_>,
    settings: &SessionSettings,
) -> Result<Vec<SessionState>> {
    conversations
        .par_iter()
        .map(|c| run_session(c, models, settings))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::ANSWER_MARK;
    use crate::corpus::{ConversationTurn, GoldAnswer, Passage, CANNOTANSWER};
    use crate::encoder::init_params;
    use crate::reader::FusionMode;
    use crate::retriever::build_index;

    struct Fixture {
        collection: PassageCollection,
        index: DenseIndex,
        encoder: EncoderParams,
        reader: ReaderParams,
    }

    fn fixture() -> Fixture {
        let collection = PassageCollection::from_passages(vec![
            Passage::new("p0", None, "zorvak studied under the mentor melbrin"),
            Passage::new("p1", None, "melbrin was born in the city of dunmore"),
            Passage::new("p2", None, "kelsa was born in the city of tarvik"),
        ])
        .unwrap();
        let encoder = init_params(512, 8, 3, 0.3).unwrap();
        let index = build_index(&encoder, &collection).unwrap();
        let reader = ReaderParams::init(512, 8, 4, 0.3, 30).unwrap();
        Fixture {
            collection,
            index,
            encoder,
            reader,
        }
    }

    fn turn(k: usize, q: &str, gold: &str, pid: &str, pos: usize) -> ConversationTurn {
        ConversationTurn {
            conversation_id: "c".into(),
            turn_index: k,
            question: q.into(),
            rewrite: None,
            gold: Some(GoldAnswer {
                text: gold.into(),
                passage_id: pid.into(),
                start: pos,
                end: pos,
            }),
            human_f1: None,
        }
    }

    fn settings(history: HistoryMode) -> SessionSettings {
        SessionSettings {
            history,
            retrieval_depth: 3,
            top_k: 2,
            max_query_tokens: 125,
            read: ReadOptions {
                fusion: FusionMode::Normalized,
                max_passage_tokens: 512,
            },
            reader_sees_answers: false,
        }
    }

    fn models(f: &Fixture) -> SessionModels<'_> {
        SessionModels {
            collection: &f.collection,
            index: &f.index,
            question_encoder: &f.encoder,
            reader: &f.reader,
        }
    }

    #[test]
    fn single_turn_same_in_every_mode() {
        let f = fixture();
        let c = Conversation {
            id: "c".into(),
            turns: vec![turn(1, "who was the mentor of zorvak", "melbrin", "p0", 5)],
        };
        let runs: Vec<SessionState> = HistoryMode::ALL
            .iter()
            .map(|&m| run_session(&c, models(&f), &settings(m)).unwrap())
            .collect();
        for r in &runs[1..] {
            assert_eq!(r.queries[0].tokens, runs[0].queries[0].tokens);
            assert_eq!(r.rankings, runs[0].rankings);
            assert_eq!(r.predictions, runs[0].predictions);
        }
    }

    #[test]
    fn predicted_history_feeds_reader_output() {
        let f = fixture();
        let c = Conversation {
            id: "c".into(),
            turns: vec![
                turn(1, "who was the mentor of zorvak", "melbrin", "p0", 5),
                turn(2, "where was he born", "dunmore", "p1", 6),
            ],
        };
        let s = run_session(&c, models(&f), &settings(HistoryMode::Predicted)).unwrap();
        for (h, p) in s.history.iter().zip(&s.predictions) {
            let want = if p.answer == CANNOTANSWER {
                vec![crate::composer::CANNOT_MARK.to_string()]
            } else {
                tokenize(&p.answer)
            };
            assert_eq!(h.1, want);
        }
        let none = run_session(&c, models(&f), &settings(HistoryMode::None)).unwrap();
        assert!(none.history.iter().all(|h| h.1.is_empty()));
        assert!(!none.queries[1].tokens.contains(&ANSWER_MARK.to_string()));
    }

    #[test]
    fn predicted_and_gold_differ_only_in_answer_segment() {
        let f = fixture();
        let c = Conversation {
            id: "c".into(),
            turns: vec![
                turn(1, "who was the mentor of zorvak", "melbrin", "p0", 5),
                turn(2, "where was he born", "dunmore", "p1", 6),
            ],
        };
        let pred = run_session(&c, models(&f), &settings(HistoryMode::Predicted)).unwrap();
        let gold = run_session(&c, models(&f), &settings(HistoryMode::Gold)).unwrap();
        let (p, g) = (&pred.queries[1].tokens, &gold.queries[1].tokens);
        let a = p.iter().position(|t| t == ANSWER_MARK).unwrap();
        let q2 = p.iter().rposition(|t| t == crate::composer::QUESTION_MARK).unwrap();
        assert_eq!(p[..=a], g[..=a]);
        assert_eq!(g[a + 1..g.len() - (p.len() - q2)], ["melbrin".to_string()]);
        assert_eq!(p[q2..], g[g.len() - (p.len() - q2)..]);
        if pred.predictions[0].answer == "melbrin" {
            assert_eq!(p, g);
        }
    }

    #[test]
    fn gold_mode_needs_gold() {
        let f = fixture();
        let mut t = turn(1, "who was the mentor of zorvak", "melbrin", "p0", 5);
        t.gold = None;
        let c = Conversation {
            id: "c".into(),
            turns: vec![t],
        };
        assert!(run_session(&c, models(&f), &settings(HistoryMode::Gold)).is_err());
        assert!(run_session(&c, models(&f), &settings(HistoryMode::Predicted)).is_ok());
    }
}
