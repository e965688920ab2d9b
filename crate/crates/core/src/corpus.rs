//! Passage and conversation ingestion.
//!
//! Both corpora are JSON-lines files. Every piece of text that reaches a
//! model or a metric goes through [`tokenize`], so ingestion, span reading
//! and F1 scoring all agree on what a word is.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved answer string for unanswerable turns.
pub const CANNOTANSWER: &str = "CANNOTANSWER";

/// Lowercase, split on Unicode whitespace, strip non-alphanumeric
/// characters from both ends of every token, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let lower = raw.to_lowercase();
            let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
            (!trimmed.is_empty()).then(|| trimmed.to_string())
        })
        .collect()
}

/// Single-space join; the inverse direction of [`tokenize`] for spans.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Passage {
    pub id: String,
    pub title: Option<String>,
    pub text: String,
    pub tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PassageRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    title: Option<String>,
    text: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: Option<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Passage {
            id: id.into(),
            title,
            tokens: tokenize(&text),
            text,
        }
    }
}

/// Read-only passage store; iteration order is insertion (file) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PassageCollection {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl PassageCollection {
    /// Builds a collection, rejecting empty ids, empty token sequences and
    /// duplicate ids.
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        let mut c = PassageCollection::default();
        for (i, p) in passages.into_iter().enumerate() {
            c.push(p)
                .map_err(|message| Error::InvalidArgument(format!("passage {i}: {message}")))?;
        }
        Ok(c)
    }

    fn push(&mut self, p: Passage) -> std::result::Result<(), String> {
        if p.id.is_empty() {
            return Err("empty passage id".into());
        }
        if p.tokens.is_empty() {
            return Err(format!("passage {:?} has no tokens", p.id));
        }
        if self.by_id.contains_key(&p.id) {
            return Err(format!("duplicate passage id {:?}", p.id));
        }
        self.by_id.insert(p.id.clone(), self.passages.len());
        self.passages.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn iter(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub text: String,
    pub passage_id: String,
    /// Token index into the passage, inclusive.
    pub start: usize,
    /// Token index into the passage, inclusive.
    pub end: usize,
}

impl GoldAnswer {
    pub fn is_cannot_answer(&self) -> bool {
        self.text == CANNOTANSWER
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationTurn {
    #[serde(rename = "cid")]
    pub conversation_id: String,
    #[serde(rename = "turn")]
    pub turn_index: usize,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<GoldAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    /// Sorted by `turn_index`, contiguous from 1.
    pub turns: Vec<ConversationTurn>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_passages(path: impl AsRef<Path>) -> Result<PassageCollection> {
    let path = path.as_ref();
    read_passages(open(path)?, path)
}

/// Parses passages from any line source; `origin` only labels diagnostics.
pub fn read_passages(reader: impl BufRead, origin: &Path) -> Result<PassageCollection> {
    let mut c = PassageCollection::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PassageRecord =
            serde_json::from_str(&line).map_err(|e| malformed(origin, lineno, e.to_string()))?;
        if c.by_id.contains_key(&rec.id) {
            return Err(Error::DuplicateId {
                path: origin.to_path_buf(),
                line: lineno,
                id: rec.id,
            });
        }
        c.push(Passage::new(rec.id, rec.title, rec.text))
            .map_err(|m| malformed(origin, lineno, m))?;
    }
    Ok(c)
}

pub fn write_passages(path: impl AsRef<Path>, collection: &PassageCollection) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in collection.iter() {
        let rec = PassageRecord {
            id: p.id.clone(),
            title: p.title.clone(),
            text: p.text.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_conversations(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    read_conversations(open(path)?, path)
}

pub fn read_conversations(reader: impl BufRead, origin: &Path) -> Result<Vec<Conversation>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, ConversationTurn)>> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let turn: ConversationTurn =
            serde_json::from_str(&line).map_err(|e| malformed(origin, lineno, e.to_string()))?;
        if turn.turn_index == 0 {
            return Err(malformed(origin, lineno, "turn index must be >= 1"));
        }
        if let Some(h) = turn.human_f1 {
            if !(0.0..=1.0).contains(&h) {
                return Err(malformed(origin, lineno, "human_f1 outside [0, 1]"));
            }
        }
        if let Some(g) = &turn.gold {
            if g.start > g.end {
                return Err(malformed(origin, lineno, "gold start after end"));
            }
        }
        let group = groups.entry(turn.conversation_id.clone()).or_insert_with(|| {
            order.push(turn.conversation_id.clone());
            Vec::new()
        });
        group.push((lineno, turn));
    }

    let mut out = Vec::with_capacity(order.len());
    for cid in order {
        let mut turns = groups.remove(&cid).unwrap_or_default();
        turns.sort_by_key(|(_, t)| t.turn_index);
        for (expected, (lineno, t)) in (1..).zip(&turns) {
            if t.turn_index < expected {
                return Err(malformed(
                    origin,
                    *lineno,
                    format!("conversation {cid} repeats turn {}", t.turn_index),
                ));
            }
            if t.turn_index > expected {
                return Err(Error::TurnGap {
                    cid,
                    missing: expected,
                });
            }
        }
        out.push(Conversation {
            id: cid,
            turns: turns.into_iter().map(|(_, t)| t).collect(),
        });
    }
    Ok(out)
}

pub fn write_conversations(path: impl AsRef<Path>, conversations: &[Conversation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in conversations {
        for t in &c.turns {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Checks every gold span against the passage it points into.
pub fn validate_gold(conversations: &[Conversation], collection: &PassageCollection) -> Result<()> {
    for c in conversations {
        for t in &c.turns {
            let Some(g) = &t.gold else { continue };
            let bad = |message: String| Error::InvalidGold {
                cid: c.id.clone(),
                turn: t.turn_index,
                message,
            };
            let passage = collection
                .get(&g.passage_id)
                .ok_or_else(|| bad(format!("unknown passage {:?}", g.passage_id)))?;
            if g.start > g.end || g.end >= passage.tokens.len() {
                return Err(bad(format!(
                    "span [{}, {}] outside passage of {} tokens",
                    g.start,
                    g.end,
                    passage.tokens.len()
                )));
            }
            if !g.is_cannot_answer() && tokenize(&g.text) != passage.tokens[g.start..=g.end] {
                return Err(bad(format!("text {:?} does not match span", g.text)));
            }
        }
    }
    Ok(())
}
