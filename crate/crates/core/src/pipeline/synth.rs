//! Synthetic corpus where later questions only resolve through earlier
//! answers.
//!
//! Entities come in typed levels linked by four relations (student ->
//! mentor -> birth city -> province -> governor). Every subject gets one
//! passage stating its relation. A conversation walks a chain: the
//! first question names its subject, each later one asks about the previous
//! answer through a pronoun, and every turn carries a rewrite that names the
//! subject explicitly.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{tokenize, Conversation, ConversationTurn, GoldAnswer, Passage, PassageCollection};
use crate::error::{Error, Result};

struct Relation {
    /// Passage text; `{s}` and `{o}` mark subject and object.
    passage: &'static str,
    explicit: &'static str,
    pronoun: &'static str,
}

const RELATIONS: [Relation; 4] = [
    Relation {
        passage: "{s} studied music under the mentor {o} for many years.",
        explicit: "Who was the mentor of {s}?",
        pronoun: "Who was his mentor?",
    },
    Relation {
        passage: "{s} was born in the city of {o} near the river.",
        explicit: "Where was {s} born?",
        pronoun: "Where was he born?",
    },
    Relation {
        passage: "{s} is a city located in the province of {o} in the north.",
        explicit: "Which province is {s} in?",
        pronoun: "Which province is it in?",
    },
    Relation {
        passage: "{s} is governed by the governor {o} since the last election.",
        explicit: "Who governs {s}?",
        pronoun: "Who governs it?",
    },
];

pub const MAX_TURNS: usize = RELATIONS.len();

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "n", "r", "l", "k", "s"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    /// Subjects of every relation but the first; the first has twice as
    /// many, so the collection holds `5 * subjects` passages.
    pub subjects: usize,
    pub eval_conversations: usize,
    pub turns: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub passages: PassageCollection,
    /// Evaluation conversations; their opening subjects never appear in a
    /// training conversation.
    pub conversations: Vec<Conversation>,
    pub train_conversations: Vec<Conversation>,
}

fn template_words() -> BTreeSet<String> {
    RELATIONS
        .iter()
        .flat_map(|r| [r.passage, r.explicit, r.pronoun])
        .flat_map(tokenize)
        .collect()
}

fn entity_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = template_words();
    let mut names = Vec::with_capacity(n);
    while names.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut name = String::new();
        for _ in 0..syllables {
            name.push_str(ONSETS.choose(rng).expect("non-empty"));
            name.push_str(VOWELS.choose(rng).expect("non-empty"));
        }
        name.push_str(CODAS.choose(rng).expect("non-empty"));
        if seen.insert(name.clone()) {
            let mut chars = name.chars();
            let first = chars.next().expect("non-empty").to_ascii_uppercase();
            names.push(std::iter::once(first).chain(chars).collect());
        }
    }
    names
}

fn fill(template: &str, s: &str, o: &str) -> String {
    template.replace("{s}", s).replace("{o}", o)
}

/// Passage id of relation `r` about subject index `i` at level `r`.
fn passage_id(r: usize, i: usize) -> String {
    format!("r{}_{:04}", r + 1, i)
}

struct World {
    /// `names[level][i]`.
    names: Vec<Vec<String>>,
    /// `object[r][i]`: index at level `r + 1` of subject `i`'s object.
    object: Vec<Vec<usize>>,
    /// `spans[r][i]`: token position of the object in that passage.
    spans: Vec<Vec<usize>>,
}

impl World {
    fn turn(&self, cid: &str, k: usize, r: usize, subject: usize, first: bool) -> ConversationTurn {
        let rel = &RELATIONS[r];
        let s = &self.names[r][subject];
        let o = &self.names[r + 1][self.object[r][subject]];
        let question = if first {
            fill(rel.explicit, s, "")
        } else {
            rel.pronoun.to_string()
        };
        let pos = self.spans[r][subject];
        ConversationTurn {
            conversation_id: cid.to_string(),
            turn_index: k,
            question,
            rewrite: Some(fill(rel.explicit, s, "")),
            gold: Some(GoldAnswer {
                text: o.clone(),
                passage_id: passage_id(r, subject),
                start: pos,
                end: pos,
            }),
            human_f1: None,
        }
    }

    /// Walks `turns` relations from subject `start` of relation `first_rel`.
    fn conversation(&self, cid: String, first_rel: usize, start: usize, turns: usize) -> Conversation {
        let mut subject = start;
        let mut out = Vec::with_capacity(turns);
        for (k, r) in (first_rel..first_rel + turns).enumerate() {
            out.push(self.turn(&cid, k + 1, r, subject, k == 0));
            subject = self.object[r][subject];
        }
        Conversation { id: cid, turns: out }
    }
}

/// Every mentor has exactly two students. One student of each of the first
/// `eval_conversations` mentors opens an evaluation conversation; every
/// other student opens a training conversation, and training also walks
/// shorter chains from every later-level subject.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    let n = spec.subjects;
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 subjects per relation".into()));
    }
    if !(2..=MAX_TURNS).contains(&spec.turns) {
        return Err(Error::InvalidArgument(format!(
            "turns must be in 2..={MAX_TURNS}, got {}",
            spec.turns
        )));
    }
    if spec.eval_conversations > n {
        return Err(Error::InvalidArgument(format!(
            "{} conversations need as many distinct mentors; only {n} exist",
            spec.eval_conversations
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sizes: Vec<usize> = std::iter::once(2 * n)
        .chain(std::iter::repeat_n(n, RELATIONS.len()))
        .collect();
    let all = entity_names(sizes.iter().sum(), &mut rng);
    let mut names = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &size in &sizes {
        names.push(all[offset..offset + size].to_vec());
        offset += size;
    }

    let mut mentors: Vec<usize> = (0..n).collect();
    mentors.shuffle(&mut rng);
    let mut object = vec![(0..2 * n).map(|i| mentors[i / 2]).collect::<Vec<usize>>()];
    for _ in 1..RELATIONS.len() {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        object.push(perm);
    }

    let mut passages = Vec::with_capacity(sizes[..RELATIONS.len()].iter().sum());
    let mut spans = Vec::with_capacity(RELATIONS.len());
    for (r, rel) in RELATIONS.iter().enumerate() {
        let mut rel_spans = Vec::with_capacity(sizes[r]);
        for i in 0..sizes[r] {
            let s = &names[r][i];
            let o = &names[r + 1][object[r][i]];
            let p = Passage::new(passage_id(r, i), Some(s.clone()), fill(rel.passage, s, o));
            let target = o.to_lowercase();
            let pos = p
                .tokens
                .iter()
                .position(|t| *t == target)
                .expect("object appears in its passage");
            rel_spans.push(pos);
            passages.push(p);
        }
        spans.push(rel_spans);
    }
    let world = World {
        names,
        object,
        spans,
    };

    // students 2i and 2i + 1 share a mentor; pick one of each pair
    let mut pairs: Vec<usize> = (0..n).collect();
    pairs.shuffle(&mut rng);
    let mut eval_starts = Vec::with_capacity(spec.eval_conversations);
    let mut held_out = BTreeSet::new();
    for &pair in &pairs[..spec.eval_conversations] {
        let student = 2 * pair + rng.gen_range(0..2);
        eval_starts.push(student);
        held_out.insert(student);
    }
    let conversations = eval_starts
        .iter()
        .enumerate()
        .map(|(c, &s)| world.conversation(format!("c{:03}", c + 1), 0, s, spec.turns))
        .collect();

    let mut train = Vec::new();
    for s in (0..2 * n).filter(|s| !held_out.contains(s)) {
        train.push(world.conversation(format!("t0_{s:04}"), 0, s, spec.turns));
    }
    for level in 1..RELATIONS.len() {
        let turns = spec.turns.min(RELATIONS.len() - level);
        for s in 0..n {
            train.push(world.conversation(format!("t{level}_{s:04}"), level, s, turns));
        }
    }

    Ok(SynthData {
        passages: PassageCollection::from_passages(passages)?,
        conversations,
        train_conversations: train,
    })
}

/// Tokens a rewrite adds over its pronoun question.
pub fn resolved_entity(turn: &ConversationTurn) -> Vec<String> {
    let q: BTreeSet<String> = tokenize(&turn.question).into_iter().collect();
    turn.rewrite
        .as_deref()
        .map(tokenize)
        .unwrap_or_default()
        .into_iter()
        .filter(|t| !q.contains(t))
        .collect()
}
