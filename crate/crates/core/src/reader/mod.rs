//! Extractive span reader.
//!
//! Every passage gets a sentinel token at position 0; selecting the span
//! `(0, 0)` means the turn is unanswerable. A token's start and end scores
//! are linear in the feature `[t ; t * q ; q]`, where `t` is the token's
//! projected embedding and `q` the pooled question embedding.

mod train;

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::CANNOT_MARK;
use crate::corpus::{detokenize, PassageCollection, CANNOTANSWER};
use crate::encoder::{
    expect_eof, init_params, read_f64, read_f64s, read_u32, to_u32, write_f64s, Embedding,
    EncoderParams, Pooled,
};
use crate::error::{Error, Result};
use crate::retriever::RankedList;

pub use train::{reader_loss, reader_loss_grad, train_reader, ReaderExample, ReaderGrad};

pub const DEFAULT_MAX_SPAN: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderParams {
    pub encoder: EncoderParams,
    /// Length `3 * dim`.
    pub w_start: Vec<f64>,
    /// Length `3 * dim`.
    pub w_end: Vec<f64>,
    pub b_start: f64,
    pub b_end: f64,
    pub max_span: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Product of the per-factor softmaxes over the candidate set.
    Normalized,
    /// Raw product of retriever and reader scores.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanPrediction {
    pub passage_id: String,
    /// Inclusive token span in passage coordinates; `None` when unanswerable.
    pub span: Option<(usize, usize)>,
    pub text: String,
    pub s_rd: f64,
    pub s_rt: f64,
    pub combined: f64,
}

/// Forward intermediates for one (question, passage) pair.
pub(crate) struct Forward {
    pub question: Pooled,
    pub buckets: Vec<usize>,
    pub tokens: Vec<Embedding>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// Passage tokens with the sentinel in front, capped at `max_tokens`
/// passage tokens.
pub fn with_sentinel<S: AsRef<str>>(passage: &[S], max_tokens: usize) -> Vec<String> {
    std::iter::once(CANNOT_MARK.to_string())
        .chain(passage.iter().take(max_tokens).map(|t| t.as_ref().to_string()))
        .collect()
}

impl ReaderParams {
    pub fn init(
        vocab_buckets: usize,
        dim: usize,
        seed: u64,
        scale: f64,
        max_span: usize,
    ) -> Result<Self> {
        if max_span == 0 {
            return Err(Error::InvalidArgument("max span must be >= 1".into()));
        }
        let encoder = init_params(vocab_buckets, dim, seed, scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_4ead);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect()
        };
        let w_start = draw(3 * dim);
        let w_end = draw(3 * dim);
        Ok(ReaderParams {
            encoder,
            w_start,
            w_end,
            b_start: 0.0,
            b_end: 0.0,
            max_span,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    fn check(&self) -> Result<()> {
        let want = 3 * self.dim();
        Error::check_dim(want, self.w_start.len())?;
        Error::check_dim(want, self.w_end.len())
    }

    pub(crate) fn forward<S: AsRef<str>, T: AsRef<str>>(
        &self,
        question: &[S],
        passage: &[T],
    ) -> Result<Forward> {
        self.check()?;
        let d = self.dim();
        let q = self.encoder.pool(question)?;
        let tokens = self.encoder.encode_tokenwise(passage)?;
        let buckets = passage
            .iter()
            .map(|t| self.encoder.bucket(t.as_ref()))
            .collect();
        let mut start = Vec::with_capacity(tokens.len());
        let mut end = Vec::with_capacity(tokens.len());
        let mut feature = vec![0.0; 3 * d];
        for t in &tokens {
            for j in 0..d {
                feature[j] = t[j];
                feature[d + j] = t[j] * q.output[j];
                feature[2 * d + j] = q.output[j];
            }
            start.push(crate::encoder::dot(&self.w_start, &feature) + self.b_start);
            end.push(crate::encoder::dot(&self.w_end, &feature) + self.b_end);
        }
        Ok(Forward {
            question: q,
            buckets,
            tokens,
            start,
            end,
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.w_start.len() + self.w_end.len() + 2
    }

    /// Flat parameter view: encoder, `w_start`, `w_end`, `b_start`, `b_end`.
    pub fn flat(&self, index: usize) -> f64 {
        let base = self.encoder.param_count();
        let ws = self.w_start.len();
        let we = self.w_end.len();
        if index < base {
            self.encoder.flat(index)
        } else if index < base + ws {
            self.w_start[index - base]
        } else if index < base + ws + we {
            self.w_end[index - base - ws]
        } else if index == base + ws + we {
            self.b_start
        } else {
            self.b_end
        }
    }

    pub fn flat_mut(&mut self, index: usize) -> &mut f64 {
        let base = self.encoder.param_count();
        let ws = self.w_start.len();
        let we = self.w_end.len();
        if index < base {
            self.encoder.flat_mut(index)
        } else if index < base + ws {
            &mut self.w_start[index - base]
        } else if index < base + ws + we {
            &mut self.w_end[index - base - ws]
        } else if index == base + ws + we {
            &mut self.b_start
        } else {
            &mut self.b_end
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.encoder.write_to(w)?;
        write_f64s(w, &self.w_start)?;
        write_f64s(w, &self.w_end)?;
        write_f64s(w, &[self.b_start, self.b_end])?;
        w.write_all(&to_u32(self.max_span)?.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let encoder = EncoderParams::read_from(r)?;
        let n = 3 * encoder.dim;
        let w_start = read_f64s(r, n)?;
        let w_end = read_f64s(r, n)?;
        let b_start = read_f64(r)?;
        let b_end = read_f64(r)?;
        let max_span = read_u32(r)? as usize;
        if max_span == 0 {
            return Err(Error::Format("max span 0".into()));
        }
        let finite = w_start.iter().chain(&w_end).chain([&b_start, &b_end]).all(|x| x.is_finite());
        if !finite {
            return Err(Error::Format("non-finite reader weight".into()));
        }
        Ok(ReaderParams {
            encoder,
            w_start,
            w_end,
            b_start,
            b_end,
            max_span,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let params = Self::read_from(&mut cursor)?;
        expect_eof(cursor)?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Per-token start and end scores of `passage` given `question`.
pub fn token_scores<S: AsRef<str>, T: AsRef<str>>(
    params: &ReaderParams,
    question: &[S],
    passage: &[T],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = params.forward(question, passage)?;
    Ok((f.start, f.end))
}

/// Maximizes `start[m1] + end[m2]` over `m1 <= m2 < m1 + max_span`.
/// Ties go to the smaller `m1`, then the smaller `m2`.
pub fn best_span(start: &[f64], end: &[f64], max_span: usize) -> (usize, usize, f64) {
    assert!(!start.is_empty(), "best_span needs at least one position");
    assert_eq!(start.len(), end.len(), "start/end score length mismatch");
    let n = start.len();
    let width = max_span.max(1);
    let mut best = (0, 0, start[0] + end[0]);
    for m1 in 0..n {
        for m2 in m1..n.min(m1 + width) {
            let s = start[m1] + end[m2];
            if s > best.2 {
                best = (m1, m2, s);
            }
        }
    }
    best
}

/// Best legal span over sentinel-prefixed scores: either the sentinel alone
/// or a span inside the passage proper.
pub fn best_span_with_sentinel(start: &[f64], end: &[f64], max_span: usize) -> (usize, usize, f64) {
    let sentinel = start[0] + end[0];
    if start.len() == 1 {
        return (0, 0, sentinel);
    }
    let (m1, m2, s) = best_span(&start[1..], &end[1..], max_span);
    if sentinel >= s {
        (0, 0, sentinel)
    } else {
        (m1 + 1, m2 + 1, s)
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Fused score of every `(s_rt, s_rd)` candidate.
pub fn combine_scores(candidates: &[(f64, f64)], mode: FusionMode) -> Vec<f64> {
    match mode {
        FusionMode::Literal => candidates.iter().map(|(rt, rd)| rt * rd).collect(),
        FusionMode::Normalized => {
            let rt: Vec<f64> = candidates.iter().map(|c| c.0).collect();
            let rd: Vec<f64> = candidates.iter().map(|c| c.1).collect();
            softmax(&rt)
                .into_iter()
                .zip(softmax(&rd))
                .map(|(a, b)| a * b)
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadOptions {
    pub fusion: FusionMode,
    /// Passage tokens beyond this are not read.
    pub max_passage_tokens: usize,
}

/// Reads every ranked passage and returns the span with the highest fused
/// score; earlier-ranked passages win ties.
pub fn answer<S: AsRef<str> + Sync>(
    params: &ReaderParams,
    question: &[S],
    ranked: &RankedList,
    collection: &PassageCollection,
    options: &ReadOptions,
) -> Result<SpanPrediction> {
    if ranked.entries.is_empty() {
        return Err(Error::InvalidArgument("no passages to read".into()));
    }
    let per_passage: Vec<(usize, usize, f64)> = ranked
        .entries
        .par_iter()
        .map(|e| {
            let p = collection
                .get(&e.passage_id)
                .ok_or_else(|| Error::missing(format!("passage {:?}", e.passage_id)))?;
            let tokens = with_sentinel(&p.tokens, options.max_passage_tokens);
            let (start, end) = token_scores(params, question, &tokens)?;
            Ok(best_span_with_sentinel(&start, &end, params.max_span))
        })
        .collect::<Result<_>>()?;

    let pairs: Vec<(f64, f64)> = ranked
        .entries
        .iter()
        .zip(&per_passage)
        .map(|(e, s)| (e.score, s.2))
        .collect();
    let fused = combine_scores(&pairs, options.fusion);
    let mut best = 0;
    for (i, &f) in fused.iter().enumerate() {
        if f > fused[best] {
            best = i;
        }
    }

    let entry = &ranked.entries[best];
    let (m1, m2, s_rd) = per_passage[best];
    let (span, text) = if m1 == 0 {
        (None, CANNOTANSWER.to_string())
    } else {
        let p = collection.get(&entry.passage_id).expect("checked above");
        (Some((m1 - 1, m2 - 1)), detokenize(&p.tokens[m1 - 1..m2]))
    };
    Ok(SpanPrediction {
        passage_id: entry.passage_id.clone(),
        span,
        text,
        s_rd,
        s_rt: entry.score,
        combined: fused[best],
    })
}
