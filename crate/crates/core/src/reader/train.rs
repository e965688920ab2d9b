//! Span cross-entropy training for the reader.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{with_sentinel, ReaderParams};
use crate::corpus::PassageCollection;
use crate::encoder::EncoderGrad;
use crate::error::{Error, Result};
use crate::retriever::{TrainHyper, TrainReport};

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderExample {
    pub question: Vec<String>,
    /// Position of the gold passage in the collection.
    pub passage: usize,
    /// Inclusive gold span in passage coordinates; `None` for unanswerable.
    pub span: Option<(usize, usize)>,
    /// Extra passages sharing the start/end softmax with the gold passage.
    pub distractors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderGrad {
    pub encoder: EncoderGrad,
    pub w_start: Vec<f64>,
    pub w_end: Vec<f64>,
    pub b_start: f64,
    pub b_end: f64,
}

impl ReaderGrad {
    fn zeros(dim: usize) -> Self {
        ReaderGrad {
            encoder: EncoderGrad::zeros(dim),
            w_start: vec![0.0; 3 * dim],
            w_end: vec![0.0; 3 * dim],
            b_start: 0.0,
            b_end: 0.0,
        }
    }

    /// Same flat layout as [`ReaderParams::flat_mut`].
    pub fn flat(&self, index: usize, params: &ReaderParams) -> f64 {
        let base = params.encoder.param_count();
        let ws = self.w_start.len();
        let we = self.w_end.len();
        if index < base {
            self.encoder.flat(index, &params.encoder)
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
}

fn log_softmax_grad(scores: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let loss = m + z.ln() - scores[target];
    let grad = e
        .iter()
        .enumerate()
        .map(|(i, x)| x / z - if i == target { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

fn sentinel_tokens(
    collection: &PassageCollection,
    position: usize,
    max_passage_tokens: usize,
) -> Result<Vec<String>> {
    let p = collection
        .passages()
        .get(position)
        .ok_or_else(|| Error::InvalidArgument(format!("passage position {position}")))?;
    Ok(with_sentinel(&p.tokens, max_passage_tokens))
}

fn targets(
    ex: &ReaderExample,
    collection: &PassageCollection,
    max_passage_tokens: usize,
) -> Result<(Vec<String>, usize, usize)> {
    let tokens = sentinel_tokens(collection, ex.passage, max_passage_tokens)?;
    let p = &collection.passages()[ex.passage];
    if ex.distractors.contains(&ex.passage) {
        return Err(Error::InvalidArgument(format!(
            "gold passage {:?} listed among its distractors",
            p.id
        )));
    }
    let (s, e) = match ex.span {
        None => (0, 0),
        Some((s, e)) => {
            if s > e || e + 1 >= tokens.len() {
                return Err(Error::InvalidArgument(format!(
                    "span [{s}, {e}] invalid for passage {:?} of {} readable tokens",
                    p.id,
                    tokens.len() - 1
                )));
            }
            (s + 1, e + 1)
        }
    };
    Ok((tokens, s, e))
}

pub fn reader_loss(
    params: &ReaderParams,
    batch: &[ReaderExample],
    collection: &PassageCollection,
    max_passage_tokens: usize,
) -> Result<f64> {
    Ok(reader_loss_grad(params, batch, collection, max_passage_tokens)?.0)
}

/// Mean over the batch of start cross-entropy plus end cross-entropy. The
/// softmax runs over the gold passage and its distractors together.
pub fn reader_loss_grad(
    params: &ReaderParams,
    batch: &[ReaderExample],
    collection: &PassageCollection,
    max_passage_tokens: usize,
) -> Result<(f64, ReaderGrad)> {
    let d = params.dim();
    let b = batch.len().max(1) as f64;
    let mut grad = ReaderGrad::zeros(d);
    let mut total = 0.0;
    for ex in batch {
        let (tokens, gs, ge) = targets(ex, collection, max_passage_tokens)?;
        let mut forwards = vec![params.forward(&ex.question, &tokens)?];
        for &pos in &ex.distractors {
            let t = sentinel_tokens(collection, pos, max_passage_tokens)?;
            forwards.push(params.forward(&ex.question, &t)?);
        }
        let start: Vec<f64> = forwards.iter().flat_map(|f| f.start.iter().copied()).collect();
        let end: Vec<f64> = forwards.iter().flat_map(|f| f.end.iter().copied()).collect();
        let (ls, ds) = log_softmax_grad(&start, gs);
        let (le, de) = log_softmax_grad(&end, ge);
        total += ls + le;

        let question = &forwards[0].question;
        let q = &question.output;
        let mut dq = vec![0.0; d];
        let mut offset = 0;
        for f in &forwards {
            for (m, t) in f.tokens.iter().enumerate() {
                let (gs, ge) = (ds[offset + m] / b, de[offset + m] / b);
                grad.b_start += gs;
                grad.b_end += ge;
                let mut dt = vec![0.0; d];
                for j in 0..d {
                    let feats = [t[j], t[j] * q[j], q[j]];
                    for (k, x) in feats.iter().enumerate() {
                        grad.w_start[k * d + j] += gs * x;
                        grad.w_end[k * d + j] += ge * x;
                    }
                    let g1 = gs * params.w_start[j] + ge * params.w_end[j];
                    let g2 = gs * params.w_start[d + j] + ge * params.w_end[d + j];
                    let g3 = gs * params.w_start[2 * d + j] + ge * params.w_end[2 * d + j];
                    dt[j] = g1 + g2 * q[j];
                    dq[j] += g2 * t[j] + g3;
                }
                let bucket = f.buckets[m];
                params
                    .encoder
                    .backprop(&mut grad.encoder, &[bucket], params.encoder.row(bucket), &dt);
            }
            offset += f.tokens.len();
        }
        params
            .encoder
            .backprop(&mut grad.encoder, &question.buckets, &question.mean, &dq);
    }
    Ok((total / b, grad))
}

fn apply(params: &mut ReaderParams, grad: &ReaderGrad, lr: f64) {
    params.encoder.apply(&grad.encoder, lr);
    params
        .w_start
        .iter_mut()
        .zip(&grad.w_start)
        .for_each(|(w, g)| *w -= lr * g);
    params
        .w_end
        .iter_mut()
        .zip(&grad.w_end)
        .for_each(|(w, g)| *w -= lr * g);
    params.b_start -= lr * grad.b_start;
    params.b_end -= lr * grad.b_end;
}

/// Trains all reader parameters in place with plain gradient descent.
pub fn train_reader(
    params: &mut ReaderParams,
    examples: &[ReaderExample],
    collection: &PassageCollection,
    hyper: &TrainHyper,
    max_passage_tokens: usize,
) -> Result<TrainReport> {
    for ex in examples {
        targets(ex, collection, max_passage_tokens)?;
        for &pos in &ex.distractors {
            sentinel_tokens(collection, pos, max_passage_tokens)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let batch: Vec<ReaderExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grad) = reader_loss_grad(params, &batch, collection, max_passage_tokens)?;
            sum += loss;
            n += 1;
            if hyper.learning_rate != 0.0 {
                apply(params, &grad, hyper.learning_rate);
            }
        }
        report.epoch_loss.push(sum / n.max(1) as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;

    fn fixture() -> (PassageCollection, Vec<ReaderExample>) {
        let c = PassageCollection::from_passages(vec![
            Passage::new("p0", None, "zorvak was born in the city of melbrin"),
            Passage::new("p1", None, "melbrin is located in the province of dunmore"),
        ])
        .unwrap();
        let q = |s: &str| s.split_whitespace().map(str::to_string).collect();
        let examples = vec![
            ReaderExample {
                question: q("⟨Q⟩ where was zorvak born"),
                passage: 0,
                span: Some((7, 7)),
                distractors: vec![1],
            },
            ReaderExample {
                question: q("⟨Q⟩ which province is melbrin in"),
                passage: 1,
                span: Some((6, 7)),
                distractors: vec![],
            },
            ReaderExample {
                question: q("⟨Q⟩ did it rain"),
                passage: 1,
                span: None,
                distractors: vec![0],
            },
        ];
        (c, examples)
    }

    fn hyper(lr: f64) -> TrainHyper {
        TrainHyper {
            learning_rate: lr,
            epochs: 3,
            batch_size: 2,
            seed: 1,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (c, ex) = fixture();
        let p0 = ReaderParams::init(256, 6, 2, 0.3, 30).unwrap();
        let mut p = p0.clone();
        train_reader(&mut p, &ex, &c, &hyper(0.0), 512).unwrap();
        assert_eq!(p.to_bytes(), p0.to_bytes());
    }

    #[test]
    fn one_step_lowers_loss() {
        let (c, ex) = fixture();
        let p = ReaderParams::init(256, 6, 2, 0.3, 30).unwrap();
        let (before, g) = reader_loss_grad(&p, &ex, &c, 512).unwrap();
        let mut p2 = p.clone();
        apply(&mut p2, &g, 1e-2);
        let after = reader_loss(&p2, &ex, &c, 512).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn invalid_span_rejected() {
        let (c, mut ex) = fixture();
        ex[0].span = Some((7, 8));
        let mut p = ReaderParams::init(256, 6, 2, 0.3, 30).unwrap();
        assert!(train_reader(&mut p, &ex, &c, &hyper(0.1), 512).is_err());
        ex[0].span = Some((3, 2));
        assert!(train_reader(&mut p, &ex, &c, &hyper(0.1), 512).is_err());
    }

    #[test]
    fn distractor_cannot_be_gold() {
        let (c, mut ex) = fixture();
        ex[0].distractors = vec![0];
        let mut p = ReaderParams::init(256, 6, 2, 0.3, 30).unwrap();
        assert!(train_reader(&mut p, &ex, &c, &hyper(0.1), 512).is_err());
        ex[0].distractors = vec![9];
        assert!(train_reader(&mut p, &ex, &c, &hyper(0.1), 512).is_err());
    }

    #[test]
    fn bias_gradient_vanishes() {
        let (c, ex) = fixture();
        let p = ReaderParams::init(256, 6, 2, 0.3, 30).unwrap();
        let (_, g) = reader_loss_grad(&p, &ex, &c, 512).unwrap();
        assert!(g.b_start.abs() < 1e-12 && g.b_end.abs() < 1e-12);
    }
}
