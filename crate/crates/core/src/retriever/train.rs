//! Teacher and student training for the dual encoder.
//!
//! The teacher pair is trained with the contrastive objective on
//! self-contained rewrites. The teacher's passage encoder is then frozen and
//! shared; the student question encoder is trained on composed queries with
//! the contrastive objective plus an MSE pull toward the frozen teacher's
//! embedding of the rewrite.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::index::DenseIndex;
use super::loss::{kd_grad, kd_loss, multitask_loss, nll_grad, nll_loss};
use crate::corpus::PassageCollection;
use crate::encoder::{dot, Embedding, EncoderGrad, EncoderParams, Pooled};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// One retrieval training query.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalExample {
    /// Composed query tokens fed to the student.
    pub query: Vec<String>,
    /// Rewrite-mode tokens fed to the teacher.
    pub rewrite: Option<Vec<String>>,
    /// Position of the gold passage in the collection.
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub examples: Vec<RetrievalExample>,
    /// Negative passage positions per example; never contains that
    /// example's gold.
    pub negatives: Vec<Vec<usize>>,
}

impl TrainBatch {
    /// In-batch negatives: every other example's gold, deduplicated.
    pub fn in_batch(examples: Vec<RetrievalExample>) -> Self {
        let negatives = examples
            .iter()
            .map(|ex| {
                let mut negs: Vec<usize> = Vec::new();
                for other in &examples {
                    if other.gold != ex.gold && !negs.contains(&other.gold) {
                        negs.push(other.gold);
                    }
                }
                negs
            })
            .collect();
        TrainBatch {
            examples,
            negatives,
        }
    }

    /// Adds one uniformly drawn passage per example, distinct from its gold
    /// and its existing negatives when the collection allows it.
    pub fn add_random_negatives(&mut self, n_passages: usize, rng: &mut impl Rng) {
        for (ex, negs) in self.examples.iter().zip(&mut self.negatives) {
            if n_passages <= negs.len() + 1 {
                continue;
            }
            loop {
                let cand = rng.gen_range(0..n_passages);
                if cand != ex.gold && !negs.contains(&cand) {
                    negs.push(cand);
                    break;
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        for (ex, negs) in self.examples.iter().zip(&self.negatives) {
            if negs.contains(&ex.gold) {
                return Err(Error::InvalidArgument(format!(
                    "gold passage {} listed among its own negatives",
                    ex.gold
                )));
            }
        }
        Ok(())
    }
}

/// Shuffled batches for one epoch.
pub fn epoch_batches(
    examples: &[RetrievalExample],
    batch_size: usize,
    n_passages: usize,
    rng: &mut impl Rng,
) -> Vec<TrainBatch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let mut b = TrainBatch::in_batch(chunk.iter().map(|&i| examples[i].clone()).collect());
            b.add_random_negatives(n_passages, rng);
            b
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

fn rewrite_of(ex: &RetrievalExample) -> Result<&[String]> {
    ex.rewrite
        .as_deref()
        .ok_or_else(|| Error::missing(format!("rewrite for query with gold passage {}", ex.gold)))
}

/// Candidate order per example: gold first, then negatives.
fn candidates(batch: &TrainBatch, i: usize) -> impl Iterator<Item = usize> + '_ {
    std::iter::once(batch.examples[i].gold).chain(batch.negatives[i].iter().copied())
}

fn contrastive(q: &[f64], cand_rows: &[&[f64]]) -> (f64, Vec<f64>) {
    let scores: Vec<f64> = cand_rows.iter().map(|p| dot(q, p)).collect();
    let loss = nll_loss(scores[0], &scores[1..]);
    let (gp, gn) = nll_grad(scores[0], &scores[1..]);
    let mut d_scores = Vec::with_capacity(scores.len());
    d_scores.push(gp);
    d_scores.extend(gn);
    (loss, d_scores)
}

/// Teacher batch loss (mean contrastive loss over rewrites).
pub fn teacher_loss(
    question: &EncoderParams,
    passage: &EncoderParams,
    batch: &TrainBatch,
    collection: &PassageCollection,
) -> Result<f64> {
    Ok(teacher_loss_grad(question, passage, batch, collection)?.0)
}

/// Teacher batch loss with gradients for the question and passage encoders.
pub fn teacher_loss_grad(
    question: &EncoderParams,
    passage: &EncoderParams,
    batch: &TrainBatch,
    collection: &PassageCollection,
) -> Result<(f64, EncoderGrad, EncoderGrad)> {
    batch.validate()?;
    Error::check_dim(question.dim, passage.dim)?;
    let d = question.dim;
    let mut pooled: BTreeMap<usize, Pooled> = BTreeMap::new();
    for i in 0..batch.examples.len() {
        for c in candidates(batch, i) {
            if let std::collections::btree_map::Entry::Vacant(slot) = pooled.entry(c) {
                let p = collection
                    .passages()
                    .get(c)
                    .ok_or_else(|| Error::InvalidArgument(format!("passage position {c}")))?;
                slot.insert(passage.pool(&p.tokens)?);
            }
        }
    }

    let b = batch.examples.len() as f64;
    let mut gq = EncoderGrad::zeros(d);
    let mut d_passage: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut total = 0.0;
    for (i, ex) in batch.examples.iter().enumerate() {
        let q = question.pool(rewrite_of(ex)?)?;
        let ids: Vec<usize> = candidates(batch, i).collect();
        let rows: Vec<&[f64]> = ids.iter().map(|c| pooled[c].output.as_slice()).collect();
        let (loss, d_scores) = contrastive(&q.output, &rows);
        total += loss;

        let mut dq = vec![0.0; d];
        for ((&c, row), &ds) in ids.iter().zip(&rows).zip(&d_scores) {
            let g = ds / b;
            dq.iter_mut().zip(row.iter()).for_each(|(a, p)| *a += g * p);
            let dp = d_passage.entry(c).or_insert_with(|| vec![0.0; d]);
            dp.iter_mut().zip(q.output.iter()).for_each(|(a, x)| *a += g * x);
        }
        question.backprop(&mut gq, &q.buckets, &q.mean, &dq);
    }

    let mut gp = EncoderGrad::zeros(d);
    for (c, dp) in &d_passage {
        let p = &pooled[c];
        passage.backprop(&mut gp, &p.buckets, &p.mean, dp);
    }
    Ok((total / b, gq, gp))
}

/// Trains the teacher pair in place; both encoders are updated.
pub fn train_teacher(
    question: &mut EncoderParams,
    passage: &mut EncoderParams,
    examples: &[RetrievalExample],
    collection: &PassageCollection,
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    for ex in examples {
        rewrite_of(ex)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut report = TrainReport::default();
    for _ in 0..hyper.epochs {
        let batches = epoch_batches(examples, hyper.batch_size, collection.len(), &mut rng);
        let mut sum = 0.0;
        for batch in &batches {
            let (loss, gq, gp) = teacher_loss_grad(question, passage, batch, collection)?;
            sum += loss;
            if hyper.learning_rate != 0.0 {
                question.apply(&gq, hyper.learning_rate);
                passage.apply(&gp, hyper.learning_rate);
            }
        }
        report.epoch_loss.push(sum / batches.len().max(1) as f64);
    }
    Ok(report)
}

/// Which terms of the student objective to include.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentObjective {
    Contrastive,
    Distillation,
    Multitask,
}

/// Frozen teacher embedding of every example's rewrite.
pub fn teacher_targets(
    teacher_question: &EncoderParams,
    examples: &[RetrievalExample],
) -> Result<Vec<Embedding>> {
    examples
        .iter()
        .map(|ex| teacher_question.encode(rewrite_of(ex)?))
        .collect()
}

/// Student batch loss and gradient; passage rows come from the frozen index.
/// `targets[i]` is the teacher embedding for `batch.examples[i]`.
pub fn student_loss_grad(
    student: &EncoderParams,
    index: &DenseIndex,
    batch: &TrainBatch,
    targets: &[Embedding],
    objective: StudentObjective,
) -> Result<(f64, EncoderGrad)> {
    batch.validate()?;
    Error::check_dim(index.dim(), student.dim)?;
    if targets.len() != batch.examples.len() {
        return Err(Error::InvalidArgument(format!(
            "{} teacher targets for {} examples",
            targets.len(),
            batch.examples.len()
        )));
    }
    let d = student.dim;
    let b = batch.examples.len() as f64;
    let mut grad = EncoderGrad::zeros(d);
    let mut total = 0.0;
    for (i, (ex, target)) in batch.examples.iter().zip(targets).enumerate() {
        Error::check_dim(d, target.dim())?;
        let q = student.pool(&ex.query)?;
        let mut dq = vec![0.0; d];
        let (mut nll, mut kd) = (0.0, 0.0);
        if objective != StudentObjective::Distillation {
            let ids: Vec<usize> = candidates(batch, i).collect();
            let rows: Vec<&[f64]> = ids.iter().map(|&c| index.row(c)).collect();
            let (loss, d_scores) = contrastive(&q.output, &rows);
            nll = loss;
            for (row, &ds) in rows.iter().zip(&d_scores) {
                dq.iter_mut().zip(row.iter()).for_each(|(a, p)| *a += ds * p);
            }
        }
        if objective != StudentObjective::Contrastive {
            kd = kd_loss(&q.output, target)?;
            let g = kd_grad(&q.output, target)?;
            dq.iter_mut().zip(g).for_each(|(a, g)| *a += g);
        }
        total += multitask_loss(nll, kd);
        dq.iter_mut().for_each(|x| *x /= b);
        student.backprop(&mut grad, &q.buckets, &q.mean, &dq);
    }
    Ok((total / b, grad))
}

/// Trains the student question encoder in place against a frozen passage
/// index and frozen teacher targets.
pub fn train_student(
    student: &mut EncoderParams,
    index: &DenseIndex,
    teacher_question: &EncoderParams,
    examples: &[RetrievalExample],
    hyper: &TrainHyper,
    objective: StudentObjective,
) -> Result<TrainReport> {
    Error::check_dim(teacher_question.dim, student.dim)?;
    Error::check_dim(index.dim(), student.dim)?;
    let targets = teacher_targets(teacher_question, examples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let mut batch =
                TrainBatch::in_batch(chunk.iter().map(|&i| examples[i].clone()).collect());
            batch.add_random_negatives(index.len(), &mut rng);
            let batch_targets: Vec<Embedding> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let (loss, grad) = student_loss_grad(student, index, &batch, &batch_targets, objective)?;
            sum += loss;
            n_batches += 1;
            if hyper.learning_rate != 0.0 {
                student.apply(&grad, hyper.learning_rate);
            }
        }
        report.epoch_loss.push(sum / n_batches.max(1) as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;
    use crate::encoder::init_params;
    use crate::retriever::build_index;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn fixture() -> (PassageCollection, Vec<RetrievalExample>) {
        let texts = [
            "zorvak was born in the city of melbrin",
            "quentar was born in the city of ostrava",
            "melbrin is located in the province of dunmore",
            "ostrava is located in the province of kelsing",
            "pell studied under the mentor zorvak",
            "tamsin studied under the mentor quentar",
        ];
        let c = PassageCollection::from_passages(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Passage::new(format!("p{i}"), None, *t))
                .collect(),
        )
        .unwrap();
        let ex = |q: &str, r: &str, gold| RetrievalExample {
            query: toks(q),
            rewrite: Some(toks(r)),
            gold,
        };
        let examples = vec![
            ex("where was he born zorvak", "where was zorvak born", 0),
            ex("where was he born quentar", "where was quentar born", 1),
            ex("which province melbrin", "which province is melbrin in", 2),
            ex("which province ostrava", "which province is ostrava in", 3),
            ex("who mentored pell", "who was the mentor of pell", 4),
        ];
        (c, examples)
    }

    fn hyper(lr: f64) -> TrainHyper {
        TrainHyper {
            learning_rate: lr,
            epochs: 2,
            batch_size: 3,
            seed: 4,
        }
    }

    #[test]
    fn batches_never_list_gold_as_negative() {
        let (c, examples) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dup = examples.clone();
        dup.push(examples[0].clone());
        for _ in 0..20 {
            for b in epoch_batches(&dup, 3, c.len(), &mut rng) {
                for (ex, negs) in b.examples.iter().zip(&b.negatives) {
                    assert!(!negs.contains(&ex.gold));
                    assert!(!negs.is_empty());
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_teacher() {
        let (c, examples) = fixture();
        let q0 = init_params(256, 8, 1, 0.3).unwrap();
        let (mut q, mut p) = (q0.clone(), q0.clone());
        train_teacher(&mut q, &mut p, &examples, &c, &hyper(0.0)).unwrap();
        assert_eq!(q.to_bytes(), q0.to_bytes());
        assert_eq!(p.to_bytes(), q0.to_bytes());
    }

    #[test]
    fn teacher_requires_rewrites() {
        let (c, mut examples) = fixture();
        examples[1].rewrite = None;
        let q0 = init_params(256, 8, 1, 0.3).unwrap();
        let (mut q, mut p) = (q0.clone(), q0);
        assert!(train_teacher(&mut q, &mut p, &examples, &c, &hyper(0.1)).is_err());
    }

    #[test]
    fn one_teacher_step_lowers_batch_loss() {
        let (c, examples) = fixture();
        let q = init_params(256, 8, 1, 0.3).unwrap();
        let p = q.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = epoch_batches(&examples, 5, c.len(), &mut rng).remove(0);
        let (before, gq, gp) = teacher_loss_grad(&q, &p, &batch, &c).unwrap();
        let (mut q2, mut p2) = (q.clone(), p.clone());
        q2.apply(&gq, 1e-2);
        p2.apply(&gp, 1e-2);
        let after = teacher_loss(&q2, &p2, &batch, &c).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn student_matching_teacher_has_zero_distillation() {
        let (c, mut examples) = fixture();
        for ex in &mut examples {
            ex.query = ex.rewrite.clone().unwrap();
        }
        let teacher = init_params(256, 8, 1, 0.3).unwrap();
        let index = build_index(&teacher, &c).unwrap();
        let batch = TrainBatch::in_batch(examples.clone());
        let targets = teacher_targets(&teacher, &examples).unwrap();
        let (kd, _) =
            student_loss_grad(&teacher, &index, &batch, &targets, StudentObjective::Distillation)
                .unwrap();
        assert_eq!(kd, 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_student() {
        let (c, examples) = fixture();
        let teacher = init_params(256, 8, 1, 0.3).unwrap();
        let index = build_index(&teacher, &c).unwrap();
        let mut student = teacher.clone();
        train_student(&mut student, &index, &teacher, &examples, &hyper(0.0), StudentObjective::Multitask)
            .unwrap();
        assert_eq!(student.to_bytes(), teacher.to_bytes());
    }

    #[test]
    fn student_dimension_mismatch_rejected() {
        let (c, examples) = fixture();
        let teacher = init_params(256, 8, 1, 0.3).unwrap();
        let index = build_index(&teacher, &c).unwrap();
        let mut student = init_params(256, 6, 1, 0.3).unwrap();
        assert!(matches!(
            train_student(&mut student, &index, &teacher, &examples, &hyper(0.1), StudentObjective::Multitask),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn multitask_gradient_is_sum_of_parts() {
        let (c, examples) = fixture();
        let teacher = init_params(256, 8, 1, 0.3).unwrap();
        let index = build_index(&teacher, &c).unwrap();
        let student = init_params(256, 8, 2, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = epoch_batches(&examples, 5, c.len(), &mut rng).remove(0);
        let targets = teacher_targets(&teacher, &batch.examples).unwrap();
        let run = |o| student_loss_grad(&student, &index, &batch, &targets, o).unwrap();
        let (l_nll, g_nll) = run(StudentObjective::Contrastive);
        let (l_kd, g_kd) = run(StudentObjective::Distillation);
        let (l_all, g_all) = run(StudentObjective::Multitask);
        assert!((l_all - (l_nll + l_kd)).abs() < 1e-12);
        for i in 0..student.param_count() {
            let sum = g_nll.flat(i, &student) + g_kd.flat(i, &student);
            let all = g_all.flat(i, &student);
            assert!((sum - all).abs() <= 1e-12 * (1.0 + all.abs()), "coord {i}");
        }
    }
}
