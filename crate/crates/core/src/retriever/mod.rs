//! Dense passage retrieval: index, exact search, training objectives.

mod index;
mod loss;
mod train;

pub use index::{build_index, rank_order, score, DenseIndex, RankedList, ScoredPassage};
pub use loss::{kd_grad, kd_loss, multitask_loss, nll_grad, nll_loss};
pub use train::{
    epoch_batches, student_loss_grad, teacher_loss, teacher_loss_grad, teacher_targets,
    train_student, train_teacher, RetrievalExample, StudentObjective, TrainBatch, TrainHyper,
    TrainReport,
};
