//! Conversational question answering over a passage collection: history-aware
//! query composition, a dense dual encoder, exact top-k search and an
//! extractive span reader.

pub mod composer;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod pipeline;
pub mod reader;
pub mod retriever;

pub use composer::{compose, AnswerSource, ComposeMode, ComposedQuery};
pub use corpus::{tokenize, Conversation, ConversationTurn, GoldAnswer, Passage, PassageCollection, CANNOTANSWER};
pub use encoder::{Embedding, EncoderParams};
pub use error::{Error, Result};
pub use evalkit::{MetricsReport, Prediction, TurnResult};
pub use pipeline::{HistoryMode, PipelineConfig};
pub use reader::{FusionMode, ReaderParams, SpanPrediction};
pub use retriever::{DenseIndex, RankedList, ScoredPassage};
