//! Training, windowed inference, evaluation and synthetic corpora.

mod eval;
mod infer;
mod metric;
mod synth;
mod train;

pub use eval::{evaluate, DocumentScore, EvalReport};
pub use infer::{average_windows, infer_document, infer_with, threshold, SegmentationResult};
pub use metric::{baseline_rate, dataset_k, pk_metric, random_baseline};
pub use synth::{noise_word, synth_corpus, synth_documents, synth_table, topic_word, SynthSpec};
pub use train::{train, train_with, LogEntry, Objective, TrainLog, TrainOutput, TrainSettings};
