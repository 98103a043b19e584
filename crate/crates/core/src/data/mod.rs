//! Documents, corpus formats, training windows, snippet corruption and batching.

mod batch;
mod corrupt;
mod formats;
mod windows;

use serde::{Deserialize, Serialize};

pub use batch::{batch_and_pad, SnippetBatch};
pub use corrupt::{corrupt_snippet, CorruptionSpec};
pub use formats::{
    parse_choi, parse_choi_str, parse_jsonl, parse_jsonl_str, tokenize, write_choi, write_jsonl,
    write_jsonl_string, JsonlCorpus, CHOI_DELIMITER,
};
pub use windows::{inference_windows, training_windows};

/// A sentence-tokenized document with per-sentence segment-start flags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Vec<String>>,
    pub boundaries: Vec<u8>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn segment_count(&self) -> usize {
        self.boundaries.iter().filter(|&&b| b == 1).count()
    }

    /// Segment lengths in order.
    pub fn segment_lengths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for &b in &self.boundaries {
            match out.last_mut() {
                Some(n) if b == 0 => *n += 1,
                _ => out.push(1),
            }
        }
        out
    }

    /// Snippet covering sentences `start..start + len`.
    pub fn snippet(&self, start: usize, len: usize, capacity: usize) -> Snippet {
        let end = (start + len).min(self.len());
        Snippet {
            doc_id: self.id.clone(),
            start,
            sentences: self.sentences[start..end].to_vec(),
            labels: self.boundaries[start..end].to_vec(),
            capacity,
            corrupt: false,
        }
    }
}

/// A window of at most `capacity` consecutive sentences from one document.
///
/// Positions past `sentences.len()` are padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snippet {
    pub doc_id: String,
    pub start: usize,
    pub sentences: Vec<Vec<String>>,
    pub labels: Vec<u8>,
    pub capacity: usize,
    /// Corrupt snippets have no meaningful labels.
    pub corrupt: bool,
}

impl Snippet {
    pub fn real_len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_padded(&self, i: usize) -> bool {
        i >= self.sentences.len()
    }

    /// Document index range `[start, end)` covered by real sentences.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.sentences.len()
    }

    pub fn overlaps(&self, other: &Snippet) -> bool {
        let (a, b) = (self.range(), other.range());
        a.start < b.end && b.start < a.end
    }
}
