use super::Snippet;
use crate::embeddings::EmbeddingTable;

/// Padded, id-mapped snippets ready for the model.
///
/// Token arrays are `n × k × (t + 1)` with the sentence-start token at
/// position 0 of every sentence, including padding sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct SnippetBatch {
    pub n: usize,
    pub k: usize,
    pub t: usize,
    pub token_ids: Vec<usize>,
    pub token_mask: Vec<bool>,
    pub sentence_mask: Vec<bool>,
    /// 1 where the sentence starts a segment; 0 elsewhere and on padding.
    pub labels: Vec<u8>,
    pub loss_mask: Vec<bool>,
    pub doc_ids: Vec<String>,
    pub starts: Vec<usize>,
}

impl SnippetBatch {
    pub fn tokens_per_sentence(&self) -> usize {
        self.t + 1
    }

    pub fn sentence_count(&self) -> usize {
        self.n * self.k
    }
}

/// Maps snippets to ids, trimming sentences to `t` tokens after the
/// sentence-start token and padding sentences and snippets.
///
/// The loss mask excludes padding sentences, the first sentence of a
/// document, and every sentence of a corrupt snippet.
pub fn batch_and_pad(snippets: &[Snippet], table: &EmbeddingTable, k: usize, t: usize) -> SnippetBatch {
    let n = snippets.len();
    let width = t + 1;
    let mut token_ids = vec![table.pad_id(); n * k * width];
    let mut token_mask = vec![false; n * k * width];
    let mut sentence_mask = vec![false; n * k];
    let mut labels = vec![0u8; n * k];
    let mut loss_mask = vec![false; n * k];

    for (b, snip) in snippets.iter().enumerate() {
        assert!(snip.real_len() <= k, "snippet has {} sentences, window is {k}", snip.real_len());
        for i in 0..k {
            let row = (b * k + i) * width;
            token_ids[row] = table.ss_id();
            token_mask[row] = true;
            let Some(sentence) = snip.sentences.get(i) else { continue };
            for (j, word) in sentence.iter().take(t).enumerate() {
                token_ids[row + 1 + j] = table.lookup(word).0;
                token_mask[row + 1 + j] = true;
            }
            sentence_mask[b * k + i] = true;
            labels[b * k + i] = snip.labels[i];
            loss_mask[b * k + i] = !snip.corrupt && !(snip.start == 0 && i == 0);
        }
    }

    SnippetBatch {
        n,
        k,
        t,
        token_ids,
        token_mask,
        sentence_mask,
        labels,
        loss_mask,
        doc_ids: snippets.iter().map(|s| s.doc_id.clone()).collect(),
        starts: snippets.iter().map(|s| s.start).collect(),
    }
}
