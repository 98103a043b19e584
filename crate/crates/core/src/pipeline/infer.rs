use serde::{Deserialize, Serialize};

use crate::data::{batch_and_pad, inference_windows, Document};
use crate::embeddings::EmbeddingTable;
use crate::error::Result;
use crate::model::{ModelConfig, ModelParams, Network};

/// Windows scored per forward pass during inference.
const INFER_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub doc_id: String,
    /// Averaged boundary probability per sentence.
    pub probabilities: Vec<f64>,
    /// 1 where a segment starts; the first sentence is always 1.
    pub boundaries: Vec<u8>,
}

/// Stride-1 windowed segmentation with the threshold `config.tau`.
pub fn infer_document(
    doc: &Document,
    table: &EmbeddingTable,
    params: &ModelParams<f32>,
    config: &ModelConfig,
) -> Result<SegmentationResult> {
    let net = Network::new(config, params, table)?;
    infer_with(&net, doc)
}

/// As [`infer_document`] for a network that has already been validated.
pub fn infer_with(net: &Network<'_, f32>, doc: &Document) -> Result<SegmentationResult> {
    let k = net.config.k;
    let windows = inference_windows(doc, k)?;
    let mut scored = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(INFER_BATCH) {
        let batch = batch_and_pad(chunk, net.table, k, net.config.t);
        let probs = net.boundary_probabilities(&batch)?;
        for (w, row) in chunk.iter().zip(probs.chunks_exact(k)) {
            let real: Vec<f64> = row[..w.real_len()].iter().map(|&p| p as f64).collect();
            scored.push((w.start, real));
        }
    }
    let (probabilities, _) = average_windows(doc.len(), &scored);
    Ok(SegmentationResult {
        doc_id: doc.id.clone(),
        boundaries: threshold(&probabilities, net.config.tau),
        probabilities,
    })
}

/// Mean of each sentence's predictions over the windows that contain it.
/// Returns the means and the per-sentence window counts.
pub fn average_windows(n: usize, windows: &[(usize, Vec<f64>)]) -> (Vec<f64>, Vec<usize>) {
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (start, probs) in windows {
        for (i, &p) in probs.iter().enumerate() {
            sum[start + i] += p;
            count[start + i] += 1;
        }
    }
    let mean = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    (mean, count)
}

/// Boundary wherever the probability exceeds `tau`; the first sentence is
/// always a boundary.
pub fn threshold(probabilities: &[f64], tau: f64) -> Vec<u8> {
    probabilities
        .iter()
        .enumerate()
        .map(|(i, &p)| u8::from(i == 0 || p > tau))
        .collect()
}
