use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Document;
use crate::error::{Error, Result};

/// Pk over every window `(i, i + k)`, `0 ≤ i < n − k`: the fraction of
/// windows where reference and hypothesis disagree on whether both ends lie
/// in one segment.
pub fn pk_metric(reference: &[u8], hypothesis: &[u8], k: usize) -> Result<f64> {
    let n = reference.len();
    if hypothesis.len() != n {
        return Err(Error::Metric(format!(
            "reference has {n} sentences, hypothesis {}",
            hypothesis.len()
        )));
    }
    if n < 2 || k == 0 || k >= n {
        return Err(Error::Metric(format!("k = {k} needs 1 ≤ k < n with n = {n}")));
    }
    let r = segment_ids(reference);
    let h = segment_ids(hypothesis);
    let windows = n - k;
    let wrong = (0..windows)
        .filter(|&i| (r[i] == r[i + k]) != (h[i] == h[i + k]))
        .count();
    Ok(wrong as f64 / windows as f64)
}

/// Running segment index; position 0 opens a segment whatever its flag.
fn segment_ids(boundaries: &[u8]) -> Vec<usize> {
    let mut id = 0;
    boundaries
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if i > 0 && b == 1 {
                id += 1;
            }
            id
        })
        .collect()
}

/// Half the mean reference segment length, rounded half up, at least 1.
pub fn dataset_k(documents: &[Document]) -> Result<usize> {
    let sentences: usize = documents.iter().map(Document::len).sum();
    let segments: usize = documents.iter().map(Document::segment_count).sum();
    if segments == 0 {
        return Err(Error::Metric("dataset has no segments".into()));
    }
    Ok(((sentences + segments) / (2 * segments)).max(1))
}

/// Boundary probability of the random baseline: segments over sentences.
pub fn baseline_rate(documents: &[Document]) -> f64 {
    let sentences: usize = documents.iter().map(Document::len).sum();
    let segments: usize = documents.iter().map(Document::segment_count).sum();
    if sentences == 0 {
        0.0
    } else {
        segments as f64 / sentences as f64
    }
}

/// Labels every non-first sentence a boundary with the dataset-level rate.
pub fn random_baseline(documents: &[Document], seed: u64) -> Vec<Vec<u8>> {
    let p = baseline_rate(documents);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    documents
        .iter()
        .map(|d| {
            (0..d.len())
                .map(|i| u8::from(i == 0 || rng.random_bool(p)))
                .collect()
        })
        .collect()
}
