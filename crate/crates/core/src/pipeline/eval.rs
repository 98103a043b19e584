use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::metric::{dataset_k, pk_metric};
use crate::data::Document;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentScore {
    pub doc_id: String,
    pub pk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub k: usize,
    pub k_overridden: bool,
    pub per_document: Vec<DocumentScore>,
    /// Unweighted mean over scored documents; absent when none was scored.
    pub macro_pk: Option<f64>,
    pub documents: usize,
    pub sentences: usize,
    pub segments: usize,
    /// Documents with fewer than `k + 1` sentences.
    pub skipped: usize,
    pub model: Option<String>,
    pub seed: Option<u64>,
}

/// Scores `hypotheses` (boundaries keyed by document id) against `dataset`.
pub fn evaluate(
    dataset_id: &str,
    dataset: &[Document],
    hypotheses: &HashMap<String, Vec<u8>>,
    k: Option<usize>,
) -> Result<EvalReport> {
    let k_used = match k {
        Some(0) => return Err(Error::Metric("k must be at least 1".into())),
        Some(k) => k,
        None => dataset_k(dataset)?,
    };
    let mut per_document = Vec::new();
    let mut skipped = 0;
    for doc in dataset {
        let hyp = hypotheses
            .get(&doc.id)
            .ok_or_else(|| Error::MissingResult(doc.id.clone()))?;
        if hyp.len() != doc.len() {
            return Err(Error::Metric(format!(
                "document {:?}: {} reference sentences, {} hypothesis labels",
                doc.id,
                doc.len(),
                hyp.len()
            )));
        }
        if doc.len() < k_used + 1 {
            skipped += 1;
            continue;
        }
        per_document.push(DocumentScore {
            doc_id: doc.id.clone(),
            pk: pk_metric(&doc.boundaries, hyp, k_used)?,
        });
    }
    let macro_pk = (!per_document.is_empty())
        .then(|| per_document.iter().map(|d| d.pk).sum::<f64>() / per_document.len() as f64);
    Ok(EvalReport {
        dataset: dataset_id.to_string(),
        k: k_used,
        k_overridden: k.is_some(),
        per_document,
        macro_pk,
        documents: dataset.len(),
        sentences: dataset.iter().map(Document::len).sum(),
        segments: dataset.iter().map(Document::segment_count).sum(),
        skipped,
        model: None,
        seed: None,
    })
}
