use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Snippet;
use crate::error::{Error, Result};

/// Replacement probabilities for snippet corruption.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Probability that a snippet gets the replacement phase at all.
    pub p1: f64,
    /// Per-sentence replacement probability within such a snippet.
    pub p2: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec { p1: 0.5, p2: 0.5 }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p1", self.p1), ("p2", self.p2)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 1000;

/// Builds the corrupt counterpart of `s`.
///
/// The sentence order is shuffled (a shuffle reproducing the original
/// sequence is redrawn). Then, with probability `p1`, each sentence is
/// replaced with probability `p2` by a sentence drawn uniformly from the
/// snippets in `pool` that do not overlap `s`.
pub fn corrupt_snippet<R: Rng + ?Sized>(
    s: &Snippet,
    pool: &[Snippet],
    spec: &CorruptionSpec,
    rng: &mut R,
) -> Result<Snippet> {
    let n = s.real_len();
    if n < 2 || s.sentences.iter().all(|x| *x == s.sentences[0]) {
        return Err(Error::Corruption(n));
    }
    let donors: Vec<&Vec<String>> = pool
        .iter()
        .filter(|p| p.doc_id == s.doc_id && !p.overlaps(s))
        .flat_map(|p| &p.sentences)
        .collect();

    for _ in 0..MAX_ATTEMPTS {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut sentences: Vec<Vec<String>> = order.iter().map(|&i| s.sentences[i].clone()).collect();
        if sentences == s.sentences {
            continue;
        }
        if !donors.is_empty() && rng.random_bool(spec.p1) {
            for slot in sentences.iter_mut() {
                if rng.random_bool(spec.p2) {
                    *slot = donors[rng.random_range(0..donors.len())].clone();
                }
            }
        }
        if sentences == s.sentences {
            continue;
        }
        return Ok(Snippet {
            doc_id: s.doc_id.clone(),
            start: s.start,
            labels: vec![0; n],
            sentences,
            capacity: s.capacity,
            corrupt: true,
        });
    }
    Err(Error::Corruption(n))
}
