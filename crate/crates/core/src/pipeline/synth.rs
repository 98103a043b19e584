use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Document;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};

/// Shape of a generated topic-segmentation corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_docs: usize,
    pub topics: usize,
    /// Inclusive range of segments per document.
    pub segments_per_doc: (usize, usize),
    /// Inclusive range of sentences per segment.
    pub sentences_per_segment: (usize, usize),
    /// Inclusive range of words per sentence.
    pub words_per_sentence: (usize, usize),
    pub words_per_topic: usize,
    /// Size of the topic-neutral vocabulary.
    pub noise_words: usize,
    /// Chance that a word is drawn from the neutral vocabulary.
    pub noise_rate: f64,
    pub dim: usize,
    /// Standard deviation of word vectors around their topic centroid.
    pub vector_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_docs: 50,
            topics: 4,
            segments_per_doc: (2, 4),
            sentences_per_segment: (3, 8),
            words_per_sentence: (4, 10),
            words_per_topic: 40,
            noise_words: 20,
            noise_rate: 0.2,
            dim: 16,
            vector_noise: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let ranges = [self.segments_per_doc, self.sentences_per_segment, self.words_per_sentence];
        if self.topics < 2 {
            return Err(Error::Config(format!("need at least 2 topics, got {}", self.topics)));
        }
        if ranges.iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
            return Err(Error::Config("synthetic ranges must be non-empty and positive".into()));
        }
        if self.words_per_topic == 0 || self.dim == 0 {
            return Err(Error::Config("words_per_topic and dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || (self.noise_rate > 0.0 && self.noise_words == 0) {
            return Err(Error::Config("noise_rate must lie in [0, 1] with a neutral vocabulary".into()));
        }
        if !(self.vector_noise >= 0.0) {
            return Err(Error::Config("vector_noise must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn topic_word(topic: usize, i: usize) -> String {
    format!("t{topic}w{i}")
}

pub fn noise_word(i: usize) -> String {
    format!("n{i}")
}

/// Generates documents whose consecutive segments switch topic, and an
/// embedding table in which each topic's words cluster around a centroid.
///
/// The table depends only on the vocabulary fields, `dim`, `vector_noise`
/// and `seed`; documents additionally on the document fields.
pub fn synth_corpus(spec: &SynthSpec) -> Result<(Vec<Document>, EmbeddingTable)> {
    spec.validate()?;
    Ok((synth_documents(spec)?, synth_table(spec)?))
}

pub fn synth_table(spec: &SynthSpec) -> Result<EmbeddingTable> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut entries = Vec::new();
    for topic in 0..spec.topics {
        let centroid: Vec<f64> = (0..spec.dim).map(|_| gauss(&mut rng)).collect();
        for i in 0..spec.words_per_topic {
            let v = centroid
                .iter()
                .map(|c| (c + spec.vector_noise * gauss(&mut rng)) as f32)
                .collect();
            entries.push((topic_word(topic, i), v));
        }
    }
    for i in 0..spec.noise_words {
        let v = (0..spec.dim).map(|_| gauss(&mut rng) as f32).collect();
        entries.push((noise_word(i), v));
    }
    EmbeddingTable::from_entries(spec.dim, entries)
}

pub fn synth_documents(spec: &SynthSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let mut docs = Vec::with_capacity(spec.n_docs);
    for d in 0..spec.n_docs {
        let segments = rng.random_range(spec.segments_per_doc.0..=spec.segments_per_doc.1);
        let mut sentences = Vec::new();
        let mut boundaries = Vec::new();
        let mut previous = None;
        for _ in 0..segments {
            let topic = loop {
                let t = rng.random_range(0..spec.topics);
                if Some(t) != previous {
                    break t;
                }
            };
            previous = Some(topic);
            let len = rng.random_range(spec.sentences_per_segment.0..=spec.sentences_per_segment.1);
            for s in 0..len {
                let words = rng.random_range(spec.words_per_sentence.0..=spec.words_per_sentence.1);
                let sentence = (0..words)
                    .map(|_| {
                        if spec.noise_rate > 0.0 && rng.random_bool(spec.noise_rate) {
                            noise_word(rng.random_range(0..spec.noise_words))
                        } else {
                            topic_word(topic, rng.random_range(0..spec.words_per_topic))
                        }
                    })
                    .collect();
                sentences.push(sentence);
                boundaries.push(u8::from(s == 0));
            }
        }
        docs.push(Document {
            id: format!("synth-{d:04}"),
            sentences,
            boundaries,
        });
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_jsonl_string;

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| (x * y) as f64).sum();
        let na: f64 = a.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn noiseless_topics_cluster() {
        let spec = SynthSpec {
            topics: 2,
            words_per_topic: 5,
            vector_noise: 0.0,
            noise_words: 0,
            noise_rate: 0.0,
            ..SynthSpec::default()
        };
        let table = synth_table(&spec).unwrap();
        let row = |t, i| table.lookup(&topic_word(t, i)).1.to_vec();
        let cross = cosine(&row(0, 0), &row(1, 0));
        for t in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    assert!(cosine(&row(t, i), &row(t, j)) > cross);
                }
            }
        }
    }

    #[test]
    fn documents_are_well_formed() {
        let (docs, table) = synth_corpus(&SynthSpec::default()).unwrap();
        assert_eq!(docs.len(), 50);
        for d in &docs {
            assert_eq!(d.boundaries[0], 1);
            assert!((2..=4).contains(&d.segment_count()));
            assert!(d.sentences.iter().flatten().all(|w| table.contains(w)));
        }
    }

    #[test]
    fn consecutive_segments_switch_topic() {
        let (docs, _) = synth_corpus(&SynthSpec::default()).unwrap();
        let topic = |w: &str| w.strip_prefix('t').and_then(|r| r.split('w').next()).map(String::from);
        for d in &docs {
            let mut topics: Vec<Option<String>> = Vec::new();
            for (s, &b) in d.sentences.iter().zip(&d.boundaries) {
                if b == 1 {
                    topics.push(None);
                }
                let current = topics.last_mut().unwrap();
                if current.is_none() {
                    *current = s.iter().find_map(|w| topic(w));
                }
            }
            let topics: Vec<String> = topics.into_iter().map(Option::unwrap).collect();
            assert!(topics.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec::default();
        let (a, ta) = synth_corpus(&spec).unwrap();
        let (b, tb) = synth_corpus(&spec).unwrap();
        assert_eq!(write_jsonl_string(&a), write_jsonl_string(&b));
        assert_eq!(ta, tb);
        let other = SynthSpec { seed: 1, ..spec };
        assert_ne!(write_jsonl_string(&a), write_jsonl_string(&synth_documents(&other).unwrap()));
    }

    #[test]
    fn one_topic_rejected() {
        assert!(synth_corpus(&SynthSpec { topics: 1, ..SynthSpec::default() }).is_err());
    }
}
