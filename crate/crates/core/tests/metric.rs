use cats_core::data::Document;
use cats_core::pipeline::{pk_metric, random_baseline, synth_documents, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pk from segment membership: two sentences agree when both segmentations
/// put them in the same segment or both put them in different ones.
fn pk_by_membership(reference: &[u8], hypothesis: &[u8], k: usize) -> f64 {
    let ids = |b: &[u8]| -> Vec<usize> {
        b.iter()
            .scan(0usize, |seg, &x| {
                *seg += x as usize;
                Some(*seg)
            })
            .collect()
    };
    let (r, h) = (ids(reference), ids(hypothesis));
    let n = reference.len();
    let wrong = (0..n - k).filter(|&i| (r[i] == r[i + k]) != (h[i] == h[i + k])).count();
    wrong as f64 / (n - k) as f64
}

#[test]
fn matches_membership_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..1000 {
        let n = rng.random_range(2..80);
        let k = rng.random_range(1..n);
        let mut draw = || {
            let rate = rng.random_range(0.0..1.0);
            let mut b: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(rate))).collect();
            b[0] = 1;
            b
        };
        let (r, h) = (draw(), draw());
        assert_eq!(pk_metric(&r, &h, k).unwrap(), pk_by_membership(&r, &h, k), "{r:?} {h:?} {k}");
    }
}

#[test]
fn random_baseline_near_one_half() {
    let docs: Vec<Document> = synth_documents(&SynthSpec {
        n_docs: 50,
        ..SynthSpec::default()
    })
    .unwrap();
    let k = cats_core::pipeline::dataset_k(&docs).unwrap();
    let mut scores = Vec::new();
    for seed in 0..100 {
        let hyps = random_baseline(&docs, seed);
        let mean = docs
            .iter()
            .zip(&hyps)
            .map(|(d, h)| pk_metric(&d.boundaries, h, k).unwrap())
            .sum::<f64>()
            / docs.len() as f64;
        scores.push(mean);
    }
    let avg = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!((0.4..=0.6).contains(&avg), "{avg}");
    assert!(scores.iter().all(|s| (0.3..=0.7).contains(s)));
}
