use super::{Document, Snippet};
use crate::error::{Error, Result};

/// Training windows of `k` sentences with stride `k / 2`.
///
/// A tail window ending at the last sentence is added when the regular
/// stride stops short of it; documents shorter than `k` give one padded
/// window.
pub fn training_windows(doc: &Document, k: usize) -> Result<Vec<Snippet>> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::Config(format!("training window size must be even and >= 2, got {k}")));
    }
    if doc.is_empty() {
        return Err(Error::EmptyDocument(doc.id.clone()));
    }
    let n = doc.len();
    if n <= k {
        return Ok(vec![doc.snippet(0, n, k)]);
    }
    let stride = k / 2;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + k <= n).collect();
    let last = *starts.last().unwrap();
    if last + k < n {
        starts.push(n - k);
    }
    Ok(starts.into_iter().map(|s| doc.snippet(s, k, k)).collect())
}

/// Every window of `k` consecutive sentences (stride 1).
pub fn inference_windows(doc: &Document, k: usize) -> Result<Vec<Snippet>> {
    if k == 0 {
        return Err(Error::Config("window size must be positive".into()));
    }
    if doc.is_empty() {
        return Err(Error::EmptyDocument(doc.id.clone()));
    }
    let n = doc.len();
    if n <= k {
        return Ok(vec![doc.snippet(0, n, k)]);
    }
    Ok((0..=n - k).map(|s| doc.snippet(s, k, k)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(n: usize) -> Document {
        Document {
            id: "d".into(),
            sentences: (0..n).map(|i| vec![format!("w{i}")]).collect(),
            boundaries: (0..n).map(|i| u8::from(i == 0)).collect(),
        }
    }

    fn starts(n: usize, k: usize) -> Vec<usize> {
        training_windows(&doc(n), k).unwrap().iter().map(|s| s.start).collect()
    }

    #[test]
    fn stride_half_window() {
        assert_eq!(starts(10, 4), vec![0, 2, 4, 6]);
    }

    #[test]
    fn tail_window_reaches_last_sentence() {
        assert_eq!(starts(11, 4), vec![0, 2, 4, 6, 7]);
    }

    #[test]
    fn short_document_is_padded() {
        let w = training_windows(&doc(3), 4).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].real_len(), 3);
        assert!(w[0].is_padded(3));
    }

    #[test]
    fn exact_fit_has_no_tail() {
        assert_eq!(starts(4, 4), vec![0]);
    }

    #[test]
    fn odd_window_rejected() {
        assert!(training_windows(&doc(5), 3).is_err());
    }

    #[test]
    fn inference_stride_one() {
        let w = inference_windows(&doc(5), 3).unwrap();
        assert_eq!(w.iter().map(|s| s.start).collect::<Vec<_>>(), vec![0, 1, 2]);
        let w = inference_windows(&doc(2), 3).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].real_len(), 2);
    }

    proptest! {
        #[test]
        fn every_sentence_is_covered(n in 1usize..60, half in 1usize..8) {
            let k = half * 2;
            let windows = training_windows(&doc(n), k).unwrap();
            let mut seen = vec![false; n];
            for w in &windows {
                prop_assert!(w.real_len() >= 1 && w.real_len() <= k);
                prop_assert_eq!(w.labels.len(), w.sentences.len());
                for i in w.range() {
                    seen[i] = true;
                }
            }
            prop_assert!(seen.into_iter().all(|s| s));
        }
    }
}
