use std::fs;
use std::path::Path;

use log::warn;
use serde::Deserialize;

use super::Document;
use crate::error::{Error, Result};

/// Segment delimiter line of the Choi format.
pub const CHOI_DELIMITER: &str = "==========";

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JsonlCorpus {
    pub documents: Vec<Document>,
    /// Documents whose first boundary flag was forced to 1.
    pub coerced: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    id: String,
    sentences: Vec<Vec<String>>,
    boundaries: Vec<u8>,
}

pub fn parse_jsonl(path: impl AsRef<Path>) -> Result<JsonlCorpus> {
    let path = path.as_ref();
    parse_jsonl_str(&fs::read_to_string(path)?, path)
}

/// Parses JSONL text; `origin` is only used in error messages.
pub fn parse_jsonl_str(text: &str, origin: &Path) -> Result<JsonlCorpus> {
    let mut documents = Vec::new();
    let mut coerced = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument =
            serde_json::from_str(line).map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        if raw.sentences.len() != raw.boundaries.len() {
            return Err(Error::parse(
                origin,
                lineno,
                format!(
                    "document {:?}: {} sentences but {} boundaries",
                    raw.id,
                    raw.sentences.len(),
                    raw.boundaries.len()
                ),
            ));
        }
        if raw.sentences.is_empty() {
            return Err(Error::parse(origin, lineno, format!("document {:?} has no sentences", raw.id)));
        }
        if let Some(j) = raw.sentences.iter().position(|s| s.iter().all(|t| t.trim().is_empty())) {
            return Err(Error::parse(origin, lineno, format!("document {:?}: sentence {j} is empty", raw.id)));
        }
        if raw.boundaries.iter().any(|&b| b > 1) {
            return Err(Error::parse(origin, lineno, "boundaries must be 0 or 1"));
        }
        let mut boundaries = raw.boundaries;
        if boundaries[0] != 1 {
            boundaries[0] = 1;
            coerced += 1;
        }
        documents.push(Document {
            id: raw.id,
            sentences: raw.sentences,
            boundaries,
        });
    }
    if coerced > 0 {
        warn!("{}: first boundary coerced to 1 in {coerced} document(s)", origin.display());
    }
    Ok(JsonlCorpus { documents, coerced })
}

pub fn write_jsonl_string(documents: &[Document]) -> String {
    let mut out = String::new();
    for doc in documents {
        out.push_str(&serde_json::to_string(doc).expect("documents serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: impl AsRef<Path>, documents: &[Document]) -> Result<()> {
    fs::write(path, write_jsonl_string(documents))?;
    Ok(())
}

/// Reads a Choi-format file; the document id is the file stem.
pub fn parse_choi(path: impl AsRef<Path>) -> Result<Document> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_choi_str(&fs::read_to_string(path)?, &id)
}

pub fn parse_choi_str(text: &str, id: &str) -> Result<Document> {
    let mut sentences = Vec::new();
    let mut boundaries = Vec::new();
    let mut segment_start = true;
    for line in text.lines() {
        if line.trim_end_matches('\r') == CHOI_DELIMITER {
            segment_start = true;
            continue;
        }
        let tokens = tokenize(line);
        if tokens.is_empty() {
            continue;
        }
        sentences.push(tokens);
        boundaries.push(u8::from(segment_start || boundaries.is_empty()));
        segment_start = false;
    }
    if sentences.is_empty() {
        return Err(Error::EmptyDocument(id.to_string()));
    }
    Ok(Document {
        id: id.to_string(),
        sentences,
        boundaries,
    })
}

/// Renders a document in Choi format, with a delimiter before every segment and at the end.
pub fn write_choi(doc: &Document) -> String {
    let mut out = String::new();
    for (sentence, &b) in doc.sentences.iter().zip(&doc.boundaries) {
        if b == 1 || out.is_empty() {
            out.push_str(CHOI_DELIMITER);
            out.push('\n');
        }
        out.push_str(&sentence.join(" "));
        out.push('\n');
    }
    out.push_str(CHOI_DELIMITER);
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn origin() -> &'static Path {
        Path::new("test.jsonl")
    }

    #[test]
    fn jsonl_single_document() {
        let c = parse_jsonl_str(r#"{"id":"d1","sentences":[["a"],["b"]],"boundaries":[1,0]}"#, origin()).unwrap();
        assert_eq!(c.documents.len(), 1);
        assert_eq!(c.documents[0].len(), 2);
        assert_eq!(c.documents[0].segment_count(), 1);
        assert_eq!(c.coerced, 0);
    }

    #[test]
    fn jsonl_coerces_first_boundary() {
        let c = parse_jsonl_str(r#"{"id":"d1","sentences":[["a"],["b"]],"boundaries":[0,0]}"#, origin()).unwrap();
        assert_eq!(c.documents[0].boundaries, vec![1, 0]);
        assert_eq!(c.coerced, 1);
    }

    #[test]
    fn jsonl_length_mismatch_names_line() {
        let text = "{\"id\":\"ok\",\"sentences\":[[\"a\"]],\"boundaries\":[1]}\n{\"id\":\"bad\",\"sentences\":[[\"a\"]],\"boundaries\":[1,0]}\n";
        match parse_jsonl_str(text, origin()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("bad"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn jsonl_rejects_malformed_and_missing_fields() {
        assert!(matches!(parse_jsonl_str("{not json", origin()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse_jsonl_str(r#"{"id":"x","sentences":[["a"]]}"#, origin()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn choi_two_segments() {
        let d = parse_choi_str("a b\n==========\nc d\n", "x").unwrap();
        assert_eq!(d.sentences, vec![vec!["a", "b"], vec!["c", "d"]]);
        assert_eq!(d.boundaries, vec![1, 1]);
    }

    #[test]
    fn choi_without_delimiters_is_one_segment() {
        let d = parse_choi_str("a\nb\nc\n", "x").unwrap();
        assert_eq!(d.boundaries, vec![1, 0, 0]);
    }

    #[test]
    fn choi_skips_empty_segments_and_outer_delimiters() {
        let d = parse_choi_str("==========\nA b\n==========\n==========\nc\nd\n==========\n", "x").unwrap();
        assert_eq!(d.boundaries, vec![1, 1, 0]);
        assert_eq!(d.sentences[0], vec!["a", "b"]);
    }

    #[test]
    fn choi_empty_file_errors() {
        assert!(matches!(parse_choi_str("", "x"), Err(Error::EmptyDocument(_))));
        assert!(matches!(parse_choi_str("==========\n\n", "x"), Err(Error::EmptyDocument(_))));
    }

    fn normalized_document() -> impl Strategy<Value = Document> {
        let sentence = prop::collection::vec("[a-z0-9]{1,6}", 1..5);
        prop::collection::vec((sentence, any::<bool>()), 1..12).prop_map(|rows| {
            let (sentences, flags): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
            let mut boundaries: Vec<u8> = flags.into_iter().map(u8::from).collect();
            boundaries[0] = 1;
            Document {
                id: "doc".into(),
                sentences,
                boundaries,
            }
        })
    }

    proptest! {
        #[test]
        fn choi_round_trip(doc in normalized_document()) {
            let back = parse_choi_str(&write_choi(&doc), "doc").unwrap();
            prop_assert_eq!(back, doc);
        }

        #[test]
        fn jsonl_round_trip(docs in prop::collection::vec(normalized_document(), 1..4)) {
            let back = parse_jsonl_str(&write_jsonl_string(&docs), origin()).unwrap();
            prop_assert_eq!(back.documents, docs);
        }
    }
}
