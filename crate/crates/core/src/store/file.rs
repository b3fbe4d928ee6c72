//! JSON-lines persistence.
//!
//! ```text
//! {"format":"stand-store","version":1,"vocab_size":V}
//! {"n":2,"key":[4,7],"count":3,"ids":[1,9],"probs":[0.6,0.3]}
//! ...
//! ```
//!
//! Records are written sorted by gram length, then key, so exports of equal
//! stores are byte-identical.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CompressedDistribution, NGramKey, NGramStore, StoreConfig, MAX_GRAM};
use crate::TokenId;

pub const STORE_FORMAT: &str = "stand-store";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreFileError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported store file: format {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error("store vocab_size {found} does not match expected {expected}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("line {line}: invalid record: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    n: usize,
    key: Vec<TokenId>,
    count: u64,
    ids: Vec<TokenId>,
    probs: Vec<f64>,
}

pub fn export_store<W: Write>(store: &NGramStore, mut out: W) -> Result<(), StoreFileError> {
    let header = Header { format: STORE_FORMAT.into(), version: STORE_VERSION, vocab_size: store.vocab_size() };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for n in 1..=MAX_GRAM {
        for (key, dist) in store.entries(n) {
            let (ids, probs) = dist.entries().iter().copied().unzip();
            let record = Record { n, key: key.tokens().to_vec(), count: dist.count(), ids, probs };
            writeln!(out, "{}", serde_json::to_string(&record).expect("record serializes"))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a store, refusing unknown formats/versions and, when
/// `expected_vocab` is given, a different vocabulary size.
pub fn import_store<R: BufRead>(
    input: R,
    expected_vocab: Option<usize>,
    config: StoreConfig,
) -> Result<NGramStore, StoreFileError> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or(StoreFileError::Parse { line: 1, message: "empty file".into() })?;
    let header: Header =
        serde_json::from_str(&first?).map_err(|e| StoreFileError::Parse { line: 1, message: e.to_string() })?;
    if header.format != STORE_FORMAT || header.version != STORE_VERSION {
        return Err(StoreFileError::Version { format: header.format, version: header.version });
    }
    if let Some(expected) = expected_vocab {
        if expected != header.vocab_size {
            return Err(StoreFileError::VocabMismatch { expected, found: header.vocab_size });
        }
    }
    let vocab = header.vocab_size;
    let mut store = NGramStore::with_config(vocab, config);
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| StoreFileError::Parse { line: line_no, message: e.to_string() })?;
        let invalid = |message: String| StoreFileError::Record { line: line_no, message };
        if record.key.len() != record.n {
            return Err(invalid(format!("key has {} tokens but n = {}", record.key.len(), record.n)));
        }
        let key = NGramKey::new(&record.key).ok_or_else(|| invalid(format!("n = {} out of range", record.n)))?;
        if record.ids.len() != record.probs.len() {
            return Err(invalid("ids and probs differ in length".into()));
        }
        if let Some(t) = record.key.iter().chain(&record.ids).find(|&&t| t as usize >= vocab) {
            return Err(invalid(format!("token {t} outside vocab {vocab}")));
        }
        if store.get(&key).is_some() {
            return Err(invalid(format!("duplicate key {:?}", record.key)));
        }
        let entries = record.ids.into_iter().zip(record.probs).collect();
        let dist = CompressedDistribution::from_parts(entries, record.count).map_err(invalid)?;
        store.insert(key, dist);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenseDistribution;

    fn sample_store() -> NGramStore {
        let mut store = NGramStore::new(16);
        for i in 0..40u32 {
            let ctx: Vec<TokenId> = (0..5).map(|j| (i * 3 + j * 5) % 16).collect();
            let weights: Vec<f64> = (0..16).map(|t| 1.0 + ((t * 7 + i) % 11) as f64).collect();
            store.update(&ctx, &DenseDistribution::from_weights(weights).unwrap());
        }
        store
    }

    fn export_string(store: &NGramStore) -> String {
        let mut buf = Vec::new();
        export_store(store, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn export_import_export_is_identical() {
        let store = sample_store();
        let first = export_string(&store);
        let loaded = import_store(first.as_bytes(), Some(16), StoreConfig::default()).unwrap();
        assert_eq!(export_string(&loaded), first);
        for n in 1..=MAX_GRAM {
            assert_eq!(store.entries(n), loaded.entries(n));
        }
    }

    #[test]
    fn rejects_version_and_vocab_mismatch() {
        let text = export_string(&sample_store());
        let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(
            import_store(bumped.as_bytes(), None, StoreConfig::default()),
            Err(StoreFileError::Version { version: 2, .. })
        ));
        assert!(matches!(
            import_store(text.as_bytes(), Some(32), StoreConfig::default()),
            Err(StoreFileError::VocabMismatch { expected: 32, found: 16 })
        ));
    }

    #[test]
    fn rejects_malformed_records() {
        let header = r#"{"format":"stand-store","version":1,"vocab_size":8}"#;
        for bad in [
            r#"{"n":2,"key":[1],"count":1,"ids":[1],"probs":[1.0]}"#,
            r#"{"n":1,"key":[1],"count":1,"ids":[9],"probs":[1.0]}"#,
            r#"{"n":1,"key":[1],"count":0,"ids":[2],"probs":[1.0]}"#,
            r#"{"n":5,"key":[1,1,1,1,1],"count":1,"ids":[2],"probs":[1.0]}"#,
            r#"{"n":1,"key":[1],"count":1,"ids":[2,3],"probs":[0.9,0.9]}"#,
        ] {
            let text = format!("{header}\n{bad}\n");
            assert!(import_store(text.as_bytes(), None, StoreConfig::default()).is_err(), "{bad}");
        }
    }
}
