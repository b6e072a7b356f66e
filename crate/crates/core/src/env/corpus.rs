//! Line-delimited JSON corpus records. Every line is self-describing and
//! carries the schema version.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::modchain::{Answer, Query, Segment};
use crate::error::{CoreError, Result};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub schema_version: u32,
    pub query: Query,
    /// Token ids per segment, terminator included.
    pub segments: Vec<Vec<u32>>,
    /// Hidden op state per segment; for evaluation only.
    pub hidden_labels: Vec<usize>,
    pub answer: Answer,
}

impl CorpusRecord {
    pub fn new(
        query: Query,
        segments: &[Segment],
        hidden_labels: Vec<usize>,
        answer: Answer,
    ) -> Self {
        CorpusRecord {
            schema_version: CORPUS_SCHEMA_VERSION,
            query,
            segments: segments.iter().map(|s| s.tokens.clone()).collect(),
            hidden_labels,
            answer,
        }
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.segments
            .iter()
            .map(|t| Segment {
                tokens: t.clone(),
                op_label: None,
                truncated: t.last() != Some(&super::TERMINATOR),
            })
            .collect()
    }
}

pub fn write_corpus<W: Write>(mut w: W, records: &[CorpusRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CoreError::Format(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| CoreError::Format(format!("line {}: {e}", n + 1)))?;
        if rec.schema_version != CORPUS_SCHEMA_VERSION {
            return Err(CoreError::Format(format!(
                "line {}: schema_version {} unsupported (expected {CORPUS_SCHEMA_VERSION})",
                n + 1,
                rec.schema_version
            )));
        }
        if rec.segments.len() != rec.hidden_labels.len() {
            return Err(CoreError::Format(format!(
                "line {}: segments and hidden_labels differ in length",
                n + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> CorpusRecord {
        CorpusRecord::new(
            Query {
                id: 4,
                start_value: 2,
                modulus: 7,
                horizon: 1,
            },
            &[Segment::terminated(vec![3, 4], Some(1))],
            vec![1],
            Answer { value: 4 },
        )
    }

    #[test]
    fn round_trip() {
        let mut buf = Vec::new();
        write_corpus(&mut buf, &[record(), record()]).unwrap();
        let back = read_corpus(&buf[..]).unwrap();
        assert_eq!(back, vec![record(), record()]);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().all(|l| l.contains("\"schema_version\":1")));
    }

    #[test]
    fn rejects_unknown_version_and_fields() {
        let mut r = record();
        r.schema_version = 9;
        let line = serde_json::to_string(&r).unwrap();
        assert!(read_corpus(line.as_bytes()).is_err());
        let extra = serde_json::to_string(&record())
            .unwrap()
            .replace("{\"schema_version\"", "{\"bogus\":1,\"schema_version\"");
        assert!(read_corpus(extra.as_bytes()).is_err());
    }
}
