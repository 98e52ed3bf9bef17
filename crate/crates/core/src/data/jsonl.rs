//! Line-delimited JSON with a small versioned envelope.
//!
//! Every line is `{"version": 1, "kind": "<kind>", "data": {...}}`. Blank
//! lines are skipped, so an empty file reads back as an empty collection.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    version: u32,
    kind: &'a str,
    data: &'a T,
}

#[derive(Deserialize)]
struct Envelope<T> {
    version: u32,
    kind: String,
    data: T,
}

pub fn write_lines<T: Serialize, W: Write>(mut out: W, kind: &str, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, &EnvelopeRef { version: FORMAT_VERSION, kind, data: item })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_lines<T: DeserializeOwned, R: Read>(input: R, kind: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let env: Envelope<T> =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        if env.version != FORMAT_VERSION {
            return Err(Error::Parse { line: lineno, message: format!("unsupported version {}", env.version) });
        }
        if env.kind != kind {
            return Err(Error::Parse { line: lineno, message: format!("expected kind '{kind}', found '{}'", env.kind) });
        }
        out.push(env.data);
    }
    Ok(out)
}

pub fn write_file<T: Serialize>(path: impl AsRef<Path>, kind: &str, items: &[T]) -> Result<()> {
    let file = File::create(path)?;
    write_lines(BufWriter::new(file), kind, items)
}

pub fn read_file<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<Vec<T>> {
    read_lines(File::open(path)?, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PatientRecord, Visit};

    fn sample() -> Vec<PatientRecord> {
        vec![
            PatientRecord {
                visits: vec![Visit { codes: vec![1, 2], labs: vec![0.1, 140.25], delta_t: 0.0 }],
                label: 1,
                ground_truth_mask: vec![true, false, false, true],
            },
            PatientRecord { visits: vec![], label: 0, ground_truth_mask: vec![] },
        ]
    }

    #[test]
    fn round_trip() {
        let mut buf = Vec::new();
        write_lines(&mut buf, "record", &sample()).unwrap();
        let back: Vec<PatientRecord> = read_lines(buf.as_slice(), "record").unwrap();
        assert_eq!(back, sample());
    }

    #[test]
    fn empty_input_is_empty() {
        let back: Vec<PatientRecord> = read_lines(&b""[..], "record").unwrap();
        assert!(back.is_empty());
        let back: Vec<PatientRecord> = read_lines(&b"\n\n"[..], "record").unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn truncated_line_reports_its_number() {
        let mut buf = Vec::new();
        write_lines(&mut buf, "record", &sample()).unwrap();
        buf.truncate(buf.len() - 10);
        match read_lines::<PatientRecord, _>(buf.as_slice(), "record") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let mut buf = Vec::new();
        write_lines(&mut buf, "record", &sample()).unwrap();
        assert!(read_lines::<PatientRecord, _>(buf.as_slice(), "attribution").is_err());
    }
}
