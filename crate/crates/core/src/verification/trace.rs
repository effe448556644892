//! Trace files: one operation per line, tab-separated
//! `thread kind e1 e2 invoke response result`.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use super::history::{History, OpRecord};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

pub fn write_trace<W: Write>(mut out: W, history: &History) -> io::Result<()> {
    for r in &history.records {
        writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}\t{}", r.thread, r.kind, r.e1, r.e2, r.invoke, r.response, r.result)?;
    }
    out.flush()
}

/// Parses a trace. Records keep their file order.
pub fn read_trace<R: BufRead>(input: R) -> Result<History, TraceError> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let bad = |message: String| TraceError::Malformed { line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(bad(format!("expected 7 tab-separated fields, found {}", fields.len())));
        }
        let num = |j: usize, name: &str| {
            fields[j].parse::<u64>().map_err(|_| bad(format!("field {name}: not an unsigned integer: {:?}", fields[j])))
        };
        records.push(OpRecord {
            thread: fields[0].parse().map_err(|_| bad(format!("field thread: not an integer: {:?}", fields[0])))?,
            kind: fields[1].parse().map_err(bad)?,
            e1: num(2, "e1")?,
            e2: num(3, "e2")?,
            invoke: num(4, "invoke")?,
            response: num(5, "response")?,
            result: num(6, "result")?,
        });
    }
    Ok(History { records })
}
