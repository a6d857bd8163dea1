//! Minimal FASTA reader/writer. Sequence letters are case-folded and any
//! base outside `ACGT` becomes `N`.

use std::io::{BufRead, Write};

use super::vocab::fold_base;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FastaRecord {
    pub id: String,
    pub seq: String,
}

impl FastaRecord {
    pub fn new(id: impl Into<String>, seq: impl Into<String>) -> Self {
        Self { id: id.into(), seq: seq.into() }
    }
}

/// Parses every record from `reader`. Errors carry 1-based line numbers.
pub fn parse_fasta<R: BufRead>(mut reader: R) -> Result<Vec<FastaRecord>> {
    let mut records: Vec<FastaRecord> = Vec::new();
    // Line of the header that opened the current record.
    let mut header_line = 0;
    let mut line = Vec::new();
    let mut lineno = 0;
    loop {
        line.clear();
        if reader.read_until(b'\n', &mut line)? == 0 {
            break;
        }
        lineno += 1;
        let text = line.trim_ascii();
        if text.is_empty() || text[0] == b';' {
            continue;
        }
        if text[0] == b'>' {
            close_record(&records, header_line)?;
            let header = String::from_utf8_lossy(&text[1..]);
            let id = header.split_whitespace().next().unwrap_or("").to_string();
            records.push(FastaRecord::new(id, String::new()));
            header_line = lineno;
            continue;
        }
        let Some(current) = records.last_mut() else {
            return Err(Error::Fasta { line: lineno, msg: "sequence data before any '>' header".into() });
        };
        for &b in text {
            if b.is_ascii_whitespace() {
                continue;
            }
            match fold_base(b as u32) {
                Some(base) => current.seq.push(base as char),
                None => return Err(Error::Fasta { line: lineno, msg: format!("invalid sequence byte 0x{b:02x}") }),
            }
        }
    }
    close_record(&records, header_line)?;
    Ok(records)
}

fn close_record(records: &[FastaRecord], header_line: usize) -> Result<()> {
    match records.last() {
        Some(r) if r.seq.is_empty() => {
            Err(Error::Fasta { line: header_line, msg: format!("record {:?} has no sequence", r.id) })
        }
        _ => Ok(()),
    }
}

pub fn write_fasta<W: Write>(mut w: W, records: &[FastaRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, ">{}", r.id)?;
        for chunk in r.seq.as_bytes().chunks(60) {
            w.write_all(chunk)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}
