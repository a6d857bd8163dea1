use super::fasta::FastaRecord;
use super::vocab::{tokenize, Origin, TokenSequence, Vocabulary, PAD};
use crate::error::{Error, Result};

/// `B` equal-length sequences with per-position loss inclusion flags.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub sequences: Vec<TokenSequence>,
    pub include: Vec<Vec<bool>>,
}

impl SequenceBatch {
    /// Builds a batch; inclusion is `false` exactly where the id is `PAD`.
    pub fn new(sequences: Vec<TokenSequence>) -> Result<Self> {
        let len = sequences.first().map_or(0, TokenSequence::len);
        if sequences.is_empty() || len == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        for s in &sequences {
            if s.len() != len {
                return Err(Error::Shape(format!("batch mixes lengths {len} and {}", s.len())));
            }
            s.validate()?;
        }
        let include = sequences.iter().map(|s| s.ids.iter().map(|&id| id != PAD).collect()).collect();
        Ok(Self { sequences, include })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences[0].len()
    }
}

/// Fixed-length windows cut from records, plus warnings for skipped records.
#[derive(Clone, Debug, Default)]
pub struct Chunked {
    pub windows: Vec<TokenSequence>,
    pub warnings: Vec<String>,
}

/// Slides a `len`-wide window over each record at `stride`. Windows never
/// cross records; the last window of a record is padded with `PAD` when
/// short. Records shorter than 2 bases are skipped with a warning.
pub fn chunk_records(records: &[FastaRecord], len: usize, stride: usize) -> Result<Chunked> {
    if len < 2 {
        return Err(Error::Invalid(format!("window length {len} must be at least 2")));
    }
    if stride < 1 {
        return Err(Error::Invalid("stride must be at least 1".into()));
    }
    let vocab = Vocabulary::canonical();
    let mut out = Chunked::default();
    for r in records {
        if r.seq.len() < 2 {
            let msg = format!("record {:?} has length {} < 2; skipped", r.id, r.seq.len());
            log::warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        let ids = tokenize(&r.seq, &vocab)?.ids;
        let mut offset = 0;
        loop {
            let end = (offset + len).min(ids.len());
            let mut w = ids[offset..end].to_vec();
            w.resize(len, PAD);
            out.windows.push(TokenSequence {
                ids: w,
                origin: Origin { record: r.id.clone(), offset },
                ..TokenSequence::default()
            });
            if offset + len >= ids.len() {
                break;
            }
            offset += stride;
        }
    }
    Ok(out)
}

/// Splits windows into consecutive batches of at most `batch_size`.
pub fn batches(windows: &[TokenSequence], batch_size: usize) -> impl Iterator<Item = Result<SequenceBatch>> + '_ {
    windows.chunks(batch_size.max(1)).map(|c| SequenceBatch::new(c.to_vec()))
}
