use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genome::{chunk_records, parse_fasta, synth_corpus, CorpusKind, FastaRecord, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `markov3`, `planted_motif`, `bidir_motif` or `fasta`.
    pub corpus: String,
    /// FASTA input when `corpus = "fasta"`.
    pub path: Option<PathBuf>,
    /// Synthetic training records.
    pub records: usize,
    /// Synthetic held-out records, generated from a separate seed.
    pub test_records: usize,
    pub record_len: usize,
    /// Window stride; 0 means the window length.
    pub stride: usize,
    /// Trailing FASTA records held out for evaluation.
    pub fasta_test_records: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: "markov3".into(),
            path: None,
            records: 64,
            test_records: 16,
            record_len: 1024,
            stride: 0,
            fasta_test_records: 1,
            seed: 0,
        }
    }
}

/// Windows for training and evaluation, cut from disjoint records.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
    pub warnings: Vec<String>,
}

/// Held-out records come from a seed no training corpus of nearby seeds uses.
pub fn test_seed(seed: u64) -> u64 {
    seed ^ 0x7e57_0000_0000_0000
}

impl DataConfig {
    pub fn records(&self) -> Result<(Vec<FastaRecord>, Vec<FastaRecord>)> {
        if self.corpus == "fasta" {
            let path = self
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("data.path is required when data.corpus = \"fasta\"".into()))?;
            let file = File::open(path).map_err(|source| Error::File { path: path.clone(), source })?;
            let mut all = parse_fasta(BufReader::new(file))?;
            if self.fasta_test_records >= all.len() {
                return Err(Error::Config(format!(
                    "data.fasta_test_records ({}) leaves no training records out of {}",
                    self.fasta_test_records,
                    all.len()
                )));
            }
            let test = all.split_off(all.len() - self.fasta_test_records);
            return Ok((all, test));
        }
        let kind: CorpusKind = self.corpus.parse()?;
        Ok((
            synth_corpus(kind, self.seed, self.records, self.record_len),
            synth_corpus(kind, test_seed(self.seed), self.test_records, self.record_len),
        ))
    }

    pub fn load(&self, seq_len: usize) -> Result<Corpus> {
        let (train, test) = self.records()?;
        let stride = if self.stride == 0 { seq_len } else { self.stride };
        let a = chunk_records(&train, seq_len, stride)?;
        let b = chunk_records(&test, seq_len, seq_len)?;
        if a.windows.is_empty() {
            return Err(Error::Config("data yields no training windows".into()));
        }
        let mut warnings = a.warnings;
        warnings.extend(b.warnings);
        Ok(Corpus { train: a.windows, test: b.windows, warnings })
    }
}
