//! Sequence ingestion: FASTA, single-nucleotide tokens, reverse complement,
//! windowing and synthetic corpora.

mod chunk;
mod fasta;
mod synth;
mod vocab;

pub use chunk::{batches, chunk_records, Chunked, SequenceBatch};
pub use fasta::{parse_fasta, write_fasta, FastaRecord};
pub use synth::{bidir_determined, synth_corpus, CorpusKind, Markov3, BIDIR_LOOKUP, MOTIF, MOTIF_DENSITY};
pub use vocab::{
    detokenize, reverse_complement, tokenize, Origin, Strand, TokenSequence, Vocabulary, A, C, G, MASK, N, PAD, T, UNK,
    VOCAB_SIZE,
};
