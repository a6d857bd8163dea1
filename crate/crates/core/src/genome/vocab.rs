use std::fmt;

use crate::error::{Error, Result};

pub const A: u8 = 0;
pub const C: u8 = 1;
pub const G: u8 = 2;
pub const T: u8 = 3;
pub const N: u8 = 4;
pub const PAD: u8 = 5;
pub const MASK: u8 = 6;
/// Unknown bases share the `N` id.
pub const UNK: u8 = N;

/// Number of ids in the canonical table.
pub const VOCAB_SIZE: usize = 7;

const SYMBOLS: [&str; VOCAB_SIZE] = ["A", "C", "G", "T", "N", "<pad>", "<mask>"];

/// Single-nucleotide token table: `A C G T N` followed by `PAD` and `MASK`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::canonical()
    }
}

impl Vocabulary {
    pub fn canonical() -> Self {
        Self { symbols: SYMBOLS.iter().map(|s| s.to_string()).collect() }
    }

    /// Rebuilds a table from its symbol list, accepting only the canonical one.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let v = Self { symbols };
        if v != Self::canonical() {
            return Err(Error::Invalid(format!("unsupported vocabulary {:?}", v.symbols)));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: u8) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    /// Id of a base letter after case folding; any other letter is `N`.
    pub fn id_of(&self, c: char) -> Option<u8> {
        match fold_base(c as u32)? {
            b'A' => Some(A),
            b'C' => Some(C),
            b'G' => Some(G),
            b'T' => Some(T),
            _ => Some(N),
        }
    }

    pub fn is_special(id: u8) -> bool {
        id == PAD || id == MASK
    }
}

/// Uppercases an ASCII letter and folds everything outside `ACGT` to `N`.
/// Non-letters have no base.
pub(crate) fn fold_base(c: u32) -> Option<u8> {
    let b = u8::try_from(c).ok()?;
    if !b.is_ascii_alphabetic() {
        return None;
    }
    Some(match b.to_ascii_uppercase() {
        x @ (b'A' | b'C' | b'G' | b'T') => x,
        _ => b'N',
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Strand {
    #[default]
    Forward,
    ReverseComplement,
}

impl Strand {
    pub fn flipped(self) -> Self {
        match self {
            Strand::Forward => Strand::ReverseComplement,
            Strand::ReverseComplement => Strand::Forward,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Origin {
    pub record: String,
    pub offset: usize,
}

/// Integer-encoded nucleotide sequence.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u8>,
    pub origin: Origin,
    pub strand: Strand,
}

impl TokenSequence {
    pub fn new(ids: Vec<u8>) -> Self {
        Self { ids, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids as `usize`, the form the model consumes.
    pub fn indices(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }

    /// Checks `id < VOCAB_SIZE` and that padding only forms a trailing run.
    pub fn validate(&self) -> Result<()> {
        let mut seen_pad = false;
        for (i, &id) in self.ids.iter().enumerate() {
            if id as usize >= VOCAB_SIZE {
                return Err(Error::Invalid(format!("token id {id} at {i} out of range")));
            }
            if id == PAD {
                seen_pad = true;
            } else if seen_pad {
                return Err(Error::Invalid(format!("non-pad token after padding at {i}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&detokenize(self))
    }
}

/// One token per character, with case and IUPAC folding applied.
pub fn tokenize(s: &str, v: &Vocabulary) -> Result<TokenSequence> {
    if s.is_empty() {
        return Err(Error::Invalid("cannot tokenize an empty sequence".into()));
    }
    let ids = s
        .chars()
        .enumerate()
        .map(|(position, symbol)| v.id_of(symbol).ok_or(Error::InvalidSymbol { symbol, position }))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenSequence::new(ids))
}

pub fn detokenize(t: &TokenSequence) -> String {
    let v = Vocabulary::canonical();
    t.ids.iter().map(|&id| v.symbol(id).unwrap_or("?")).collect()
}

fn complement(id: u8) -> Result<u8> {
    match id {
        A => Ok(T),
        T => Ok(A),
        C => Ok(G),
        G => Ok(C),
        N => Ok(N),
        _ => Err(Error::SpecialToken { id }),
    }
}

/// Reverses the order and swaps `A<->T`, `C<->G`; `N` is its own complement.
pub fn reverse_complement(t: &TokenSequence) -> Result<TokenSequence> {
    let ids = t.ids.iter().rev().map(|&id| complement(id)).collect::<Result<Vec<_>>>()?;
    Ok(TokenSequence { ids, origin: t.origin.clone(), strand: t.strand.flipped() })
}
