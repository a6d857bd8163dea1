//! Seeded synthetic corpora standing in for a reference genome.
//!
//! * `markov3`: an order-3 Markov chain over `ACGT` with a fixed table.
//! * `planted_motif`: uniform background with `GATA` planted at a fixed density.
//! * `bidir_motif`: uniform free bases; every position `t` with `t % 4 == 1`,
//!   `t >= 2` and `t + 2 < len` holds `BIDIR_LOOKUP[x[t-2]][x[t+2]]`.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fasta::FastaRecord;
use crate::error::{Error, Result};

const BASES: [u8; 4] = *b"ACGT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Markov3,
    PlantedMotif,
    BidirMotif,
}

impl CorpusKind {
    pub fn name(self) -> &'static str {
        match self {
            CorpusKind::Markov3 => "markov3",
            CorpusKind::PlantedMotif => "planted_motif",
            CorpusKind::BidirMotif => "bidir_motif",
        }
    }
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov3" => Ok(CorpusKind::Markov3),
            "planted_motif" => Ok(CorpusKind::PlantedMotif),
            "bidir_motif" => Ok(CorpusKind::BidirMotif),
            other => Err(Error::UnknownCorpus(other.to_string())),
        }
    }
}

/// `size` records of `length` bases each, reproducible from `seed`.
pub fn synth_corpus(kind: CorpusKind, seed: u64, size: usize, length: usize) -> Vec<FastaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|i| {
            let ids = match kind {
                CorpusKind::Markov3 => Markov3::fixed().sample(&mut rng, length),
                CorpusKind::PlantedMotif => planted_motif(&mut rng, length),
                CorpusKind::BidirMotif => bidir_motif(&mut rng, length),
            };
            let seq: String = ids.iter().map(|&b| BASES[b as usize] as char).collect();
            FastaRecord::new(format!("{kind}_{seed}_{i}"), seq)
        })
        .collect()
}

/// Probability that a background position starts a planted `GATA`.
pub const MOTIF_DENSITY: f64 = 1.0 / 64.0;
pub const MOTIF: [u8; 4] = [2, 0, 3, 0];

fn planted_motif(rng: &mut ChaCha8Rng, length: usize) -> Vec<u8> {
    let mut ids = Vec::with_capacity(length);
    while ids.len() < length {
        if ids.len() + MOTIF.len() <= length && rng.gen_bool(MOTIF_DENSITY) {
            ids.extend_from_slice(&MOTIF);
        } else {
            ids.push(rng.gen_range(0..4));
        }
    }
    ids
}

/// Latin square combining the bases two positions to the left and right.
/// For a fixed left base every right base gives a different result, so the
/// left side alone carries no information about the determined base.
pub const BIDIR_LOOKUP: [[u8; 4]; 4] = [[0, 1, 2, 3], [1, 2, 3, 0], [2, 3, 0, 1], [3, 0, 1, 2]];

/// Whether position `t` of a `bidir_motif` record of `len` bases is
/// determined by its neighbors at `t - 2` and `t + 2`.
pub fn bidir_determined(t: usize, len: usize) -> bool {
    t % 4 == 1 && t >= 2 && t + 2 < len
}

fn bidir_motif(rng: &mut ChaCha8Rng, length: usize) -> Vec<u8> {
    let mut ids: Vec<u8> = (0..length).map(|_| rng.gen_range(0..4)).collect();
    // Determined positions only read free ones (t +- 2 is 3 mod 4).
    for t in 0..length {
        if bidir_determined(t, length) {
            ids[t] = BIDIR_LOOKUP[ids[t - 2] as usize][ids[t + 2] as usize];
        }
    }
    ids
}

/// Fixed order-3 transition table over `ACGT`.
#[derive(Clone, Debug)]
pub struct Markov3 {
    probs: Vec<[f64; 4]>,
}

/// Seed of the table itself, independent of any corpus seed.
const MARKOV_TABLE_SEED: u64 = 0x4a41_4e55_53;
const MARKOV_SHARPNESS: f64 = 2.5;
const MARKOV_BURN_IN: usize = 64;

impl Markov3 {
    pub fn fixed() -> &'static Markov3 {
        static TABLE: OnceLock<Markov3> = OnceLock::new();
        TABLE.get_or_init(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(MARKOV_TABLE_SEED);
            let probs = (0..64)
                .map(|_| {
                    let logits: [f64; 4] = std::array::from_fn(|_| MARKOV_SHARPNESS * rng.gen_range(-1.0..1.0));
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e = logits.map(|l| (l - max).exp());
                    let z: f64 = e.iter().sum();
                    e.map(|x| x / z)
                })
                .collect();
            Markov3 { probs }
        })
    }

    pub fn context_index(a: u8, b: u8, c: u8) -> usize {
        (a as usize) * 16 + (b as usize) * 4 + c as usize
    }

    /// `P(next | previous three)`.
    pub fn transition(&self, ctx: usize) -> &[f64; 4] {
        &self.probs[ctx]
    }

    fn draw(rng: &mut ChaCha8Rng, p: &[f64; 4]) -> u8 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i as u8;
            }
        }
        3
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, length: usize) -> Vec<u8> {
        let mut hist: Vec<u8> = (0..3).map(|_| rng.gen_range(0..4)).collect();
        let mut out = Vec::with_capacity(length);
        for i in 0..MARKOV_BURN_IN + length {
            let n = hist.len();
            let ctx = Self::context_index(hist[n - 3], hist[n - 2], hist[n - 1]);
            let x = Self::draw(rng, &self.probs[ctx]);
            hist.push(x);
            if i >= MARKOV_BURN_IN {
                out.push(x);
            }
        }
        out
    }

    /// Stationary distribution over 3-base contexts, by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let mut pi = vec![1.0 / 64.0; 64];
        for _ in 0..10_000 {
            let mut next = vec![0.0; 64];
            for (ctx, &w) in pi.iter().enumerate() {
                for x in 0..4 {
                    next[(ctx % 16) * 4 + x] += w * self.probs[ctx][x];
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// `H(x_t | x_{t-3..t-1})` in nats under the stationary chain.
    pub fn entropy_rate(&self) -> f64 {
        self.stationary()
            .iter()
            .zip(&self.probs)
            .map(|(w, p)| -w * p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>())
            .sum()
    }

    /// Expected accuracy of the best left-context predictor.
    pub fn bayes_accuracy(&self) -> f64 {
        self.stationary().iter().zip(&self.probs).map(|(w, p)| w * p.iter().copied().fold(0.0, f64::max)).sum()
    }

    /// `H(x_t | three bases on each side)`: the floor for predicting a base
    /// from its full two-sided context, since those six bases form its
    /// Markov blanket.
    pub fn blanket_entropy(&self) -> f64 {
        let pi = self.stationary();
        let mut h = 0.0;
        // Enumerate x_{t-3..t+3}; the weight of x_t = c is
        // pi(left) * P(c | left) * prod_k P(x_{t+k} | window).
        for left in 0..64usize {
            for right in 0..64usize {
                let seq = |c: usize| -> [usize; 7] {
                    [left / 16, (left / 4) % 4, left % 4, c, right / 16, (right / 4) % 4, right % 4]
                };
                let joint: [f64; 4] = std::array::from_fn(|c| {
                    let s = seq(c);
                    let mut p = pi[left];
                    for k in 3..7 {
                        let ctx = s[k - 3] * 16 + s[k - 2] * 4 + s[k - 1];
                        p *= self.probs[ctx][s[k]];
                    }
                    p
                });
                let z: f64 = joint.iter().sum();
                for &j in &joint {
                    if j > 0.0 {
                        h -= j * (j / z).ln();
                    }
                }
            }
        }
        h
    }
}
