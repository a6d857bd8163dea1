use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::kernels::{argmax, softmax_in_place};
use crate::numerics::{AttentionSpec, Real, Tape, ValueGrid, Var};

use super::params::{ParamId, ParamKind, ParamStore};

fn var(p: &[Var], id: ParamId) -> Var {
    p[id.0]
}

/// Input-gated diagonal linear recurrence over `2 * d` channels.
#[derive(Clone, Debug)]
pub struct RecurrenceBlock {
    pub norm: ParamId,
    pub w_in: ParamId,
    pub w_gate: ParamId,
    pub w_alpha: ParamId,
    pub b_alpha: ParamId,
    pub w_out: ParamId,
}

impl RecurrenceBlock {
    pub fn register<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> Self {
        let e = 2 * d;
        let mut add = |name: &str, kind, shape: &[usize]| store.add(rng, format!("{prefix}.{name}"), kind, shape);
        Self {
            norm: add("norm", ParamKind::Gain, &[d]),
            w_in: add("w_in", ParamKind::Weight, &[d, e]),
            w_gate: add("w_gate", ParamKind::Weight, &[d, e]),
            w_alpha: add("w_alpha", ParamKind::Weight, &[d, e]),
            b_alpha: add("b_alpha", ParamKind::Bias, &[e]),
            w_out: add("w_out", ParamKind::Weight, &[e, d]),
        }
    }

    /// `u` holds `blocks * seq_len` rows; the state restarts every block.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], u: Var, seq_len: usize) -> Var {
        let n = tape.rms_norm(u, var(p, self.norm));
        let x = tape.matmul(n, var(p, self.w_in));
        let z = tape.matmul(n, var(p, self.w_gate));
        let a = tape.matmul(n, var(p, self.w_alpha));
        let a = tape.add_row(a, var(p, self.b_alpha));
        let alpha = tape.sigmoid(a);
        let s = tape.linear_scan(alpha, x, seq_len);
        let gate = tape.silu(z);
        let g = tape.mul(s, gate);
        let y = tape.matmul(g, var(p, self.w_out));
        tape.add(u, y)
    }
}

#[derive(Clone, Debug)]
pub struct FfnWeights {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl FfnWeights {
    fn register<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        Self {
            w1: store.add(rng, format!("{prefix}.w1"), ParamKind::Weight, &[d, hidden]),
            w2: store.add(rng, format!("{prefix}.w2"), ParamKind::Weight, &[hidden, d]),
        }
    }

    fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], n: Var) -> Var {
        let h = tape.matmul(n, var(p, self.w1));
        let h = tape.silu(h);
        tape.matmul(h, var(p, self.w2))
    }

    pub fn size(&self, d: usize, hidden: usize) -> usize {
        2 * d * hidden
    }
}

/// Position-wise `u + W2 SiLU(W1 RMSNorm(u))`.
#[derive(Clone, Debug)]
pub struct FfnBlock {
    pub norm: ParamId,
    pub weights: FfnWeights,
}

impl FfnBlock {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        Self {
            norm: store.add(rng, format!("{prefix}.norm"), ParamKind::Gain, &[d]),
            weights: FfnWeights::register(store, rng, prefix, d, hidden),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], u: Var) -> Var {
        let n = tape.rms_norm(u, var(p, self.norm));
        let y = self.weights.apply(tape, p, n);
        tape.add(u, y)
    }
}

/// Dispatch statistics of one MoE layer over the tokens it saw.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterStats {
    /// Fraction of tokens whose top-1 expert is `i`.
    pub f: Vec<f64>,
    /// Mean router probability of expert `i`.
    pub p: Vec<f64>,
    pub tokens: usize,
}

impl RouterStats {
    /// `N * sum_i f_i P_i`; 1 under perfect balance.
    pub fn balance(&self) -> f64 {
        self.f.len() as f64 * self.f.iter().zip(&self.p).map(|(f, p)| f * p).sum::<f64>()
    }
}

#[derive(Clone, Debug)]
pub struct Routing {
    pub chosen: Vec<usize>,
    pub chosen_prob: Vec<f64>,
    /// Row-major `tokens x n_experts` probabilities.
    pub probs: Vec<f64>,
    pub stats: RouterStats,
}

/// Top-1 routing from router logits `[tokens, n_experts]`; ties go to the
/// lowest expert index.
pub fn route_top1<F: Real>(logits: &ValueGrid<F>) -> Routing {
    let (rows, n) = logits.dims2();
    let mut probs = Vec::with_capacity(rows * n);
    let mut chosen = Vec::with_capacity(rows);
    let mut chosen_prob = Vec::with_capacity(rows);
    let mut f = vec![0.0; n];
    let mut p = vec![0.0; n];
    for r in 0..rows {
        let row = logits.row(r);
        let mut pr: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
        softmax_in_place(&mut pr, None);
        let c = argmax(row);
        chosen.push(c);
        chosen_prob.push(pr[c]);
        f[c] += 1.0;
        for (acc, v) in p.iter_mut().zip(&pr) {
            *acc += v;
        }
        probs.extend(pr);
    }
    let denom = rows.max(1) as f64;
    f.iter_mut().for_each(|x| *x /= denom);
    p.iter_mut().for_each(|x| *x /= denom);
    Routing { chosen, chosen_prob, probs, stats: RouterStats { f, p, tokens: rows } }
}

/// Router statistics plus the taped mean-probability row `[1, N]` through
/// which the auxiliary loss reaches the router.
#[derive(Clone, Debug)]
pub struct MoeRecord {
    pub stats: RouterStats,
    pub mean_prob: Var,
}

/// Top-1 mixture of FFN experts with probability-scaled output.
#[derive(Clone, Debug)]
pub struct MoeBlock {
    pub norm: ParamId,
    pub router: ParamId,
    pub experts: Vec<FfnWeights>,
}

impl MoeBlock {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        hidden: usize,
        n_experts: usize,
    ) -> Self {
        let norm = store.add(rng, format!("{prefix}.norm"), ParamKind::Gain, &[d]);
        let router = store.add(rng, format!("{prefix}.router"), ParamKind::Weight, &[d, n_experts]);
        let experts = (0..n_experts)
            .map(|e| FfnWeights::register(store, rng, &format!("{prefix}.expert{e}"), d, hidden))
            .collect();
        Self { norm, router, experts }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], u: Var) -> Result<(Var, MoeRecord)> {
        let n = tape.rms_norm(u, var(p, self.norm));
        let logits = tape.matmul(n, var(p, self.router));
        let routing = route_top1(tape.value(logits));
        let probs = tape.softmax_rows(logits, None)?;
        let rows = routing.chosen.len();

        let mut parts = Vec::new();
        let mut position = vec![0usize; rows];
        let mut offset = 0;
        for (e, expert) in self.experts.iter().enumerate() {
            let idx: Vec<usize> = (0..rows).filter(|&r| routing.chosen[r] == e).collect();
            if idx.is_empty() {
                continue;
            }
            for (k, &r) in idx.iter().enumerate() {
                position[r] = offset + k;
            }
            offset += idx.len();
            let sub = if idx.len() == rows && e == 0 { n } else { tape.select_rows(n, &idx) };
            parts.push(expert.apply(tape, p, sub));
        }
        let stacked = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
        let ordered = if position.iter().enumerate().all(|(i, &j)| i == j) {
            stacked
        } else {
            tape.select_rows(stacked, &position)
        };
        let gate = tape.pick(probs, &routing.chosen);
        let y = tape.mul_rows(ordered, gate);
        let mean_prob = tape.mean_axis(probs, 0);
        Ok((tape.add(u, y), MoeRecord { stats: routing.stats, mean_prob }))
    }
}

/// Mean over layers of `alpha * N * sum_i f_i P_i`; zero without MoE layers.
pub fn aux_loss(stats: &[RouterStats], alpha: f64) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    stats.iter().map(|s| alpha * s.balance()).sum::<f64>() / stats.len() as f64
}

/// Taped form of [`aux_loss`], differentiable through `P`.
pub fn aux_loss_tape<F: Real>(tape: &mut Tape<F>, records: &[MoeRecord], alpha: f64) -> Option<Var> {
    if records.is_empty() {
        return None;
    }
    let mut terms = Vec::with_capacity(records.len());
    for r in records {
        let n = r.stats.f.len();
        let f: Vec<F> = r.stats.f.iter().map(|&x| F::lit(x)).collect();
        let f = tape.constant(ValueGrid::new(vec![1, n], f).expect("router fractions shape"));
        let fp = tape.mul(f, r.mean_prob);
        let s = tape.sum(fp);
        terms.push(tape.scale(s, F::lit(alpha * n as f64 / records.len() as f64)));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    Some(total)
}

/// Lower-triangular admissibility for `seq_len` positions.
pub fn causal_mask(seq_len: usize) -> Rc<[bool]> {
    let mut m = vec![false; seq_len * seq_len];
    for q in 0..seq_len {
        for kv in 0..=q {
            m[q * seq_len + kv] = true;
        }
    }
    m.into()
}

/// Causal multi-head self-attention with residual.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        let mut add = |name: &str, kind, shape: &[usize]| store.add(rng, format!("{prefix}.{name}"), kind, shape);
        Self {
            norm: add("norm", ParamKind::Gain, &[d]),
            wq: add("wq", ParamKind::Weight, &[d, d]),
            wk: add("wk", ParamKind::Weight, &[d, d]),
            wv: add("wv", ParamKind::Weight, &[d, d]),
            wo: add("wo", ParamKind::Weight, &[d, d]),
            heads,
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], u: Var, seq_len: usize) -> Result<Var> {
        let n = tape.rms_norm(u, var(p, self.norm));
        let q = tape.matmul(n, var(p, self.wq));
        let k = tape.matmul(n, var(p, self.wk));
        let v = tape.matmul(n, var(p, self.wv));
        let spec =
            AttentionSpec { heads: self.heads, seq_len, mask: Some(causal_mask(seq_len)), bias: None, relative: None };
        let a = tape.attention(q, k, v, spec)?;
        let y = tape.matmul(a, var(p, self.wo));
        Ok(tape.add(u, y))
    }
}
