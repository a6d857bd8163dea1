use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::FusionMask;
use crate::numerics::{AttentionSpec, Real, RelativeBias, Tape, ValueGrid, Var};

use super::blocks::{AttentionBlock, FfnBlock, MoeBlock, MoeRecord, RecurrenceBlock};
use super::config::{FusionBias, ModelConfig, MAX_RELATIVE_DISTANCE};
use super::params::{ParamId, ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Recurrence(RecurrenceBlock),
    Attention(AttentionBlock),
}

#[derive(Clone, Debug)]
pub enum Channel {
    Ffn(FfnBlock),
    Moe(MoeBlock),
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub mixer: Mixer,
    pub channel: Channel,
}

/// One causal encoder: embedding, `n_layers` of mixer + channel block, final norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub embed: ParamId,
    pub layers: Vec<Layer>,
    pub final_norm: ParamId,
}

impl EncoderStack {
    fn register<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, prefix: &str, c: &ModelConfig) -> Self {
        let d = c.d_model;
        let embed = store.add(rng, format!("{prefix}.embed"), ParamKind::Embedding, &[c.vocab_size, d]);
        let layers = (0..c.n_layers)
            .map(|i| {
                let lp = format!("{prefix}.layer{i}");
                let mixer = if c.mid_attention.layer() == Some(i) {
                    Mixer::Attention(AttentionBlock::register(store, rng, &format!("{lp}.attn"), d, c.n_heads))
                } else {
                    Mixer::Recurrence(RecurrenceBlock::register(store, rng, &format!("{lp}.rec"), d))
                };
                let channel = if c.is_moe_layer(i) {
                    Channel::Moe(MoeBlock::register(store, rng, &format!("{lp}.moe"), d, c.ffn_hidden(), c.n_experts))
                } else {
                    Channel::Ffn(FfnBlock::register(store, rng, &format!("{lp}.ffn"), d, c.ffn_hidden()))
                };
                Layer { mixer, channel }
            })
            .collect();
        let final_norm = store.add(rng, format!("{prefix}.final_norm"), ParamKind::Gain, &[d]);
        Self { embed, layers, final_norm }
    }

    /// Runs the stack left to right over `ids` laid out as consecutive
    /// `seq_len`-token sequences.
    pub fn run<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        ids: &[usize],
        seq_len: usize,
        moe: &mut Vec<MoeRecord>,
    ) -> Result<Var> {
        let mut h = tape.gather(p[self.embed.0], ids);
        for layer in &self.layers {
            h = match &layer.mixer {
                Mixer::Recurrence(b) => b.forward(tape, p, h, seq_len),
                Mixer::Attention(b) => b.forward(tape, p, h, seq_len)?,
            };
            h = match &layer.channel {
                Channel::Ffn(b) => b.forward(tape, p, h),
                Channel::Moe(b) => {
                    let (out, rec) = b.forward(tape, p, h)?;
                    moe.push(rec);
                    out
                }
            };
        }
        Ok(tape.rms_norm(h, p[self.final_norm.0]))
    }
}

/// Masked multi-head attention over `[H^F; H^B]` with residual and norm.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm: ParamId,
    pub heads: usize,
    pub bias: FusionBias,
    /// `heads x (MAX_RELATIVE_DISTANCE + 1)` table for [`FusionBias::Relative`].
    pub relative: Option<ParamId>,
}

/// Sequence position that fused row `q` predicts: forward row `i` targets
/// `i + 1`, backward row `T + i` targets `i - 1`.
fn target_position(q: usize, seq_len: usize) -> i64 {
    if q < seq_len {
        q as i64 + 1
    } else {
        (q - seq_len) as i64 - 1
    }
}

fn distance_slope(head: usize, heads: usize) -> f64 {
    2f64.powf(2.0 - 8.0 * head as f64 / heads as f64)
}

fn target_distance(q: usize, kv: usize, seq_len: usize) -> usize {
    target_position(q, seq_len).abs_diff((kv % seq_len) as i64) as usize
}

impl FusionBlock {
    fn register<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, c: &ModelConfig) -> Self {
        let d = c.d_model;
        let mut add = |name: &str, kind, shape: &[usize]| store.add(rng, format!("fusion.{name}"), kind, shape);
        let (wq, wk, wv, wo) = (
            add("wq", ParamKind::Weight, &[d, d]),
            add("wk", ParamKind::Weight, &[d, d]),
            add("wv", ParamKind::Weight, &[d, d]),
            add("wo", ParamKind::Weight, &[d, d]),
        );
        let norm = add("norm", ParamKind::Gain, &[d]);
        let relative = (c.fusion_bias == FusionBias::Relative)
            .then(|| add("relative_bias", ParamKind::Bias, &[c.n_heads, MAX_RELATIVE_DISTANCE + 1]));
        if let Some(id) = relative {
            // Starts from the fixed distance penalty.
            for (i, x) in store.get_mut(id).value.data_mut().iter_mut().enumerate() {
                let (h, dist) = (i / (MAX_RELATIVE_DISTANCE + 1), i % (MAX_RELATIVE_DISTANCE + 1));
                *x = F::lit(-distance_slope(h, c.n_heads) * dist as f64);
            }
        }
        Self { wq, wk, wv, wo, norm, heads: c.n_heads, bias: c.fusion_bias, relative }
    }

    /// Bucket of every `(q, kv)` pair of the `2T x 2T` score grid.
    pub fn relative_buckets(seq_len: usize) -> Rc<[usize]> {
        let n = 2 * seq_len;
        (0..n * n).map(|i| target_distance(i / n, i % n, seq_len).min(MAX_RELATIVE_DISTANCE)).collect()
    }

    /// Per-head score offset `-slope_h * |target(q) - pos(kv)|`, where keys
    /// `i` and `T + i` both sit at position `i`. Slopes are `2^(2 - 8h/H)`.
    pub fn distance_bias<F: Real>(&self, seq_len: usize) -> Rc<[F]> {
        let n = 2 * seq_len;
        let mut out = Vec::with_capacity(self.heads * n * n);
        for h in 0..self.heads {
            let slope = distance_slope(h, self.heads);
            for q in 0..n {
                for kv in 0..n {
                    out.push(F::lit(-slope * target_distance(q, kv, seq_len) as f64));
                }
            }
        }
        out.into()
    }

    /// Interleaves per-sequence blocks `[fwd_b; bwd_b]` and attends.
    /// `mask = None` admits every key.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        forward: Var,
        backward: Var,
        seq_len: usize,
        mask: Option<&FusionMask>,
    ) -> Result<Var> {
        let rows = tape.value(forward).dims2().0;
        if rows % seq_len != 0 || tape.value(backward).dims2().0 != rows {
            return Err(Error::Shape(format!("{rows} directional rows for sequence length {seq_len}")));
        }
        if let Some(m) = mask {
            if m.seq_len() != seq_len {
                return Err(Error::Shape(format!("fusion mask for T={} applied to T={seq_len}", m.seq_len())));
            }
        }
        let batch = rows / seq_len;
        let both = tape.concat_rows(&[forward, backward]);
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| {
                (0..seq_len).map(move |i| b * seq_len + i).chain((0..seq_len).map(move |j| rows + b * seq_len + j))
            })
            .collect();
        let x = tape.select_rows(both, &order);
        let q = tape.matmul(x, p[self.wq.0]);
        let k = tape.matmul(x, p[self.wk.0]);
        let v = tape.matmul(x, p[self.wv.0]);
        let bias = match self.bias {
            FusionBias::Distance => Some(self.distance_bias(seq_len)),
            FusionBias::None | FusionBias::Relative => None,
        };
        let relative = self.relative.map(|id| RelativeBias { table: p[id.0], bucket: Self::relative_buckets(seq_len) });
        let spec =
            AttentionSpec { heads: self.heads, seq_len: 2 * seq_len, mask: mask.map(|m| m.shared()), bias, relative };
        let a = tape.attention(q, k, v, spec)?;
        let y = tape.matmul(a, p[self.wo.0]);
        let r = tape.add(x, y);
        Ok(tape.rms_norm(r, p[self.norm.0]))
    }
}

/// Output head shared by both fused halves.
#[derive(Clone, Debug)]
pub struct Head {
    pub hidden: Option<(ParamId, ParamId)>,
    pub w: ParamId,
    pub b: ParamId,
}

impl Head {
    fn register<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, c: &ModelConfig) -> Self {
        let d = c.d_model;
        let (hidden, width) = if c.head_hidden > 0 {
            let w = store.add(rng, "head.hidden.w".into(), ParamKind::Weight, &[d, c.head_hidden]);
            let b = store.add(rng, "head.hidden.b".into(), ParamKind::Bias, &[c.head_hidden]);
            (Some((w, b)), c.head_hidden)
        } else {
            (None, d)
        };
        Self {
            hidden,
            w: store.add(rng, "head.w".into(), ParamKind::Weight, &[width, c.vocab_size]),
            b: store.add(rng, "head.b".into(), ParamKind::Bias, &[c.vocab_size]),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], h: Var) -> Var {
        let h = match self.hidden {
            Some((w, b)) => {
                let z = tape.matmul(h, p[w.0]);
                let z = tape.add_row(z, p[b.0]);
                tape.silu(z)
            }
            None => h,
        };
        let z = tape.matmul(h, p[self.w.0]);
        tape.add_row(z, p[self.b.0])
    }
}

/// Directional encoder outputs, rows aligned to original positions.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub forward: Var,
    pub backward: Var,
    pub moe: Vec<MoeRecord>,
}

/// `H^F` and `H^B` of one sequence, `[T, d]` each, indexed by original position.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalStates<F> {
    pub forward: ValueGrid<F>,
    pub backward: ValueGrid<F>,
}

/// Total vs per-token-activated parameter counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamAudit {
    pub total: usize,
    pub activated: usize,
    pub moe_layers: usize,
    pub expert_size: usize,
}

impl std::fmt::Display for ParamAudit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "total parameters:     {}", self.total)?;
        writeln!(f, "activated parameters: {}", self.activated)?;
        writeln!(f, "moe layers:           {}", self.moe_layers)?;
        write!(f, "parameters per expert: {}", self.expert_size)
    }
}

/// The complete Janus network: two independent stacks, fusion, head.
#[derive(Clone, Debug)]
pub struct JanusModel<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub forward: EncoderStack,
    pub backward: EncoderStack,
    pub fusion: FusionBlock,
    pub head: Head,
}

impl<F: Real> JanusModel<F> {
    /// Randomly initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let forward = EncoderStack::register(&mut store, &mut rng, "fwd", &config);
        let backward = EncoderStack::register(&mut store, &mut rng, "bwd", &config);
        let fusion = FusionBlock::register(&mut store, &mut rng, &config);
        let head = Head::register(&mut store, &mut rng, &config);
        Ok(Self { config, store, forward, backward, fusion, head })
    }

    /// Rebuilds the layout for `config` and adopts `store` after checking
    /// every name and shape.
    pub fn from_store(config: ModelConfig, store: ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if model.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "config implies {} parameter tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for (want, got) in model.store.iter().zip(store.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() || want.kind != got.kind {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn cast<G: Real>(&self) -> JanusModel<G> {
        JanusModel {
            config: self.config.clone(),
            store: self.store.cast(),
            forward: self.forward.clone(),
            backward: self.backward.clone(),
            fusion: self.fusion.clone(),
            head: self.head.clone(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, track: bool) -> Vec<Var> {
        self.store.bind(tape, track)
    }

    fn stack(&self, dir: Direction) -> &EncoderStack {
        match dir {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }

    fn check_ids(&self, ids: &[usize], seq_len: usize) -> Result<()> {
        if seq_len == 0 || ids.is_empty() || ids.len() % seq_len != 0 {
            return Err(Error::Shape(format!("{} token ids do not split into length-{seq_len} sequences", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::TargetOutOfRange { target: bad, classes: self.config.vocab_size });
        }
        Ok(())
    }

    /// `H^F` for `Forward`; for `Backward` the stack reads every sequence
    /// reversed and its output is flipped back to original positions.
    pub fn encode_directional(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        dir: Direction,
        ids: &[usize],
        seq_len: usize,
        moe: &mut Vec<MoeRecord>,
    ) -> Result<Var> {
        self.check_ids(ids, seq_len)?;
        match dir {
            Direction::Forward => self.forward.run(tape, p, ids, seq_len, moe),
            Direction::Backward => {
                let flip = reversal(ids.len(), seq_len);
                let rev: Vec<usize> = flip.iter().map(|&i| ids[i]).collect();
                let h = self.backward.run(tape, p, &rev, seq_len, moe)?;
                Ok(tape.select_rows(h, &flip))
            }
        }
    }

    /// Runs the stack of `dir` in reading order without any reversal.
    pub fn run_stack_unreversed(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        dir: Direction,
        ids: &[usize],
        seq_len: usize,
    ) -> Result<Var> {
        self.check_ids(ids, seq_len)?;
        self.stack(dir).run(tape, p, ids, seq_len, &mut Vec::new())
    }

    /// Both directions. With `with_backward = false` the backward states are
    /// zeros and the backward stack never runs.
    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        ids: &[usize],
        seq_len: usize,
        with_backward: bool,
    ) -> Result<Encoded> {
        let mut moe = Vec::new();
        let forward = self.encode_directional(tape, p, Direction::Forward, ids, seq_len, &mut moe)?;
        let backward = if with_backward {
            self.encode_directional(tape, p, Direction::Backward, ids, seq_len, &mut moe)?
        } else {
            tape.constant(ValueGrid::zeros(&[ids.len(), self.config.d_model]))
        };
        Ok(Encoded { forward, backward, moe })
    }

    /// Fused states `[B * 2T, d]`, sequence-major.
    pub fn fuse(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        enc: &Encoded,
        seq_len: usize,
        mask: Option<&FusionMask>,
    ) -> Result<Var> {
        self.fusion.forward(tape, p, enc.forward, enc.backward, seq_len, mask)
    }

    pub fn logits(&self, tape: &mut Tape<F>, p: &[Var], h: Var) -> Var {
        self.head.forward(tape, p, h)
    }

    /// Untracked directional states of a single sequence.
    pub fn directional_states(&self, ids: &[usize]) -> Result<DirectionalStates<F>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &p, ids, ids.len(), true)?;
        tape.check()?;
        Ok(DirectionalStates { forward: tape.value(enc.forward).clone(), backward: tape.value(enc.backward).clone() })
    }

    /// Untracked fused states `[2T, d]` of one sequence.
    pub fn fused_states(&self, ids: &[usize], mask: Option<&FusionMask>) -> Result<ValueGrid<F>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &p, ids, ids.len(), true)?;
        let h = self.fuse(&mut tape, &p, &enc, ids.len(), mask)?;
        tape.check()?;
        Ok(tape.value(h).clone())
    }

    /// Untracked logits `[2T, V]` at every fused row of one sequence.
    pub fn fused_logits(&self, ids: &[usize], mask: Option<&FusionMask>) -> Result<ValueGrid<F>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &p, ids, ids.len(), true)?;
        let h = self.fuse(&mut tape, &p, &enc, ids.len(), mask)?;
        let z = self.logits(&mut tape, &p, h);
        tape.check()?;
        Ok(tape.value(z).clone())
    }

    pub fn audit(&self) -> ParamAudit {
        let c = &self.config;
        let expert_size = 2 * c.d_model * c.ffn_hidden();
        let moe_layers = 2 * (0..c.n_layers).filter(|&i| c.is_moe_layer(i)).count();
        let total = self.store.count();
        ParamAudit { total, activated: total - moe_layers * (c.n_experts - 1) * expert_size, moe_layers, expert_size }
    }
}

/// Row permutation reversing each consecutive `seq_len` block; an involution.
pub fn reversal(rows: usize, seq_len: usize) -> Vec<usize> {
    (0..rows).map(|r| (r / seq_len) * seq_len + (seq_len - 1 - r % seq_len)).collect()
}
