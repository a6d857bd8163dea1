use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::{build_mask, target_map, FusionMask, Instance};
use crate::genome::{MASK, PAD};
use crate::model::{aux_loss_tape, JanusModel, RouterStats};
use crate::numerics::kernels::log_sum_exp;
use crate::numerics::{Real, Tape, Var};

/// Flattened batch of `batch * seq_len` token ids with loss inclusion flags.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatBatch {
    pub ids: Vec<usize>,
    pub include: Vec<bool>,
    pub seq_len: usize,
}

impl FlatBatch {
    pub fn new(ids: Vec<usize>, seq_len: usize) -> Result<Self> {
        if seq_len < 2 || ids.is_empty() || ids.len() % seq_len != 0 {
            return Err(Error::Shape(format!("{} ids do not form sequences of length {seq_len} >= 2", ids.len())));
        }
        let include = ids.iter().map(|&i| i != PAD as usize).collect();
        Ok(Self { ids, include, seq_len })
    }

    pub fn from_batch(batch: &crate::genome::SequenceBatch) -> Result<Self> {
        let seq_len = batch.sequences.first().map_or(0, |s| s.ids.len());
        let ids = batch.sequences.iter().flat_map(|s| s.ids.iter().map(|&i| i as usize)).collect();
        let mut flat = Self::new(ids, seq_len)?;
        flat.include = batch.include.iter().flatten().copied().collect();
        Ok(flat)
    }

    pub fn batch_size(&self) -> usize {
        self.ids.len() / self.seq_len
    }
}

/// A prediction that contributed to the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceLoss {
    pub sequence: usize,
    pub instance: Instance,
    pub ce: f64,
}

/// Taped loss pieces; `total = ce + aux`.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub ce: Var,
    pub aux: Option<Var>,
    pub logits: Var,
    pub stats: Vec<RouterStats>,
    pub instances: Vec<InstanceLoss>,
}

fn row_ce<F: Real>(row: &[F], target: usize) -> f64 {
    let r: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
    log_sum_exp(&r) - r[target]
}

fn finish<F: Real>(
    model: &JanusModel<F>,
    tape: &mut Tape<F>,
    ce: Var,
    logits: Var,
    moe: Vec<crate::model::MoeRecord>,
    instances: Vec<InstanceLoss>,
) -> LossOutput {
    let aux = aux_loss_tape(tape, &moe, model.config.alpha_aux);
    let total = match aux {
        Some(a) => tape.add(ce, a),
        None => ce,
    };
    LossOutput { total, ce, aux, logits, stats: moe.into_iter().map(|r| r.stats).collect(), instances }
}

/// Janus objective: every fused row with a target predicts it, cross-entropy
/// averaged over all non-PAD instances, plus the MoE auxiliary loss.
/// `with_backward = false` is the left-context ablation.
pub fn janus_loss<F: Real>(
    model: &JanusModel<F>,
    tape: &mut Tape<F>,
    p: &[Var],
    batch: &FlatBatch,
    with_backward: bool,
) -> Result<LossOutput> {
    let t = batch.seq_len;
    janus_loss_masked(model, tape, p, batch, with_backward, &build_mask(t)?)
}

pub fn janus_loss_masked<F: Real>(
    model: &JanusModel<F>,
    tape: &mut Tape<F>,
    p: &[Var],
    batch: &FlatBatch,
    with_backward: bool,
    mask: &FusionMask,
) -> Result<LossOutput> {
    let t = batch.seq_len;
    let map = target_map(t)?;
    let enc = model.encode(tape, p, &batch.ids, t, with_backward)?;
    let fused = model.fuse(tape, p, &enc, t, Some(mask))?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut include = Vec::new();
    let mut owners = Vec::new();
    for b in 0..batch.batch_size() {
        for inst in &map.instances {
            rows.push(b * 2 * t + inst.row);
            targets.push(batch.ids[b * t + inst.target]);
            include.push(batch.include[b * t + inst.target]);
            owners.push((b, *inst));
        }
    }
    let h = tape.select_rows(fused, &rows);
    let logits = model.logits(tape, p, h);
    let ce = tape.cross_entropy_mean(logits, &targets, Some(&include))?;
    let lv = tape.value(logits);
    let instances = owners
        .iter()
        .enumerate()
        .filter(|(k, _)| include[*k])
        .map(|(k, &(sequence, instance))| InstanceLoss { sequence, instance, ce: row_ce(lv.row(k), targets[k]) })
        .collect();
    Ok(finish(model, tape, ce, logits, enc.moe, instances))
}

/// Number of positions the masked-LM objective corrupts per sequence.
pub fn mask_count(seq_len: usize, fraction: f64) -> Result<usize> {
    let k = (fraction * seq_len as f64 - 1e-9).ceil();
    if !(fraction > 0.0 && fraction < 1.0) || k < 1.0 || k as usize >= seq_len {
        return Err(Error::Invalid(format!(
            "mask fraction {fraction} on length {seq_len} must mask between 1 and {} positions",
            seq_len.saturating_sub(1)
        )));
    }
    Ok(k as usize)
}

/// Draws the corrupted positions of every sequence, without replacement.
pub fn draw_mask_positions<R: Rng>(
    rng: &mut R,
    batch: usize,
    seq_len: usize,
    fraction: f64,
) -> Result<Vec<Vec<usize>>> {
    let k = mask_count(seq_len, fraction)?;
    Ok((0..batch)
        .map(|_| {
            let mut v = sample(rng, seq_len, k).into_vec();
            v.sort_unstable();
            v
        })
        .collect())
}

/// Masked-LM baseline: chosen positions become MASK, both stacks read the
/// corrupted sequence, fusion attends without a mask, and position `t` is
/// read from the mean of fused rows `t` and `T + t`. Loss only at masked,
/// non-PAD positions.
pub fn mlm_loss<F: Real>(
    model: &JanusModel<F>,
    tape: &mut Tape<F>,
    p: &[Var],
    batch: &FlatBatch,
    positions: &[Vec<usize>],
) -> Result<LossOutput> {
    let t = batch.seq_len;
    let n = batch.batch_size();
    if positions.len() != n {
        return Err(Error::Shape(format!("{} mask position sets for {n} sequences", positions.len())));
    }
    let mut corrupted = batch.ids.clone();
    let mut include = vec![false; batch.ids.len()];
    for (b, pos) in positions.iter().enumerate() {
        for &i in pos {
            if i >= t {
                return Err(Error::Invalid(format!("mask position {i} outside length {t}")));
            }
            corrupted[b * t + i] = MASK as usize;
            include[b * t + i] = batch.include[b * t + i];
        }
    }
    let enc = model.encode(tape, p, &corrupted, t, true)?;
    let fused = model.fuse(tape, p, &enc, t, None)?;
    let logits = mean_position_logits(model, tape, p, fused, n, t);
    let ce = tape.cross_entropy_mean(logits, &batch.ids, Some(&include))?;
    let lv = tape.value(logits);
    let instances = (0..batch.ids.len())
        .filter(|&k| include[k])
        .map(|k| InstanceLoss {
            sequence: k / t,
            instance: Instance { row: k % t, target: k % t, half: crate::fusion::Half::Forward },
            ce: row_ce(lv.row(k), batch.ids[k]),
        })
        .collect();
    Ok(finish(model, tape, ce, logits, enc.moe, instances))
}

/// Logits `[B * T, V]` from the average of each position's two fused rows.
pub fn mean_position_logits<F: Real>(
    model: &JanusModel<F>,
    tape: &mut Tape<F>,
    p: &[Var],
    fused: Var,
    batch: usize,
    seq_len: usize,
) -> Var {
    let fwd: Vec<usize> = (0..batch).flat_map(|b| (0..seq_len).map(move |i| b * 2 * seq_len + i)).collect();
    let bwd: Vec<usize> = fwd.iter().map(|r| r + seq_len).collect();
    let a = tape.select_rows(fused, &fwd);
    let b = tape.select_rows(fused, &bwd);
    let s = tape.add(a, b);
    let h = tape.scale(s, F::lit(0.5));
    model.logits(tape, p, h)
}
