//! Last-token prediction accuracy, held-out cross-entropy and paired
//! Janus-versus-masked learning curves.

use std::fmt;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::fusion::{build_mask, FusionMask};
use crate::genome::{bidir_determined, TokenSequence, MASK, N};
use crate::model::{JanusModel, ModelConfig};
use crate::numerics::kernels::{argmax, softmax_in_place};
use crate::numerics::{Real, Tape};
use crate::training::{
    janus_loss_masked, mean_position_logits, Corpus, DataConfig, FlatBatch, Objective, TrainConfig, Trainer,
};

#[cfg(test)]
mod tests;

const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub task: String,
    pub n: usize,
    pub accuracy: f64,
    pub ce: f64,
    pub perplexity: f64,
    /// Informational wall-clock cost of training, when known.
    pub secs_per_1k_steps: Option<f64>,
}

impl EvalReport {
    pub const HEADER: &'static str = "model_id,task,n,accuracy,ce,perplexity,secs_per_1k_steps";

    pub fn csv_line(&self) -> String {
        let secs = self.secs_per_1k_steps.map_or(String::new(), |s| format!("{s:.2}"));
        format!("{},{},{},{},{},{},{}", self.model_id, self.task, self.n, self.accuracy, self.ce, self.perplexity, secs)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} on {}: accuracy {:.4} over {} sequences, CE {:.4} nats, perplexity {:.4}",
            self.model_id, self.task, self.accuracy, self.n, self.ce, self.perplexity
        )
    }
}

fn softmax_rows<F: Real>(grid: &crate::numerics::ValueGrid<F>) -> Vec<Vec<f64>> {
    (0..grid.dims2().0)
        .map(|r| {
            let mut row: Vec<f64> = grid.row(r).iter().map(|x| x.as_f64()).collect();
            softmax_in_place(&mut row, None);
            row
        })
        .collect()
}

/// Next-token distributions after equal-length prefixes, read from the last
/// forward fused row. `with_backward = false` is the left-context ablation.
pub fn predict_next_batch<F: Real>(
    model: &JanusModel<F>,
    prefixes: &[Vec<usize>],
    with_backward: bool,
) -> Result<Vec<Vec<f64>>> {
    let len = prefixes.first().map_or(0, Vec::len);
    if len == 0 || prefixes.iter().any(|p| p.len() != len) {
        return Err(Error::Shape("prefixes must be non-empty and of equal length".into()));
    }
    let mask = FusionMask::build(len, 2);
    let mut out = Vec::with_capacity(prefixes.len());
    for chunk in prefixes.chunks(CHUNK) {
        let ids: Vec<usize> = chunk.iter().flatten().copied().collect();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let enc = model.encode(&mut tape, &p, &ids, len, with_backward)?;
        let fused = model.fuse(&mut tape, &p, &enc, len, Some(&mask))?;
        let rows: Vec<usize> = (0..chunk.len()).map(|b| b * 2 * len + len - 1).collect();
        let h = tape.select_rows(fused, &rows);
        let z = model.logits(&mut tape, &p, h);
        tape.check()?;
        out.extend(softmax_rows(tape.value(z)));
    }
    Ok(out)
}

/// Distribution over the vocabulary for the token following `prefix`.
pub fn predict_next<F: Real>(model: &JanusModel<F>, prefix: &[usize]) -> Result<Vec<f64>> {
    Ok(predict_next_batch(model, &[prefix.to_vec()], true)?.remove(0))
}

/// Masked-LM reading of the last position with that token replaced by MASK.
pub fn mlm_last_token_batch<F: Real>(model: &JanusModel<F>, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let len = seqs.first().map_or(0, Vec::len);
    if len < 2 || seqs.iter().any(|s| s.len() != len) {
        return Err(Error::Shape("sequences must have equal length >= 2".into()));
    }
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(CHUNK) {
        let mut ids: Vec<usize> = chunk.iter().flatten().copied().collect();
        for b in 0..chunk.len() {
            ids[b * len + len - 1] = MASK as usize;
        }
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let enc = model.encode(&mut tape, &p, &ids, len, true)?;
        let fused = model.fuse(&mut tape, &p, &enc, len, None)?;
        let z = mean_position_logits(model, &mut tape, &p, fused, chunk.len(), len);
        tape.check()?;
        let probs = softmax_rows(tape.value(z));
        out.extend((0..chunk.len()).map(|b| probs[b * len + len - 1].clone()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LastTokenPrediction {
    pub probs: Vec<f64>,
    pub target: usize,
}

/// Predictions for the final token of every test window whose final token
/// is a base; windows ending in N or padding are skipped.
pub fn last_token_predictions<F: Real>(
    model: &JanusModel<F>,
    objective: Objective,
    test: &[TokenSequence],
) -> Result<Vec<LastTokenPrediction>> {
    let usable: Vec<Vec<usize>> =
        test.iter().filter(|w| w.ids.last().is_some_and(|&t| t < N)).map(|w| w.indices()).collect();
    if usable.is_empty() {
        return Err(Error::Invalid("evaluation set has no usable sequences".into()));
    }
    let targets: Vec<usize> = usable.iter().map(|s| *s.last().unwrap()).collect();
    let probs = match objective {
        Objective::Janus | Objective::JanusLeft => {
            let prefixes: Vec<Vec<usize>> = usable.iter().map(|s| s[..s.len() - 1].to_vec()).collect();
            predict_next_batch(model, &prefixes, objective == Objective::Janus)?
        }
        Objective::Mlm => mlm_last_token_batch(model, &usable)?,
    };
    Ok(probs.into_iter().zip(targets).map(|(probs, target)| LastTokenPrediction { probs, target }).collect())
}

/// `(accuracy, mean CE)`; argmax ties go to the lowest token id.
pub fn score(preds: &[LastTokenPrediction]) -> (f64, f64) {
    let n = preds.len() as f64;
    let correct = preds.iter().filter(|p| argmax(&p.probs) == p.target).count() as f64;
    let ce = preds.iter().map(|p| -p.probs[p.target].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / n;
    (correct / n, ce)
}

pub fn eval_last_token<F: Real>(
    model: &JanusModel<F>,
    objective: Objective,
    test: &[TokenSequence],
    model_id: &str,
    task: &str,
) -> Result<EvalReport> {
    let preds = last_token_predictions(model, objective, test)?;
    let (accuracy, ce) = score(&preds);
    Ok(EvalReport {
        model_id: model_id.into(),
        task: task.into(),
        n: preds.len(),
        accuracy,
        ce,
        perplexity: ce.exp(),
        secs_per_1k_steps: None,
    })
}

/// Mean Janus cross-entropy over the prediction instances whose target is a
/// determined position of a `bidir_motif` record of length `record_len`,
/// restricted to window-interior targets whose two neighbors at distance 2
/// fall inside the window.
pub fn determined_position_ce<F: Real>(
    model: &JanusModel<F>,
    windows: &[TokenSequence],
    record_len: usize,
    with_backward: bool,
) -> Result<f64> {
    let len = windows.first().map_or(0, TokenSequence::len);
    let mask = build_mask(len)?;
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in windows.chunks(CHUNK) {
        let ids: Vec<usize> = chunk.iter().flat_map(|w| w.indices()).collect();
        let mut batch = FlatBatch::new(ids, len)?;
        for (b, w) in chunk.iter().enumerate() {
            for i in 0..len {
                let interior = i >= 2 && i + 2 < len;
                batch.include[b * len + i] &= interior && bidir_determined(w.origin.offset + i, record_len);
            }
        }
        if !batch.include.iter().any(|&x| x) {
            continue;
        }
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let out = janus_loss_masked(model, &mut tape, &p, &batch, with_backward, &mask)?;
        total += out.instances.iter().map(|i| i.ce).sum::<f64>();
        count += out.instances.len();
    }
    if count == 0 {
        return Err(Error::NoInstances);
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub janus_accuracy: f64,
    pub mlm_accuracy: f64,
    pub janus_ce: f64,
    pub mlm_ce: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Curves {
    pub points: Vec<CurvePoint>,
}

impl Curves {
    pub const HEADER: &'static str = "step,janus_accuracy,mlm_accuracy,janus_ce,mlm_ce";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for p in &self.points {
            s.push_str(&format!("{},{},{},{},{}\n", p.step, p.janus_accuracy, p.mlm_accuracy, p.janus_ce, p.mlm_ce));
        }
        s
    }

    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }
}

/// Trained pair plus their curves.
pub struct Comparison {
    pub curves: Curves,
    pub janus: Trainer,
    pub mlm: Trainer,
    pub janus_report: EvalReport,
    pub mlm_report: EvalReport,
}

/// Trains a Janus and a masked-LM model that differ only in objective, from
/// the same initialization and batch order, evaluating both on the held-out
/// windows every `eval_every` steps and at the end.
pub fn compare_paradigms(
    model: &ModelConfig,
    janus: &TrainConfig,
    mlm: &TrainConfig,
    data: &DataConfig,
    corpus: &Corpus,
    eval_every: usize,
) -> Result<Comparison> {
    if janus.objective != Objective::Janus || mlm.objective != Objective::Mlm {
        return Err(Error::Config("comparison needs one janus and one mlm training config".into()));
    }
    let same = TrainConfig { objective: Objective::Janus, ..mlm.clone() };
    if &same != janus {
        return Err(Error::Config("janus and mlm training configs differ in more than the objective".into()));
    }
    let mut tj = Trainer::new(model.clone(), janus.clone(), data.clone(), corpus.train.clone())?;
    let mut tm = Trainer::new(model.clone(), mlm.clone(), data.clone(), corpus.train.clone())?;
    let mut curves = Curves::default();
    let mut point = |tj: &Trainer, tm: &Trainer| -> Result<()> {
        let (ja, jc) = score(&last_token_predictions(&tj.model, Objective::Janus, &corpus.test)?);
        let (ma, mc) = score(&last_token_predictions(&tm.model, Objective::Mlm, &corpus.test)?);
        curves.points.push(CurvePoint {
            step: tj.step,
            janus_accuracy: ja,
            mlm_accuracy: ma,
            janus_ce: jc,
            mlm_ce: mc,
        });
        Ok(())
    };
    point(&tj, &tm)?;
    let (mut secs_j, mut secs_m) = (0.0, 0.0);
    while tj.step < janus.steps {
        let next = if eval_every == 0 { janus.steps } else { (tj.step + eval_every).min(janus.steps) };
        let s = Instant::now();
        tj.run(next, |_| Ok(()), None)?;
        secs_j += s.elapsed().as_secs_f64();
        let s = Instant::now();
        tm.run(next, |_| Ok(()), None)?;
        secs_m += s.elapsed().as_secs_f64();
        point(&tj, &tm)?;
    }
    let last = curves.last().expect("at least one point").clone();
    let n = corpus.test.len();
    let per_1k = |secs: f64| secs * 1000.0 / janus.steps as f64;
    let report = |id: &str, acc: f64, ce: f64, secs: f64| EvalReport {
        model_id: id.into(),
        task: format!("last_token/{}", data.corpus),
        n,
        accuracy: acc,
        ce,
        perplexity: ce.exp(),
        secs_per_1k_steps: Some(per_1k(secs)),
    };
    Ok(Comparison {
        janus_report: report("janus", last.janus_accuracy, last.janus_ce, secs_j),
        mlm_report: report("mlm", last.mlm_accuracy, last.mlm_ce, secs_m),
        curves,
        janus: tj,
        mlm: tm,
    })
}
