//! Sequence classification on top of a pretrained encoder: strand-symmetric
//! pooled embeddings, a linear head, and a toy motif task.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionMask;
use crate::genome::{detokenize, reverse_complement, tokenize, TokenSequence, Vocabulary, N};
use crate::model::{JanusModel, ParamKind, ParamStore};
use crate::numerics::kernels::{argmax, softmax_in_place};
use crate::numerics::{Real, Tape, ValueGrid, Var};
use crate::training::{adamw_step, clip_gradients, AdamHyper, AdamState, Checkpoint, Extension};


pub const HEAD_W: &str = "classifier.w";
pub const HEAD_B: &str = "classifier.b";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Head learning rate; the backbone uses `lr * backbone_lr_ratio`.
    pub lr: f64,
    pub backbone_lr_ratio: f64,
    pub freeze_backbone: bool,
    pub batch_size: usize,
    pub validation_fraction: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3e-3,
            backbone_lr_ratio: 0.1,
            freeze_backbone: false,
            batch_size: 16,
            validation_fraction: 0.2,
            patience: 3,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("finetune.{m}")));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.lr > 0.0) || !(self.backbone_lr_ratio >= 0.0) {
            return bad("lr must be positive and backbone_lr_ratio non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Labeled example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub sequence: TokenSequence,
    pub label: String,
}

/// Reads `sequence<TAB>label` lines; blank lines and `#` comments are skipped.
pub fn read_task_tsv(path: &Path) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    parse_task_tsv(&text).map_err(|(line, msg)| Error::Line { path: path.to_path_buf(), line, msg })
}

pub fn parse_task_tsv(text: &str) -> std::result::Result<Vec<Example>, (usize, String)> {
    let vocab = Vocabulary::canonical();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (seq, label) = line.split_once('\t').ok_or((i + 1, "expected sequence<TAB>label".to_string()))?;
        let label = label.trim();
        if label.is_empty() || label.contains('\t') {
            return Err((i + 1, "expected exactly one non-empty label".into()));
        }
        let sequence = tokenize(&seq.trim().to_ascii_uppercase(), &vocab).map_err(|e| (i + 1, e.to_string()))?;
        check_bases(&sequence).map_err(|e| (i + 1, e.to_string()))?;
        out.push(Example { sequence, label: label.to_string() });
    }
    Ok(out)
}

pub fn write_task_tsv(examples: &[Example]) -> String {
    examples.iter().map(|e| format!("{}\t{}\n", detokenize(&e.sequence), e.label)).collect()
}

fn check_bases(t: &TokenSequence) -> Result<()> {
    match t.ids.iter().find(|&&id| id > N) {
        Some(&id) => Err(Error::SpecialToken { id }),
        None => Ok(()),
    }
}

/// Mean of all `2T` fused rows, accumulated in order in `f64`.
fn pooled_rows<F: Real>(model: &JanusModel<F>, ids: &[usize]) -> Result<Vec<f64>> {
    let mask = FusionMask::build(ids.len(), 2);
    let fused = model.fused_states(ids, Some(&mask))?;
    let (rows, d) = fused.dims2();
    let mut acc = vec![0.0; d];
    for r in 0..rows {
        for (a, x) in acc.iter_mut().zip(fused.row(r)) {
            *a += x.as_f64();
        }
    }
    Ok(acc.into_iter().map(|a| a / rows as f64).collect())
}

/// `(e(t) + e(rc(t))) / 2` where `e` is the mean fused row. The sum is
/// commutative, so a sequence and its reverse complement embed identically.
pub fn rc_pooled_embed<F: Real>(model: &JanusModel<F>, t: &TokenSequence) -> Result<ValueGrid<F>> {
    check_bases(t)?;
    let e1 = pooled_rows(model, &t.indices())?;
    let e2 = pooled_rows(model, &reverse_complement(t)?.indices())?;
    let v: Vec<F> = e1.iter().zip(&e2).map(|(a, b)| F::lit((a + b) * 0.5)).collect();
    ValueGrid::new(vec![v.len()], v)
}

/// Linear map from the pooled embedding to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub labels: Vec<String>,
    pub params: ParamStore<f32>,
}

impl ClassifierHead {
    pub fn new(d_model: usize, labels: Vec<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.add(&mut rng, HEAD_W.into(), ParamKind::Weight, &[d_model, labels.len()]);
        params.add(&mut rng, HEAD_B.into(), ParamKind::Bias, &[labels.len()]);
        Self { labels, params }
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    fn logits(&self, e: &[f64]) -> Vec<f64> {
        let w = &self.params.get(crate::model::ParamId(0)).value;
        let b = &self.params.get(crate::model::ParamId(1)).value;
        let c = self.n_classes();
        (0..c)
            .map(|j| {
                b.data()[j] as f64 + e.iter().enumerate().map(|(i, x)| x * w.data()[i * c + j] as f64).sum::<f64>()
            })
            .collect()
    }
}

/// Fine-tuned encoder plus head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub model: JanusModel<f32>,
    pub head: ClassifierHead,
    pub config: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub class: usize,
    pub label: String,
    pub probs: Vec<f64>,
}

/// Argmax of the head softmax over the strand-symmetric embedding.
pub fn classify(sequence: &TokenSequence, classifier: &Classifier) -> Result<Classification> {
    let e: Vec<f64> = rc_pooled_embed(&classifier.model, sequence)?.data().iter().map(|x| x.as_f64()).collect();
    let mut probs = classifier.head.logits(&e);
    softmax_in_place(&mut probs, None);
    let class = argmax(&probs);
    Ok(Classification { class, label: classifier.head.labels[class].clone(), probs })
}

pub fn accuracy(classifier: &Classifier, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("accuracy over an empty example set".into()));
    }
    let mut hits = 0;
    for e in examples {
        if classify(&e.sequence, classifier)?.label == e.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub validation_accuracy: f64,
    pub train_examples: usize,
    pub validation_examples: usize,
}

/// Pooled embeddings for equal-length sequences on the tape, averaging
/// each sequence with its reverse complement.
fn pooled_on_tape(model: &JanusModel<f32>, tape: &mut Tape<f32>, p: &[Var], group: &[&TokenSequence]) -> Result<Var> {
    let len = group[0].len();
    let g = group.len();
    let mut ids: Vec<usize> = group.iter().flat_map(|s| s.indices()).collect();
    for s in group {
        ids.extend(reverse_complement(s)?.indices());
    }
    let mask = FusionMask::build(len, 2);
    let enc = model.encode(tape, p, &ids, len, true)?;
    let fused = model.fuse(tape, p, &enc, len, Some(&mask))?;
    let rows = 2 * len;
    let mut pool = vec![0f32; g * 2 * g * rows];
    let w = 1.0 / (2 * rows) as f32;
    for b in 0..g {
        for copy in [b, g + b] {
            for r in 0..rows {
                pool[b * 2 * g * rows + copy * rows + r] = w;
            }
        }
    }
    let pool = tape.constant(ValueGrid::new(vec![g, 2 * g * rows], pool)?);
    Ok(tape.matmul(pool, fused))
}

/// Fine-tunes the checkpoint's encoder and a fresh head on `examples`,
/// keeping the parameters of the epoch with the best validation accuracy.
pub fn finetune(ckpt: &Checkpoint, examples: &[Example], cfg: &FinetuneConfig) -> Result<(Classifier, FinetuneReport)> {
    cfg.validate()?;
    let labels: Vec<String> = examples.iter().map(|e| e.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    for e in examples {
        check_bases(&e.sequence)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((examples.len() as f64 * cfg.validation_fraction).round() as usize).max(1);
    if n_val >= examples.len() {
        return Err(Error::Invalid(format!("{} examples leave nothing to train on", examples.len())));
    }
    let validation: Vec<Example> = order[..n_val].iter().map(|&i| examples[i].clone()).collect();
    let mut train: Vec<&Example> = order[n_val..].iter().map(|&i| &examples[i]).collect();
    let train_labels: BTreeSet<&str> = train.iter().map(|e| e.label.as_str()).collect();
    if train_labels.len() < 2 {
        return Err(Error::Invalid(format!(
            "training split has a single class {:?}; classification needs at least two",
            train_labels.iter().next().copied().unwrap_or("")
        )));
    }
    let class_of = |l: &str| labels.iter().position(|x| x == l).expect("label collected");

    let model = JanusModel::from_store(ckpt.model_config.clone(), ckpt.params.clone())?;
    let head = ClassifierHead::new(model.config.d_model, labels.clone(), cfg.seed ^ 0x6865_6164);
    let mut clf = Classifier { model, head, config: cfg.clone() };
    let hp = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: cfg.weight_decay };
    let mut adam_model = AdamState::new(&clf.model.store);
    let mut adam_head = AdamState::new(&clf.head.params);

    let mut best = (f64::NEG_INFINITY, 0usize, clf.clone());
    let mut records = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for batch in train.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let pm = clf.model.bind(&mut tape, !cfg.freeze_backbone);
            let ph = clf.head.params.bind(&mut tape, true);
            let mut lengths: Vec<usize> = batch.iter().map(|e| e.sequence.len()).collect();
            lengths.sort_unstable();
            lengths.dedup();
            let mut parts = Vec::new();
            let mut targets = Vec::new();
            for len in lengths {
                let group: Vec<&Example> = batch.iter().copied().filter(|e| e.sequence.len() == len).collect();
                let seqs: Vec<&TokenSequence> = group.iter().map(|e| &e.sequence).collect();
                parts.push(pooled_on_tape(&clf.model, &mut tape, &pm, &seqs)?);
                targets.extend(group.iter().map(|e| class_of(&e.label)));
            }
            let pooled = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
            let z = tape.matmul(pooled, ph[0]);
            let z = tape.add_row(z, ph[1]);
            let loss = tape.cross_entropy_mean(z, &targets, None)?;
            tape.backward(loss)?;
            loss_sum += tape.value(loss).item() as f64;
            batches += 1;
            clf.head.params.zero_grad();
            clf.head.params.accumulate_grads(&tape, &ph);
            clip_gradients(&mut clf.head.params, cfg.clip_norm)?;
            adamw_step(&mut clf.head.params, &mut adam_head, cfg.lr, &hp)?;
            if !cfg.freeze_backbone {
                clf.model.store.zero_grad();
                clf.model.store.accumulate_grads(&tape, &pm);
                clip_gradients(&mut clf.model.store, cfg.clip_norm)?;
                adamw_step(&mut clf.model.store, &mut adam_model, cfg.lr * cfg.backbone_lr_ratio, &hp)?;
            }
        }
        let acc = accuracy(&clf, &validation)?;
        records.push(EpochRecord { epoch, train_loss: loss_sum / batches as f64, validation_accuracy: acc });
        log::info!("finetune epoch {epoch}: loss {:.4}, validation accuracy {acc:.4}", loss_sum / batches as f64);
        if acc > best.0 {
            best = (acc, epoch, clf.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (validation_accuracy, best_epoch, mut clf) = best;
    clf.model.store.zero_grad();
    clf.head.params.zero_grad();
    Ok((
        clf,
        FinetuneReport {
            epochs: records,
            best_epoch,
            validation_accuracy,
            train_examples: train.len(),
            validation_examples: validation.len(),
        },
    ))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    labels: Vec<String>,
    finetune: FinetuneConfig,
}

impl Classifier {
    /// Checkpoint carrying the tuned encoder and the head as an extension.
    pub fn to_checkpoint(&self, base: &Checkpoint) -> Checkpoint {
        let meta = HeadMeta { labels: self.head.labels.clone(), finetune: self.config.clone() };
        let mut c = base.clone();
        c.params = self.model.store.clone();
        c.state.adam = AdamState::new(&c.params);
        c.extension = Some(Extension {
            config: toml::to_string(&meta).expect("head config serializes"),
            params: self.head.params.clone(),
        });
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let ext =
            c.extension.as_ref().ok_or_else(|| Error::Checkpoint("no classifier head in this checkpoint".into()))?;
        let meta: HeadMeta =
            toml::from_str(&ext.config).map_err(|e| Error::Checkpoint(format!("classifier config: {e}")))?;
        let model = JanusModel::from_store(c.model_config.clone(), c.params.clone())?;
        let (d, k) = (model.config.d_model, meta.labels.len());
        let ok = ext.params.len() == 2
            && ext.params.by_name(HEAD_W) == Some(crate::model::ParamId(0))
            && ext.params.by_name(HEAD_B) == Some(crate::model::ParamId(1))
            && ext.params.get(crate::model::ParamId(0)).value.shape() == [d, k]
            && ext.params.get(crate::model::ParamId(1)).value.shape() == [k];
        if !ok {
            return Err(Error::Checkpoint(format!("classifier head does not match d_model {d} and {k} labels")));
        }
        Ok(Self {
            model,
            head: ClassifierHead { labels: meta.labels, params: ext.params.clone() },
            config: meta.finetune,
        })
    }
}

/// Labels for the motif task.
pub const MOTIF_LABELS: [&str; 2] = ["absent", "present"];

fn has_motif(ids: &[u8]) -> bool {
    const GATA: [u8; 4] = [2, 0, 3, 0];
    const TATC: [u8; 4] = [3, 0, 3, 1];
    ids.windows(4).any(|w| w == GATA || w == TATC)
}

/// Balanced "contains GATA on either strand" task: positives carry one
/// `GATA` or its reverse complement `TATC` at a random offset, negatives
/// carry neither.
pub fn motif_task(seed: u64, n: usize, len: usize) -> Vec<Example> {
    assert!(len >= 4, "motif task needs sequences of at least 4 bases");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let present = i % 2 == 1;
            let ids = loop {
                let mut ids: Vec<u8> = (0..len).map(|_| rng.gen_range(0..4)).collect();
                if present {
                    let at = rng.gen_range(0..=len - 4);
                    let motif: [u8; 4] = if rng.gen_bool(0.5) { [2, 0, 3, 0] } else { [3, 0, 3, 1] };
                    ids[at..at + 4].copy_from_slice(&motif);
                }
                if has_motif(&ids) == present {
                    break ids;
                }
            };
            Example { sequence: TokenSequence::new(ids), label: MOTIF_LABELS[present as usize].into() }
        })
        .collect()
}
