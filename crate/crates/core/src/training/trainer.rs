use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{build_mask, FusionMask};
use crate::genome::{TokenSequence, Vocabulary};
use crate::model::{JanusModel, ModelConfig};
use crate::numerics::Tape;

use super::checkpoint::{save_checkpoint, Checkpoint, RngState, TrainState};
use super::config::{Objective, TrainConfig};
use super::data::DataConfig;
use super::loss::{draw_mask_positions, janus_loss_masked, mlm_loss, FlatBatch, LossOutput};
use super::optim::{adamw_step, clip_gradients, lr_at, AdamHyper, AdamState};

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub ce: f64,
    pub aux: f64,
    pub ppl: f64,
    pub lr: f64,
    pub balance: f64,
    pub tps: f64,
}

impl MetricRow {
    pub const HEADER: &'static str = "step,ce,aux,ppl,lr,balance,tps";

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{},{},{:.1}", self.step, self.ce, self.aux, self.ppl, self.lr, self.balance, self.tps)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Invalid(format!("malformed metrics row {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            ce: num(1)?,
            aux: num(2)?,
            ppl: num(3)?,
            lr: num(4)?,
            balance: num(5)?,
            tps: num(6)?,
        })
    }

    /// Same row apart from throughput, which depends on wall-clock time.
    pub fn same_run_values(&self, other: &Self) -> bool {
        (
            self.step,
            self.ce.to_bits(),
            self.aux.to_bits(),
            self.ppl.to_bits(),
            self.lr.to_bits(),
            self.balance.to_bits(),
        ) == (
            other.step,
            other.ce.to_bits(),
            other.aux.to_bits(),
            other.ppl.to_bits(),
            other.lr.to_bits(),
            other.balance.to_bits(),
        )
    }
}

/// Appends metric rows to a CSV file, writing the header for a new file.
pub struct MetricsWriter {
    file: fs::File,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let file_err = |source| Error::File { path: path.to_path_buf(), source };
        let fresh = !path.exists() || fs::metadata(path).map_err(file_err)?.len() == 0;
        let mut file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(file_err)?;
        if fresh {
            writeln!(file, "{}", MetricRow::HEADER).map_err(file_err)?;
        }
        Ok(Self { file })
    }

    pub fn write(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(self.file, "{}", row.csv_line())?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    let mut lines = text.lines();
    if lines.next() != Some(MetricRow::HEADER) {
        return Err(Error::Invalid(format!("{} lacks the metrics header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(MetricRow::parse).collect()
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(MetricRow::HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Seeded pretraining loop over a fixed window pool.
pub struct Trainer {
    pub model: JanusModel<f32>,
    pub config: TrainConfig,
    pub data_config: DataConfig,
    pub adam: AdamState<f32>,
    pub step: usize,
    pub last_ce: f64,
    pub best_ce: f64,
    rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    windows: Vec<TokenSequence>,
    mask: FusionMask,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Trainer {
    pub fn new(
        model_config: ModelConfig,
        config: TrainConfig,
        data_config: DataConfig,
        windows: Vec<TokenSequence>,
    ) -> Result<Self> {
        config.validate()?;
        let model = JanusModel::new(model_config)?;
        let adam = AdamState::new(&model.store);
        let (rng, mask_rng) = (stream(config.seed, 0), stream(config.seed, 1));
        Self::assemble(model, config, data_config, adam, windows, rng, mask_rng)
    }

    fn assemble(
        model: JanusModel<f32>,
        config: TrainConfig,
        data_config: DataConfig,
        adam: AdamState<f32>,
        windows: Vec<TokenSequence>,
        rng: ChaCha8Rng,
        mask_rng: ChaCha8Rng,
    ) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Invalid("training needs at least one window".into()));
        }
        if let Some(w) = windows.iter().find(|w| w.len() != config.seq_len) {
            return Err(Error::Shape(format!("window of length {} for train.seq_len {}", w.len(), config.seq_len)));
        }
        let mask = build_mask(config.seq_len)?;
        Ok(Self {
            model,
            config,
            data_config,
            adam,
            step: 0,
            last_ce: f64::NAN,
            best_ce: f64::INFINITY,
            rng,
            mask_rng,
            windows,
            mask,
        })
    }

    /// Continues exactly where `ckpt` stopped.
    pub fn resume(ckpt: Checkpoint, windows: Vec<TokenSequence>) -> Result<Self> {
        ckpt.train_config.validate()?;
        let model = JanusModel::from_store(ckpt.model_config, ckpt.params)?;
        let s = ckpt.state;
        let mut t = Self::assemble(
            model,
            ckpt.train_config,
            ckpt.data_config,
            s.adam,
            windows,
            s.rng.restore(),
            s.mask_rng.restore(),
        )?;
        t.step = s.step as usize;
        t.last_ce = s.last_ce;
        t.best_ce = s.best_ce;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = self.model.store.clone();
        params.zero_grad();
        Checkpoint {
            model_config: self.model.config.clone(),
            train_config: self.config.clone(),
            data_config: self.data_config.clone(),
            vocabulary: Vocabulary::canonical(),
            params,
            state: TrainState {
                step: self.step as u64,
                adam: self.adam.clone(),
                rng: RngState::capture(&self.rng),
                mask_rng: RngState::capture(&self.mask_rng),
                last_ce: self.last_ce,
                best_ce: self.best_ce,
            },
            extension: None,
        }
    }

    /// Samples `batch_size` windows uniformly with replacement.
    pub fn next_batch(&mut self) -> Result<FlatBatch> {
        let t = self.config.seq_len;
        let mut ids = Vec::with_capacity(self.config.batch_size * t);
        let mut include = Vec::with_capacity(ids.capacity());
        for _ in 0..self.config.batch_size {
            let w = &self.windows[self.rng.gen_range(0..self.windows.len())];
            ids.extend(w.ids.iter().map(|&i| i as usize));
            include.extend(w.ids.iter().map(|&i| i != crate::genome::PAD));
        }
        let mut b = FlatBatch::new(ids, t)?;
        b.include = include;
        Ok(b)
    }

    /// Objective on `batch` without touching parameters.
    pub fn loss(&mut self, tape: &mut Tape<f32>, p: &[crate::numerics::Var], batch: &FlatBatch) -> Result<LossOutput> {
        match self.config.objective {
            Objective::Janus => janus_loss_masked(&self.model, tape, p, batch, true, &self.mask),
            Objective::JanusLeft => janus_loss_masked(&self.model, tape, p, batch, false, &self.mask),
            Objective::Mlm => {
                let pos = draw_mask_positions(
                    &mut self.mask_rng,
                    batch.batch_size(),
                    batch.seq_len,
                    self.config.mask_fraction,
                )?;
                mlm_loss(&self.model, tape, p, batch, &pos)
            }
        }
    }

    /// One optimizer step. On a non-finite loss or gradient the parameters
    /// are left untouched and an error is returned.
    pub fn step(&mut self) -> Result<MetricRow> {
        let started = Instant::now();
        let batch = self.next_batch()?;
        let mut tape = Tape::new();
        let p = self.model.bind(&mut tape, true);
        let out = self.loss(&mut tape, &p, &batch)?;
        tape.backward(out.total)?;
        let ce = tape.value(out.ce).item() as f64;
        let aux = out.aux.map_or(0.0, |a| tape.value(a).item() as f64);
        self.model.store.zero_grad();
        self.model.store.accumulate_grads(&tape, &p);
        drop(tape);
        clip_gradients(&mut self.model.store, self.config.clip_norm)?;
        let lr = lr_at(self.step, &self.config);
        adamw_step(&mut self.model.store, &mut self.adam, lr, &AdamHyper::from(&self.config))?;
        self.step += 1;
        self.last_ce = ce;
        self.best_ce = self.best_ce.min(ce);
        let balance = if out.stats.is_empty() {
            0.0
        } else {
            out.stats.iter().map(|s| s.balance()).sum::<f64>() / out.stats.len() as f64
        };
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        Ok(MetricRow { step: self.step, ce, aux, ppl: ce.exp(), lr, balance, tps: batch.ids.len() as f64 / secs })
    }

    /// Trains until `until` steps are complete, reporting every row to
    /// `sink`. With `ckpt_dir`, writes `step_<n>.jnsc` every
    /// `checkpoint_every` steps and `final.jnsc` at the end.
    pub fn run(
        &mut self,
        until: usize,
        mut sink: impl FnMut(&MetricRow) -> Result<()>,
        ckpt_dir: Option<&Path>,
    ) -> Result<Option<PathBuf>> {
        while self.step < until {
            let row = self.step()?;
            sink(&row)?;
            if let Some(dir) = ckpt_dir {
                let k = self.config.checkpoint_every;
                if k > 0 && self.step % k == 0 && self.step < until {
                    save_checkpoint(&dir.join(format!("step_{}.jnsc", self.step)), &self.checkpoint())?;
                }
            }
        }
        match ckpt_dir {
            Some(dir) => {
                let path = dir.join("final.jnsc");
                save_checkpoint(&path, &self.checkpoint())?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }
}
