//! Run configuration: one TOML document with `[model]`, `[train]`, `[data]`,
//! `[eval]` and `[finetune]` tables, plus dotted `section.key=value`
//! overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::ModelConfig;
use crate::training::{DataConfig, TrainConfig};

/// Environment variable that overrides every seed in a run config.
pub const SEED_ENV: &str = "JANUS_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Steps between evaluation points of a comparison run; 0 evaluates
    /// only at the start and the end.
    pub eval_every: usize,
    /// Cap on held-out windows; 0 keeps them all.
    pub max_sequences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { eval_every: 200, max_sequences: 1920 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        if self.model.vocab_size != crate::genome::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "model.vocab_size must be {} for the nucleotide vocabulary",
                crate::genome::VOCAB_SIZE
            )));
        }
        Ok(())
    }

    /// Applies `section.key=value`. The value is read as a TOML literal,
    /// falling back to a bare string, and must type-check against the field.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
        let key = key.trim();
        let path: Vec<&str> = key.split('.').collect();
        if path.len() != 2 || path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override key {key:?} must be section.field")));
        }
        let value = parse_literal(raw.trim());
        let mut doc = toml::Table::try_from(&*self).expect("run config is a table");
        let section = doc
            .get_mut(path[0])
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::Config(format!("unknown config section {:?} in override {key:?}", path[0])))?;
        section.insert(path[1].to_string(), value);
        *self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override {key}: {}", e.message())))?;
        Ok(())
    }

    /// Sets the model, training and fine-tuning seeds. The data seed names
    /// the corpus and is left alone.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.finetune.seed = seed;
    }

    /// Builds a config with precedence file < overrides < `JANUS_SEED` <
    /// explicit seed flag.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[String],
        env_seed: Option<&str>,
        flag_seed: Option<u64>,
    ) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for o in overrides {
            c.apply_override(o)?;
        }
        if let Some(s) = env_seed {
            let seed =
                s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            c.set_seed(seed);
        }
        if let Some(seed) = flag_seed {
            c.set_seed(seed);
        }
        c.validate()?;
        Ok(c)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
