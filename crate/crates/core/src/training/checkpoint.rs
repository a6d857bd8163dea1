use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::genome::Vocabulary;
use crate::model::{ModelConfig, Param, ParamKind, ParamStore};
use crate::numerics::ValueGrid;

use super::config::TrainConfig;
use super::data::DataConfig;
use super::optim::AdamState;

pub const MAGIC: &[u8; 4] = b"JNSC";
pub const VERSION: u16 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam: AdamState<f32>,
    /// Batch sampling stream.
    pub rng: RngState,
    /// Masked-LM corruption stream.
    pub mask_rng: RngState,
    pub last_ce: f64,
    pub best_ce: f64,
}

/// Extra named tensors with their own config text, used by classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct Extension {
    pub config: String,
    pub params: ParamStore<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub data_config: DataConfig,
    pub vocabulary: Vocabulary,
    pub params: ParamStore<f32>,
    pub state: TrainState,
    pub extension: Option<Extension>,
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.write_u32::<LE>(s.len() as u32).unwrap();
    w.extend_from_slice(s.as_bytes());
}

fn put_values(w: &mut Vec<u8>, v: &[f32]) {
    for &x in v {
        w.write_f32::<LE>(x).unwrap();
    }
}

fn put_table(w: &mut Vec<u8>, store: &ParamStore<f32>) {
    w.write_u32::<LE>(store.len() as u32).unwrap();
    for p in store.iter() {
        put_str(w, &p.name);
        w.write_u8(p.kind.code()).unwrap();
        let shape = p.value.shape();
        w.write_u32::<LE>(shape.len() as u32).unwrap();
        for &d in shape {
            w.write_u64::<LE>(d as u64).unwrap();
        }
        put_values(w, p.value.data());
    }
}

fn toml_text<T: serde::Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config serializes")
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    w.write_u16::<LE>(VERSION).unwrap();
    put_str(&mut w, &toml_text(&c.model_config));
    put_str(&mut w, &toml_text(&c.train_config));
    put_str(&mut w, &toml_text(&c.data_config));
    put_str(&mut w, &c.vocabulary.symbols().join("\n"));
    put_table(&mut w, &c.params);
    let s = &c.state;
    w.write_u64::<LE>(s.step).unwrap();
    w.write_u64::<LE>(s.adam.step).unwrap();
    for buf in s.adam.m.iter().chain(&s.adam.v) {
        w.write_u64::<LE>(buf.len() as u64).unwrap();
        put_values(&mut w, buf);
    }
    for rng in [&s.rng, &s.mask_rng] {
        w.extend_from_slice(&rng.seed);
        w.write_u64::<LE>(rng.stream).unwrap();
        w.write_u128::<LE>(rng.word_pos).unwrap();
    }
    w.write_f64::<LE>(s.last_ce).unwrap();
    w.write_f64::<LE>(s.best_ce).unwrap();
    match &c.extension {
        None => w.write_u8(0).unwrap(),
        Some(e) => {
            w.write_u8(1).unwrap();
            put_str(&mut w, &e.config);
            put_table(&mut w, &e.params);
        }
    }
    w
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn u8(&mut self) -> Result<u8> {
        self.0.read_u8().map_err(truncated)
    }
    fn u32(&mut self) -> Result<u32> {
        self.0.read_u32::<LE>().map_err(truncated)
    }
    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LE>().map_err(truncated)
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(4) > self.0.len() {
            return Err(Error::Checkpoint(format!("{what} length {n} exceeds remaining data")));
        }
        Ok(n)
    }
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        if n > self.0.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let mut v = vec![0; n];
        self.0.read_exact(&mut v).map_err(truncated)?;
        Ok(v)
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Checkpoint("string field is not UTF-8".into()))
    }
    fn values(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| self.0.read_f32::<LE>().map_err(truncated)).collect()
    }
    fn rng(&mut self) -> Result<RngState> {
        let seed: [u8; 32] = self.bytes(32)?.try_into().expect("32 bytes");
        let stream = self.u64()?;
        let word_pos = self.0.read_u128::<LE>().map_err(truncated)?;
        Ok(RngState { seed, stream, word_pos })
    }

    fn table(&mut self) -> Result<ParamStore<f32>> {
        let count = self.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = self.string()?;
            let kind = ParamKind::from_code(self.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} has an unknown kind code")))?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = match n {
                Some(n) if n.saturating_mul(4) <= self.0.len() => n,
                _ => return Err(Error::Checkpoint(format!("parameter {name} shape {shape:?} exceeds remaining data"))),
            };
            let data = self.values(n)?;
            let value = ValueGrid::new(shape, data)?.with_grad();
            store.push(Param { name, kind, value });
        }
        Ok(store)
    }
}

fn parse_toml<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Checkpoint(format!("{what} section: {e}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader(bytes);
    let magic = r.bytes(4).map_err(|_| Error::Checkpoint("missing magic bytes".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"JNSC\"")));
    }
    let version = r.0.read_u16::<LE>().map_err(truncated)?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let model_config: ModelConfig = parse_toml("model config", &r.string()?)?;
    let train_config: TrainConfig = parse_toml("train config", &r.string()?)?;
    let data_config: DataConfig = parse_toml("data config", &r.string()?)?;
    let vocabulary = Vocabulary::from_symbols(r.string()?.split('\n').map(str::to_string).collect())?;
    let params = r.table()?;
    let step = r.u64()?;
    let adam_step = r.u64()?;
    let mut moments = Vec::with_capacity(2 * params.len());
    for _ in 0..2 * params.len() {
        let n = r.len("moment buffer")?;
        moments.push(r.values(n)?);
    }
    let v = moments.split_off(params.len());
    let m = moments;
    for (i, p) in params.iter().enumerate() {
        if m[i].len() != p.value.len() || v[i].len() != p.value.len() {
            return Err(Error::Checkpoint(format!("moment buffers of {} do not match its shape", p.name)));
        }
    }
    let rng = r.rng()?;
    let mask_rng = r.rng()?;
    let last_ce = r.0.read_f64::<LE>().map_err(truncated)?;
    let best_ce = r.0.read_f64::<LE>().map_err(truncated)?;
    let extension = match r.u8()? {
        0 => None,
        1 => Some(Extension { config: r.string()?, params: r.table()? }),
        other => return Err(Error::Checkpoint(format!("unknown extension flag {other}"))),
    };
    if !r.0.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.0.len())));
    }
    Ok(Checkpoint {
        model_config,
        train_config,
        data_config,
        vocabulary,
        params,
        state: TrainState { step, adam: AdamState { step: adam_step, m, v }, rng, mask_rng, last_ce, best_ce },
        extension,
    })
}

/// Writes through a temporary sibling and a rename, so an interrupted write
/// never replaces a good checkpoint.
pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file_err = |source| Error::File { path: path.to_path_buf(), source };
    {
        let mut f = fs::File::create(&tmp).map_err(file_err)?;
        f.write_all(&encode_checkpoint(c)).map_err(file_err)?;
        f.sync_all().map_err(file_err)?;
    }
    fs::rename(&tmp, path).map_err(file_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
