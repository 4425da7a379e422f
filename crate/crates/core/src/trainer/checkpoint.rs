//! Binary checkpoint container.
//!
//! ```text
//! "TMIM"  u32 version
//! u32 count, then per parameter:
//!     u32 name length, name bytes, u32 rank, u64 extents, f64 values
//! optimizer:  u64 step, u32 count, then per parameter:
//!     u32 name length, name bytes, u64 length, f64 m values, f64 v values
//! rng:        32-byte seed, u64 stream, u128 word position,
//!             u64 epoch, u64 batch, u64 step
//! config:     u64 length, UTF-8 TOML
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::adamw::{Moments, OptimizerState};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::PromptedModel;

pub const MAGIC: &[u8; 4] = b"TMIM";
pub const VERSION: u32 = 1;

/// Position of the data stream: the epoch generator's state and the next
/// batch to draw.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
    pub epoch: u64,
    pub batch: u64,
    pub step: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng, epoch: u64, batch: u64, step: u64) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
            epoch,
            batch,
            step,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub params: Vec<ParamRecord>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn capture(model: &PromptedModel, optimizer: &OptimizerState, config: &TrainConfig, rng: RngState) -> Self {
        Checkpoint {
            version: VERSION,
            params: model
                .named_parameters()
                .into_iter()
                .map(|(name, p)| ParamRecord {
                    name,
                    shape: p.shape().to_vec(),
                    data: p.to_vec(),
                })
                .collect(),
            optimizer: optimizer.clone(),
            rng,
            config: config.clone(),
        }
    }

    /// Rebuilds the model described by the stored config and loads every
    /// parameter into it.
    pub fn model(&self) -> Result<PromptedModel> {
        let model = PromptedModel::with_config(&self.config.model, self.config.seed);
        self.load_into(&model)?;
        Ok(model)
    }

    /// Copies stored values into `model`; names and shapes must match exactly.
    pub fn load_into(&self, model: &PromptedModel) -> Result<()> {
        let params = model.named_parameters();
        for rec in &self.params {
            let Some((_, p)) = params.iter().find(|(n, _)| *n == rec.name) else {
                return Err(Error::Format(format!("unknown parameter {:?}", rec.name)));
            };
            if p.shape() != rec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    rec.name,
                    rec.shape,
                    p.shape()
                )));
            }
        }
        for (name, p) in &params {
            let rec = self
                .params
                .iter()
                .find(|r| r.name == *name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name:?}")))?;
            p.set_data(&rec.data)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(self.version);
        w.u32(self.params.len() as u32);
        for rec in &self.params {
            w.str(&rec.name);
            w.u32(rec.shape.len() as u32);
            rec.shape.iter().for_each(|&d| w.u64(d as u64));
            w.f64s(&rec.data);
        }
        w.u64(self.optimizer.step);
        w.u32(self.optimizer.moments.len() as u32);
        for mo in &self.optimizer.moments {
            w.str(&mo.name);
            w.u64(mo.m.len() as u64);
            w.f64s(&mo.m);
            w.f64s(&mo.v);
        }
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.u64(self.rng.epoch);
        w.u64(self.rng.batch);
        w.u64(self.rng.step);
        let config = toml::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        w.u64(config.len() as u64);
        w.bytes(config.as_bytes());
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic (not a TMIM checkpoint)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let data = r.f64s(shape.iter().product())?;
            params.push(ParamRecord { name, shape, data });
        }
        let step = r.u64()?;
        let count = r.u32()?;
        let mut moments = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.str()?;
            let len = r.len()?;
            let m = r.f64s(len)?;
            let v = r.f64s(len)?;
            moments.push(Moments { name, m, v });
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let rng = RngState {
            seed,
            stream,
            word_pos,
            epoch: r.u64()?,
            batch: r.u64()?,
            step: r.u64()?,
        };
        let len = r.len()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(e.to_string()))?;
        let config = toml::from_str(text).map_err(|e| Error::Format(format!("config blob: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            version,
            params,
            optimizer: OptimizerState { step, moments },
            rng,
            config,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing {
            what: "checkpoint",
            path: path.to_path_buf(),
        },
        _ => e.into(),
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn f64s(&mut self, values: &[f64]) {
        self.0.reserve(values.len() * 8);
        for v in values {
            self.bytes(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// A u64 length that must fit in the remaining input.
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("length {v} exceeds file size")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = PromptedModel::init(1);
        let opt = OptimizerState::new(&model.named_parameters());
        let rng = ChaCha8Rng::seed_from_u64(9);
        Checkpoint::capture(&model, &opt, &TrainConfig::default(), RngState::capture(&rng, 2, 3, 4))
    }

    #[test]
    fn bytes_roundtrip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_and_truncated_files_fail() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let mut ck = sample();
        ck.params[0].name = "mystery".into();
        assert!(ck.load_into(&PromptedModel::init(0)).is_err());
    }
}
