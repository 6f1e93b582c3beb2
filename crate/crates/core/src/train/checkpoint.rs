//! Checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic    8 bytes   "ISFCKPT\0"
//! version  u32       FORMAT_VERSION
//! config   u32 len, UTF-8 `key = value` lines (the full TrainConfig)
//! weights  array list
//! state    u8 flag; when 1:
//!            u64 step, u64 epoch, f64 best validation PSNR (NaN if none),
//!            u64 Adam step count, array list of first moments,
//!            array list of second moments,
//!            32-byte RNG seed, u64 RNG stream, u128 RNG word position,
//!            u64 cursor, u32 len + len x u32 sample order
//!
//! array list: u32 count, then per array
//!   u16 name len, name, u8 dtype (0 = f32, 1 = f64), u8 ndim,
//!   ndim x u64 dims, row-major data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::FusionNet;
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};
use crate::train::adam::Adam;
use crate::train::config::TrainConfig;

pub const MAGIC: &[u8; 8] = b"ISFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub best_val_psnr: Option<f64>,
    pub adam: Adam,
    pub rng: Rng,
    /// Sample order of the current pass and the position within it.
    pub order: Vec<u32>,
    pub cursor: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<FusionNet<f32>> {
        FusionNet::from_params(self.config.model_config(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let text = self.config.to_string();
        w.extend_from_slice(&(text.len() as u32).to_le_bytes());
        w.extend_from_slice(text.as_bytes());
        write_arrays(&mut w, &self.params);
        match &self.state {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                w.extend_from_slice(&s.step.to_le_bytes());
                w.extend_from_slice(&s.epoch.to_le_bytes());
                w.extend_from_slice(&s.best_val_psnr.unwrap_or(f64::NAN).to_le_bytes());
                w.extend_from_slice(&s.adam.t.to_le_bytes());
                write_arrays(&mut w, &s.adam.m);
                write_arrays(&mut w, &s.adam.v);
                w.extend_from_slice(&s.rng.get_seed());
                w.extend_from_slice(&s.rng.get_stream().to_le_bytes());
                w.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());
                w.extend_from_slice(&(s.cursor as u64).to_le_bytes());
                w.extend_from_slice(&(s.order.len() as u32).to_le_bytes());
                for i in &s.order {
                    w.extend_from_slice(&i.to_le_bytes());
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("config echo is not UTF-8".into()))?;
        let config = TrainConfig::from_kv_text(text)?;
        let params = read_arrays(&mut r)?;
        let state = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let epoch = r.u64()?;
                let best = f64::from_le_bytes(r.array()?);
                let mut adam = Adam::new(config.learning_rate);
                adam.t = r.u64()?;
                adam.m = read_arrays(&mut r)?;
                adam.v = read_arrays(&mut r)?;
                let seed: [u8; 32] = r.array()?;
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.array()?);
                let mut rng = <Rng as rand::SeedableRng>::from_seed(seed);
                rng.set_stream(stream);
                rng.set_word_pos(word_pos);
                let cursor = r.u64()? as usize;
                let n = r.u32()? as usize;
                let order = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
                Some(TrainState {
                    step,
                    epoch,
                    best_val_psnr: (!best.is_nan()).then_some(best),
                    adam,
                    rng,
                    order,
                    cursor,
                })
            }
            f => return Err(Error::Format(format!("bad state flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            params,
            state,
        })
    }

    /// Writes through a temporary file and renames, so a failed write never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn write_arrays(w: &mut Vec<u8>, arrays: &BTreeMap<String, Tensor<f32>>) {
    w.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        w.extend_from_slice(&(name.len() as u16).to_le_bytes());
        w.extend_from_slice(name.as_bytes());
        w.push(DType::F32.tag());
        w.push(t.shape().len() as u8);
        for &d in t.shape() {
            w.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            w.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn read_arrays(r: &mut Reader) -> Result<BTreeMap<String, Tensor<f32>>> {
    let n = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_tag(r.u8()?)
            .ok_or_else(|| Error::Format(format!("array {name}: unknown dtype")))?;
        let ndim = r.u8()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = match dtype {
            DType::F32 => r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F64 => r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect(),
        };
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
