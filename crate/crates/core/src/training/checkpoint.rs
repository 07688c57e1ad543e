//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LFCK" | version u32 | config length u32 | config UTF-8
//! | tensor count u32 | tensors
//! | optimizer flag u8 | [tensor count u32 | tensors]
//! tensor = name length u16 | name UTF-8 | rank u8 | dims u64 each | f64 payload
//! ```
//!
//! The optimizer section holds the Adam moments as `m.<name>` and `v.<name>`
//! plus `meta.*` scalars for the step counter, hyperparameters, epoch and
//! best validation metric.

use std::path::Path;

use thiserror::Error;

use super::{AdamConfig, AdamState};
use crate::numeric::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"LFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Text of the run configuration.
    pub config: String,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    /// Epochs completed when the checkpoint was taken.
    pub epoch: usize,
    pub best_metric: Option<f64>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_section<'a>(
    out: &mut Vec<u8>,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_tensor(out, name, t);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.buf.len(),
                what,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize, what: &'static str) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let len = self.u16("tensor name length")? as usize;
        let name = self.text(len, "tensor name")?;
        let rank = self.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = self.u64("tensor dims")?;
            shape.push(
                usize::try_from(d)
                    .map_err(|_| CheckpointError::Malformed(format!("{name}: dim {d}")))?,
            );
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflows")))?;
        let bytes = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: too large")))?,
            "tensor payload",
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        Ok((name, t))
    }

    fn section(&mut self) -> Result<ParamStore, CheckpointError> {
        let n = self.u32("tensor count")?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let (name, t) = self.tensor()?;
            if store.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!(
                    "duplicate tensor {name}"
                )));
            }
        }
        Ok(store)
    }
}

fn meta(store: &ParamStore, name: &str) -> Result<f64, CheckpointError> {
    store
        .get(name)
        .filter(|t| t.len() == 1)
        .map(|t| t.data()[0])
        .ok_or_else(|| CheckpointError::Malformed(format!("optimizer section lacks {name}")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        put_section(&mut out, self.params.iter().collect::<Vec<_>>().into_iter());
        let mut extra = ParamStore::new();
        extra.insert("meta.epoch", Tensor::scalar(self.epoch as f64));
        if let Some(b) = self.best_metric {
            extra.insert("meta.best_metric", Tensor::scalar(b));
        }
        if let Some(opt) = &self.optimizer {
            let c = &opt.config;
            extra.insert("meta.step", Tensor::scalar(opt.step as f64));
            extra.insert(
                "meta.adam",
                Tensor::vector(&[c.lr, c.beta1, c.beta2, c.eps]),
            );
            for (name, t) in opt.m.iter() {
                extra.insert(format!("m.{name}"), t.clone());
            }
            for (name, t) in opt.v.iter() {
                extra.insert(format!("v.{name}"), t.clone());
            }
        }
        out.push(1);
        put_section(&mut out, extra.iter().collect::<Vec<_>>().into_iter());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = r.u32("config length")? as usize;
        let config = r.text(len, "config")?;
        let params = r.section()?;
        let mut ckpt = Checkpoint {
            config,
            params,
            optimizer: None,
            epoch: 0,
            best_metric: None,
        };
        match r.u8("optimizer flag")? {
            0 => {}
            1 => {
                let extra = r.section()?;
                ckpt.epoch = meta(&extra, "meta.epoch")? as usize;
                ckpt.best_metric = extra.get("meta.best_metric").map(|t| t.data()[0]);
                if extra.contains("meta.step") {
                    let adam = extra
                        .get("meta.adam")
                        .filter(|t| t.len() == 4)
                        .ok_or_else(|| {
                            CheckpointError::Malformed("optimizer section lacks meta.adam".into())
                        })?
                        .data();
                    let mut m = ParamStore::new();
                    let mut v = ParamStore::new();
                    for (name, t) in extra.iter() {
                        if let Some(n) = name.strip_prefix("m.") {
                            m.insert(n, t.clone());
                        } else if let Some(n) = name.strip_prefix("v.") {
                            v.insert(n, t.clone());
                        }
                    }
                    ckpt.optimizer = Some(AdamState {
                        m,
                        v,
                        step: meta(&extra, "meta.step")? as u64,
                        config: AdamConfig {
                            lr: adam[0],
                            beta1: adam[1],
                            beta2: adam[2],
                            eps: adam[3],
                        },
                    });
                }
            }
            f => return Err(CheckpointError::Malformed(format!("optimizer flag {f}"))),
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::Error::io(path, e))
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}
