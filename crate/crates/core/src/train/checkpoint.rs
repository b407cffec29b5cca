//! Binary checkpoint: `QBCK`, a u32 version, then named f32 tensor records.
//!
//! Parameter records come first in store order, then a `meta.run_config`
//! record holding the run configuration bytes, then optimizer records named
//! `adam.step`, `adam.m.<param>` and `adam.v.<param>`. All integers and
//! floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore, Tensor};
use crate::train::optim::AdamW;

pub const MAGIC: &[u8; 4] = b"QBCK";
pub const VERSION: u32 = 1;
pub const CONFIG_RECORD: &str = "meta.run_config";
const ADAM_STEP: &str = "adam.step";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<Record>,
    pub config: String,
    pub optimizer: Vec<Record>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_record(out: &mut Vec<u8>, rec: &Record) {
    put_u32(out, rec.name.len() as u32);
    out.extend_from_slice(rec.name.as_bytes());
    put_u32(out, rec.tensor.rank() as u32);
    for &d in rec.tensor.shape() {
        put_u32(out, d as u32);
    }
    for &x in rec.tensor.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
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
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("four bytes"),
        ))
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format("oversized record".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        Ok(Record {
            name,
            tensor: Tensor::new(shape, data)?,
        })
    }
}

impl Checkpoint {
    pub fn from_model<T: Float>(
        store: &ParamStore<T>,
        config: &str,
        optimizer: Option<&AdamW<T>>,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| Record {
                name: p.name.clone(),
                tensor: p.value.cast(),
            })
            .collect();
        let mut opt = Vec::new();
        if let Some(adam) = optimizer {
            opt.push(Record {
                name: ADAM_STEP.into(),
                tensor: Tensor::scalar(adam.step as f32),
            });
            for (id, p) in store.iter() {
                let i = id.index();
                if let (Some(m), Some(v)) = (&adam.m[i], &adam.v[i]) {
                    opt.push(Record {
                        name: format!("{ADAM_M}{}", p.name),
                        tensor: m.cast(),
                    });
                    opt.push(Record {
                        name: format!("{ADAM_V}{}", p.name),
                        tensor: v.cast(),
                    });
                }
            }
        }
        Checkpoint {
            params,
            config: config.to_string(),
            optimizer: opt,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        for rec in &self.params {
            encode_record(&mut out, rec);
        }
        let cfg: Vec<f32> = self.config.bytes().map(f32::from).collect();
        let n = cfg.len();
        encode_record(
            &mut out,
            &Record {
                name: CONFIG_RECORD.into(),
                tensor: Tensor::new(vec![n], cfg).expect("vector shape"),
            },
        );
        for rec in &self.optimizer {
            encode_record(&mut out, rec);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing QBCK magic".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut params = Vec::new();
        let mut optimizer = Vec::new();
        let mut config = None;
        while r.pos < bytes.len() {
            let rec = r.record()?;
            if rec.name == CONFIG_RECORD {
                let text: Vec<u8> = rec
                    .tensor
                    .data()
                    .iter()
                    .map(|&x| {
                        if (0.0..=255.0).contains(&x) && x.fract() == 0.0 {
                            Ok(x as u8)
                        } else {
                            Err(Error::Format("config record holds a non-byte value".into()))
                        }
                    })
                    .collect::<Result<_>>()?;
                config = Some(
                    String::from_utf8(text)
                        .map_err(|_| Error::Format("config record is not UTF-8".into()))?,
                );
            } else if config.is_some() {
                optimizer.push(rec);
            } else {
                params.push(rec);
            }
        }
        Ok(Checkpoint {
            params,
            config: config.ok_or_else(|| Error::Format("missing run config record".into()))?,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Overwrites every parameter in `store` from the matching record.
    pub fn restore<T: Float>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = &store.get(id).name;
            let rec = self
                .params
                .iter()
                .find(|r| &r.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name:?}")))?;
            if rec.tensor.shape() != store.value(id).shape() {
                return Err(Error::Shape {
                    op: "checkpoint restore",
                    lhs: store.value(id).shape().to_vec(),
                    rhs: rec.tensor.shape().to_vec(),
                });
            }
            *store.value_mut(id) = rec.tensor.cast();
        }
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        Ok(())
    }

    /// Rebuilds optimizer moments for `store`.
    pub fn restore_optimizer<T: Float>(&self, store: &ParamStore<T>) -> Result<AdamW<T>> {
        let mut adam = AdamW::new(store.len());
        for rec in &self.optimizer {
            if rec.name == ADAM_STEP {
                adam.step = rec.tensor.data().first().copied().unwrap_or(0.0) as u64;
                continue;
            }
            let (slot, name) = if let Some(n) = rec.name.strip_prefix(ADAM_M) {
                (&mut adam.m, n)
            } else if let Some(n) = rec.name.strip_prefix(ADAM_V) {
                (&mut adam.v, n)
            } else {
                return Err(Error::Format(format!(
                    "unknown optimizer record {:?}",
                    rec.name
                )));
            };
            let id = store.find(name).ok_or_else(|| {
                Error::Format(format!("optimizer state for unknown parameter {name:?}"))
            })?;
            slot[id.index()] = Some(rec.tensor.cast());
        }
        Ok(adam)
    }
}
