//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `R2MF`, `u32` version, `u32`-length-prefixed model config
//! text, `u32` tensor count and per tensor a `u32`-length-prefixed name, four
//! `u32` dims and `f32` data; then a `u8` optimizer flag followed (when set)
//! by the step count and per-tensor first and second moments; finally the
//! `u32` epoch count and per epoch `u32` epoch, `f64` train loss, `f64` val
//! loss and `f64` learning rate.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Dims, Real};
use crate::trainer::EpochRecord;

pub const MAGIC: &[u8; 4] = b"R2MF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Dims,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>, adam: Option<&AdamState<T>>, history: &[EpochRecord]) -> Self {
        let to_f32 = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
        Self {
            config: model.config.clone(),
            tensors: model
                .store
                .iter()
                .map(|(_, p)| NamedTensor { name: p.name.clone(), dims: p.tensor.dims(), data: to_f32(p.tensor.data()) })
                .collect(),
            optimizer: adam.map(|a| OptimizerSnapshot {
                step: a.step,
                m: a.m.iter().map(|x| to_f32(x)).collect(),
                v: a.v.iter().map(|x| to_f32(x)).collect(),
            }),
            history: history.to_vec(),
        }
    }

    /// Rebuilds the model from the embedded config and copies every tensor
    /// in, checking names and dims.
    pub fn to_model<T: Real>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::build(&self.config)?;
        if model.store.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, config implies {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for t in &self.tensors {
            let id = model
                .store
                .id_of(&t.name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor `{}`", t.name)))?;
            let param = model.store.get_mut(id);
            if param.tensor.dims() != t.dims {
                return Err(Error::Format(format!(
                    "tensor `{}` has dims {}, config implies {}",
                    t.name,
                    t.dims,
                    param.tensor.dims()
                )));
            }
            for (dst, &src) in param.tensor.data_mut().iter_mut().zip(&t.data) {
                *dst = T::lit(src as f64);
            }
        }
        Ok(model)
    }

    pub fn adam_state<T: Real>(&self, model: &Model<T>) -> Result<Option<AdamState<T>>> {
        let Some(snap) = &self.optimizer else { return Ok(None) };
        let mut state = AdamState::new(&model.store, AdamConfig::default());
        if state.m.len() != snap.m.len() || snap.m.len() != snap.v.len() {
            return Err(Error::Format("optimizer state does not match the parameters".into()));
        }
        for (k, (m, v)) in snap.m.iter().zip(&snap.v).enumerate() {
            if m.len() != state.m[k].len() || v.len() != state.v[k].len() {
                return Err(Error::Format("optimizer moment length mismatch".into()));
            }
            state.m[k] = m.iter().map(|&x| T::lit(x as f64)).collect();
            state.v[k] = v.iter().map(|&x| T::lit(x as f64)).collect();
        }
        state.step = snap.step;
        Ok(Some(state))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.config.to_text().as_bytes());
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_bytes(&mut out, t.name.as_bytes());
            for d in t.dims.as_array() {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, &t.data);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                put_u32(&mut out, o.m.len());
                for (m, v) in o.m.iter().zip(&o.v) {
                    put_u32(&mut out, m.len());
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        put_u32(&mut out, self.history.len());
        for h in &self.history {
            out.extend_from_slice(&h.epoch.to_le_bytes());
            for x in [h.train_loss, h.val_loss, h.lr] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let text = String::from_utf8(r.bytes_prefixed()?.to_vec())
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let config = ModelConfig::from_text(&text).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = String::from_utf8(r.bytes_prefixed()?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dims = Dims::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let data = r.f32s(dims.numel())?;
            tensors.push(NamedTensor { name, dims, data });
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let n = r.u32()? as usize;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for _ in 0..n {
                    let len = r.u32()? as usize;
                    m.push(r.f32s(len)?);
                    v.push(r.f32s(len)?);
                }
                Some(OptimizerSnapshot { step, m, v })
            }
            other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
        };
        let epochs = r.u32()? as usize;
        let mut history = Vec::with_capacity(epochs.min(1 << 16));
        for _ in 0..epochs {
            let epoch = r.u32()?;
            let train_loss = r.f64()?;
            let val_loss = r.f64()?;
            let lr = r.f64()?;
            history.push(EpochRecord { epoch, train_loss, val_loss, lr });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        let ckpt = Self { config, tensors, optimizer, history };
        // Validate names and dims against the config before handing it out.
        ckpt.to_model::<f32>()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes_prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
