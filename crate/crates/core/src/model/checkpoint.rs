use std::collections::BTreeMap;
use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::{AdamState, History, LossRecord, TrainConfig};
use crate::wire::{Reader, WriteLe};

use super::{Mocae, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MOCAE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_STEP: &str = "adam.t";
const HISTORY_INITIAL: &str = "history.initial";
const HISTORY_TRAIN: &str = "history.train";
const HISTORY_VALIDATION: &str = "history.validation";

/// A model together with the optimizer state and loss history that
/// produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Mocae<T>,
    pub train_config: Option<TrainConfig>,
    pub optimizer: Option<AdamState<T>>,
    pub history: History,
}

/// A checkpoint of either precision, as found on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

enum Raw {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Raw {
    fn dtype(&self) -> DType {
        match self {
            Raw::F32(_) => DType::F32,
            Raw::F64(_) => DType::F64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Raw::F32(t) => t.shape(),
            Raw::F64(t) => t.shape(),
        }
    }

    fn into_f64(self) -> Tensor<f64> {
        match self {
            Raw::F32(t) => t.cast(),
            Raw::F64(t) => t,
        }
    }

    fn into_typed<T: Scalar>(self, name: &str) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::invalid(format!(
                "tensor {name}: stored as {} but the model uses {}",
                self.dtype().name(),
                T::DTYPE.name()
            )));
        }
        Ok(match self {
            Raw::F32(t) => t.cast(),
            Raw::F64(t) => t.cast(),
        })
    }
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.put_str(name);
    out.put_u8(T::DTYPE.tag());
    out.put_u32(t.rank() as u32);
    for &e in t.shape() {
        out.put_u64(e as u64);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_values<T: Scalar>(r: &mut Reader<'_>, shape: &[usize], name: &str) -> Result<Tensor<T>> {
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| r.error(format!("tensor {name}: extent overflow")))?;
    let size = T::DTYPE.size();
    let bytes = r.take(
        len.checked_mul(size)
            .ok_or_else(|| r.error(format!("tensor {name}: extent overflow")))?,
        name,
    )?;
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

fn read_tensor(r: &mut Reader<'_>) -> Result<(String, Raw)> {
    let name = r.string("tensor name")?;
    let at = r.offset();
    let tag = r.u8("dtype tag")?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Parse {
        offset: at,
        message: format!("tensor {name}: unknown dtype tag {tag}"),
    })?;
    let rank = r.count_u32("rank", 8)?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = r.offset();
        let e = r.u64("extent")?;
        if e == 0 || e > usize::MAX as u64 {
            return Err(Error::Parse {
                offset: at,
                message: format!("tensor {name}: invalid extent {e}"),
            });
        }
        shape.push(e as usize);
    }
    let raw = match dtype {
        DType::F32 => Raw::F32(read_values(r, &shape, &name)?),
        DType::F64 => Raw::F64(read_values(r, &shape, &name)?),
    };
    Ok((name, raw))
}

fn records_to_tensor(records: &[LossRecord]) -> Tensor<f64> {
    let data = records
        .iter()
        .flat_map(|r| [r.recon, r.class, r.total])
        .collect();
    Tensor::new(&[records.len(), 3], data).expect("non-empty history")
}

fn tensor_to_records(name: &str, t: Tensor<f64>) -> Result<Vec<LossRecord>> {
    match *t.shape() {
        [_, 3] | [3] => Ok(t
            .data()
            .chunks_exact(3)
            .map(|c| LossRecord {
                recon: c[0],
                class: c[1],
                total: c[2],
            })
            .collect()),
        _ => Err(Error::invalid(format!(
            "{name}: expected [E, 3], found {:?}",
            t.shape()
        ))),
    }
}

fn config_precision(kv: &KvConfig) -> Result<DType> {
    kv.get_or("model.precision", DType::F32)
}

/// Reads the header and configuration block and returns them with the
/// reader positioned at the first tensor record.
fn read_header(bytes: &[u8]) -> Result<(KvConfig, Reader<'_>)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC, "checkpoint")?;
    r.version(CHECKPOINT_VERSION)?;
    let text = r.string("config block")?;
    Ok((KvConfig::parse(&text)?, r))
}

impl<T: Scalar> Checkpoint<T> {
    /// A freshly built model with no training state.
    pub fn new(model: Mocae<T>) -> Self {
        Checkpoint {
            model,
            train_config: None,
            optimizer: None,
            history: History::default(),
        }
    }

    /// The configuration block: every `model.*` key and, if present,
    /// every `train.*` key.
    pub fn config_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        let mut mc = self.model.config().clone();
        mc.precision = T::DTYPE;
        mc.to_kv(&mut kv);
        if let Some(tc) = &self.train_config {
            tc.to_kv(&mut kv);
        }
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.put_u32(CHECKPOINT_VERSION);
        out.put_str(&self.config_kv().to_text());

        let store = self.model.params();
        let mut count = store.len();
        if let Some(opt) = &self.optimizer {
            count += 1 + opt.m.len() + opt.v.len();
        }
        let h = &self.history;
        count += usize::from(h.initial.is_some())
            + usize::from(!h.train.is_empty())
            + usize::from(!h.validation.is_empty());
        out.put_u32(count as u32);

        for (_, p) in store.iter() {
            put_tensor(&mut out, &p.name, &p.value);
        }
        if let Some(opt) = &self.optimizer {
            put_tensor(&mut out, ADAM_STEP, &Tensor::<f64>::scalar(opt.step as f64));
            for ((_, p), m) in store.iter().zip(&opt.m) {
                put_tensor(&mut out, &format!("adam.m.{}", p.name), m);
            }
            for ((_, p), v) in store.iter().zip(&opt.v) {
                put_tensor(&mut out, &format!("adam.v.{}", p.name), v);
            }
        }
        if let Some(r) = &h.initial {
            put_tensor(&mut out, HISTORY_INITIAL, &records_to_tensor(std::slice::from_ref(r)).reshape(&[3]).expect("3 values"));
        }
        if !h.train.is_empty() {
            put_tensor(&mut out, HISTORY_TRAIN, &records_to_tensor(&h.train));
        }
        if !h.validation.is_empty() {
            put_tensor(&mut out, HISTORY_VALIDATION, &records_to_tensor(&h.validation));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (kv, mut r) = read_header(bytes)?;
        let precision = config_precision(&kv)?;
        if precision != T::DTYPE {
            return Err(Error::invalid(format!(
                "checkpoint precision is {} but {} was requested",
                precision.name(),
                T::DTYPE.name()
            )));
        }
        let model_config = ModelConfig::from_kv(&kv)?;
        let train_config = if kv.iter().any(|(k, _)| k.starts_with("train.")) {
            Some(TrainConfig::from_kv(&kv)?)
        } else {
            None
        };

        let n = r.count_u32("tensor count", 14)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let at = r.offset();
            let (name, raw) = read_tensor(&mut r)?;
            if tensors.insert(name.clone(), raw).is_some() {
                return Err(Error::Parse {
                    offset: at,
                    message: format!("duplicate tensor {name}"),
                });
            }
        }
        r.finish()?;

        let mut model = Mocae::<T>::build(&model_config)?;
        let ids: Vec<_> = model.params().iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in &ids {
            let raw = tensors
                .remove(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing tensor {name}")))?;
            model.params_mut().set(*id, raw.into_typed(name)?)?;
        }

        let optimizer = match tensors.remove(ADAM_STEP) {
            None => None,
            Some(step) => {
                let step = step.into_f64();
                let step = step.item().ok_or_else(|| {
                    Error::invalid(format!("{ADAM_STEP}: expected one value, found {:?}", step.shape()))
                })?;
                let mut moment = |prefix: &str| -> Result<Vec<Tensor<T>>> {
                    ids.iter()
                        .map(|(id, name)| {
                            let key = format!("{prefix}.{name}");
                            let raw = tensors
                                .remove(&key)
                                .ok_or_else(|| Error::invalid(format!("checkpoint is missing tensor {key}")))?;
                            let want = model.params().get(*id).shape();
                            if raw.shape() != want {
                                return Err(Error::shape("checkpoint", raw.shape(), want));
                            }
                            raw.into_typed(&key)
                        })
                        .collect()
                };
                let m = moment("adam.m")?;
                let v = moment("adam.v")?;
                Some(AdamState {
                    step: step as u64,
                    m,
                    v,
                })
            }
        };

        let mut history = History::default();
        if let Some(t) = tensors.remove(HISTORY_INITIAL) {
            history.initial = tensor_to_records(HISTORY_INITIAL, t.into_f64())?.pop();
        }
        if let Some(t) = tensors.remove(HISTORY_TRAIN) {
            history.train = tensor_to_records(HISTORY_TRAIN, t.into_f64())?;
        }
        if let Some(t) = tensors.remove(HISTORY_VALIDATION) {
            history.validation = tensor_to_records(HISTORY_VALIDATION, t.into_f64())?;
        }
        if let Some(name) = tensors.keys().next() {
            return Err(Error::invalid(format!("checkpoint has unexpected tensor {name}")));
        }
        Ok(Checkpoint {
            model,
            train_config,
            optimizer,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl AnyCheckpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (kv, _) = read_header(bytes)?;
        match config_precision(&kv)? {
            DType::F32 => Ok(AnyCheckpoint::F32(Checkpoint::from_bytes(bytes)?)),
            DType::F64 => Ok(AnyCheckpoint::F64(Checkpoint::from_bytes(bytes)?)),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn precision(&self) -> DType {
        match self {
            AnyCheckpoint::F32(_) => DType::F32,
            AnyCheckpoint::F64(_) => DType::F64,
        }
    }

    pub fn model_config(&self) -> &ModelConfig {
        match self {
            AnyCheckpoint::F32(c) => c.model.config(),
            AnyCheckpoint::F64(c) => c.model.config(),
        }
    }

    pub fn history(&self) -> &History {
        match self {
            AnyCheckpoint::F32(c) => &c.history,
            AnyCheckpoint::F64(c) => &c.history,
        }
    }
}
