//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "PSMODCKP" | version u32 | kind str | config str
//! | n_counters u32 | (name str, value u64)*
//! | n_tensors u32  | (name str, dtype u8, ndim u32, dims u64*, data)*
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. dtype 0 = f32, 1 = f64.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::meta_trainer::TrainState;
use crate::nn::{Adam, Module};
use crate::segnet::{SegNet, SynthesisNet};

const MAGIC: &[u8; 8] = b"PSMODCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// What the tensors describe, e.g. `"segnet"`.
    pub kind: String,
    /// Serialized configuration the run was started with.
    pub config: String,
    pub counters: BTreeMap<String, u64>,
    pub tensors: Vec<Tensor>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.counters.len() as u32).to_le_bytes());
        for (k, v) in &self.counters {
            put_str(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(match t.data {
                TensorData::F32(_) => 0,
                TensorData::F64(_) => 1,
            });
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let kind = r.str()?;
        let config = r.str()?;
        let mut counters = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            counters.insert(k, r.u64()?);
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.str()?;
            let dtype = r.u8()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let data = match dtype {
                0 => TensorData::F32(
                    r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                1 => TensorData::F64(
                    r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                d => return Err(Error::Checkpoint(format!("{name}: unknown dtype {d}"))),
            };
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            kind,
            config,
            counters,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing counter {name}")))
    }

    fn tensors_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Tensor> + 'a {
        self.tensors.iter().filter(move |t| t.name.starts_with(prefix))
    }
}

/// Parameters of `module` as `{prefix}{param name}` tensors.
pub fn module_tensors<M: Module<f32> + ?Sized>(module: &M, prefix: &str) -> Vec<Tensor> {
    let mut out = Vec::new();
    module.visit_params(&mut |p| {
        out.push(Tensor {
            name: format!("{prefix}{}", p.name),
            shape: p.shape.clone(),
            data: TensorData::F32(p.value.clone()),
        })
    });
    out
}

/// Loads the `{prefix}*` tensors into `module`; names, order and shapes must match exactly.
pub fn load_module<M: Module<f32> + ?Sized>(module: &mut M, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    let stored: Vec<&Tensor> = ckpt.tensors_with_prefix(prefix).collect();
    let mut expected = 0usize;
    module.visit_params(&mut |_| expected += 1);
    if stored.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{prefix}: {} stored tensors, model has {expected} parameters",
            stored.len()
        )));
    }
    let mut idx = 0;
    let mut err = None;
    module.visit_params_mut(&mut |p| {
        let t = stored[idx];
        idx += 1;
        if err.is_some() {
            return;
        }
        if t.name != format!("{prefix}{}", p.name) || t.shape != p.shape {
            err = Some(Error::Checkpoint(format!(
                "tensor {} {:?} does not match parameter {} {:?}",
                t.name, t.shape, p.name, p.shape
            )));
            return;
        }
        match &t.data {
            TensorData::F32(v) if v.len() == p.value.len() => p.value.copy_from_slice(v),
            _ => err = Some(Error::Checkpoint(format!("{}: wrong dtype or length", t.name))),
        }
    });
    err.map_or(Ok(()), Err)
}

fn adam_tensors(opt: &Adam, names: &[String], prefix: &str) -> Vec<Tensor> {
    let (m, v) = opt.moments();
    let mut out = Vec::new();
    for (which, bufs) in [("m", m), ("v", v)] {
        for (buf, name) in bufs.iter().zip(names) {
            out.push(Tensor {
                name: format!("{prefix}{which}/{name}"),
                shape: vec![buf.len()],
                data: TensorData::F64(buf.clone()),
            });
        }
    }
    out
}

fn load_adam(ckpt: &Checkpoint, prefix: &str, names: &[String], step: u64) -> Result<Adam> {
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (which, dst) in [("m", &mut m), ("v", &mut v)] {
        let tag = format!("{prefix}{which}/");
        let bufs: Vec<&Tensor> = ckpt.tensors_with_prefix(&tag).collect();
        if !bufs.is_empty() && bufs.len() != names.len() {
            return Err(Error::Checkpoint(format!("{prefix}{which}: wrong buffer count")));
        }
        for (t, name) in bufs.iter().zip(names) {
            if t.name != format!("{prefix}{which}/{name}") {
                return Err(Error::Checkpoint(format!("unexpected optimizer tensor {}", t.name)));
            }
            match &t.data {
                TensorData::F64(d) => dst.push(d.clone()),
                TensorData::F32(_) => return Err(Error::Checkpoint(format!("{}: expected f64", t.name))),
            }
        }
    }
    if m.len() != v.len() {
        return Err(Error::Checkpoint(format!("{prefix}: moment buffers disagree")));
    }
    Ok(Adam::from_moments(step, m, v))
}

fn param_names<M: Module<f32> + ?Sized>(module: &M) -> Vec<String> {
    let mut names = Vec::new();
    module.visit_params(&mut |p| names.push(p.name.clone()));
    names
}

/// Full training state: network, both optimizer states and counters.
pub fn train_state_checkpoint(state: &TrainState, config: &str) -> Checkpoint {
    let names = param_names(&state.net);
    let mut tensors = module_tensors(&state.net, "net/");
    tensors.extend(adam_tensors(&state.opt_train, &names, "opt_train/"));
    tensors.extend(adam_tensors(&state.opt_test, &names, "opt_test/"));
    let counters = BTreeMap::from([
        ("next_epoch".to_string(), state.next_epoch as u64),
        ("step".to_string(), state.step),
        ("version".to_string(), state.version),
        ("opt_train.step".to_string(), state.opt_train.step),
        ("opt_test.step".to_string(), state.opt_test.step),
    ]);
    Checkpoint {
        kind: "segnet-train".into(),
        config: config.into(),
        counters,
        tensors,
    }
}

/// Restores a [`TrainState`] into `net` (which fixes the architecture).
pub fn restore_train_state(ckpt: &Checkpoint, mut net: SegNet<f32>) -> Result<TrainState> {
    if ckpt.kind != "segnet-train" {
        return Err(Error::Checkpoint(format!("expected a training checkpoint, found {}", ckpt.kind)));
    }
    load_module(&mut net, ckpt, "net/")?;
    let names = param_names(&net);
    Ok(TrainState {
        opt_train: load_adam(ckpt, "opt_train/", &names, ckpt.counter("opt_train.step")?)?,
        opt_test: load_adam(ckpt, "opt_test/", &names, ckpt.counter("opt_test.step")?)?,
        next_epoch: ckpt.counter("next_epoch")? as usize,
        step: ckpt.counter("step")?,
        version: ckpt.counter("version")?,
        net,
    })
}

/// Weights-only checkpoint of a segmentation network.
pub fn segnet_checkpoint(net: &SegNet<f32>, config: &str) -> Checkpoint {
    Checkpoint {
        kind: "segnet".into(),
        config: config.into(),
        counters: BTreeMap::new(),
        tensors: module_tensors(net, "net/"),
    }
}

/// Loads network weights from either a weights-only or a training checkpoint.
pub fn load_segnet(ckpt: &Checkpoint, mut net: SegNet<f32>) -> Result<SegNet<f32>> {
    if ckpt.kind != "segnet" && ckpt.kind != "segnet-train" {
        return Err(Error::Checkpoint(format!("expected a segmentation checkpoint, found {}", ckpt.kind)));
    }
    load_module(&mut net, ckpt, "net/")?;
    Ok(net)
}

pub fn synthesis_checkpoint(net: &SynthesisNet<f32>, config: &str, seed: u64) -> Checkpoint {
    Checkpoint {
        kind: "synthesis".into(),
        config: config.into(),
        counters: BTreeMap::from([("seed".to_string(), seed)]),
        tensors: module_tensors(net, "net/"),
    }
}

pub fn load_synthesis(ckpt: &Checkpoint, mut net: SynthesisNet<f32>) -> Result<SynthesisNet<f32>> {
    if ckpt.kind != "synthesis" {
        return Err(Error::Checkpoint(format!("expected a synthesis checkpoint, found {}", ckpt.kind)));
    }
    load_module(&mut net, ckpt, "net/")?;
    Ok(net)
}
