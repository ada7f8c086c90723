use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CASSNAT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copy every grad in `grads` into the matching tensor's `grad` slot.
    pub fn accumulate(&mut self, grads: &Grads) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                match &mut t.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => t.grad = Some(g.clone()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Overwrite values of every parameter whose name exists in `source` and
    /// starts with one of `prefixes`. Returns the number copied.
    pub fn load_matching(&mut self, source: &ParamStore, prefixes: &[&str]) -> Result<usize> {
        let mut copied = 0;
        for (name, src) in source.iter() {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let Some(id) = self.id(name) else { continue };
            let dst = &mut self.tensors[id.0];
            if dst.shape() != src.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: checkpoint {:?} vs model {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
            copied += 1;
        }
        Ok(copied)
    }

    /// Replace all values from a store with identical names and shapes.
    pub fn load_all(&mut self, source: &ParamStore) -> Result<()> {
        for name in &self.names {
            if source.id(name).is_none() {
                return Err(Error::MissingParam(name.clone()));
            }
        }
        self.load_matching(source, &[""])?;
        Ok(())
    }

    /// Parameter-wise arithmetic mean.
    pub fn average(stores: &[ParamStore]) -> Result<ParamStore> {
        let first = stores
            .first()
            .ok_or_else(|| Error::Config("nothing to average".into()))?;
        let mut out = first.clone();
        out.zero_grads();
        let k = stores.len() as f64;
        for (i, (name, t)) in first.iter().enumerate() {
            let mut acc = vec![0.0; t.len()];
            for s in stores {
                let id = s.id(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
                let src = s.get(id);
                if src.shape() != t.shape() {
                    return Err(Error::Shape(format!("averaging `{name}`")));
                }
                acc.iter_mut().zip(src.data()).for_each(|(a, b)| *a += b);
            }
            // identical inputs must average to themselves bit-exactly
            let all_same = stores.iter().all(|s| s.get(s.id(name).unwrap()).data() == t.data());
            let dst = out.tensors[i].data_mut();
            if all_same {
                dst.copy_from_slice(t.data());
            } else {
                dst.iter_mut().zip(acc).for_each(|(d, a)| *d = a / k);
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(r.corrupt(0, "bad magic"));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.corrupt(at, "name is not utf-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.id(&name).is_some() {
                return Err(r.corrupt(at, "duplicate parameter name"));
            }
            store.add(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(r.pos as u64, "trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn corrupt(&self, offset: u64, reason: &str) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt(self.pos as u64, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Gradients produced by one backward pass, indexed like the store.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(n_params: usize) -> Self {
        Self {
            slots: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn add_to(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            let Some(src) = src else { continue };
            match dst {
                Some(acc) => acc.iter_mut().zip(src).for_each(|(a, b)| *a += scale * b),
                None => *dst = Some(src.iter().map(|b| scale * b).collect()),
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// First parameter with a non-finite gradient entry.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.slots
            .iter()
            .position(|g| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}
