use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor held by a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a stored tensor participates in training.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Dense weight matrix or kernel; receives the L2 penalty.
    Weight,
    Bias,
    Embedding,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    fn tag(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Embedding => 2,
            ParamKind::Buffer => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::Embedding,
            3 => ParamKind::Buffer,
            other => return Err(Error::Checkpoint(format!("unknown parameter kind tag {other}"))),
        })
    }

    pub fn is_trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    kind: ParamKind,
    value: Tensor,
}

/// Named, ordered collection of model tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.id_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                lhs: slot.shape(),
                rhs: value.shape(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar values across trainable tensors.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.is_trainable())
            .map(|e| e.value.len())
            .sum()
    }

    /// Concatenates every trainable tensor into one flat vector, in store order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for e in self.entries.iter().filter(|e| e.kind.is_trainable()) {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    /// Inverse of [`ParamStore::flatten_trainable`].
    pub fn assign_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_len() {
            return Err(Error::InvalidArgument {
                op: "assign_trainable",
                reason: format!("expected {} values, got {}", self.trainable_len(), flat.len()),
            });
        }
        let mut offset = 0;
        for e in self.entries.iter_mut().filter(|e| e.kind.is_trainable()) {
            let n = e.value.len();
            e.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Flattens `grads` in the same order as [`ParamStore::flatten_trainable`];
    /// parameters without a gradient contribute zeros.
    pub fn flatten_gradients(&self, grads: &BTreeMap<ParamId, Tensor>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for (i, e) in self.entries.iter().enumerate() {
            if !e.kind.is_trainable() {
                continue;
            }
            match grads.get(&ParamId(i)) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, e.value.len())),
            }
        }
        out
    }

    /// Writes the store as a checkpoint archive.
    ///
    /// Layout, all integers little-endian:
    ///
    /// ```text
    /// magic      8 bytes  "FATRECK1"
    /// manifest   u32 byte length, then UTF-8 `key=value` lines (sorted by key)
    /// count      u32 number of tensors
    /// per tensor u32 name length, UTF-8 name, u8 kind tag,
    ///            u32 rank (always 2), u64 rows, u64 cols,
    ///            rows*cols f64 values (row-major)
    /// ```
    pub fn write_archive<W: Write>(&self, mut w: W, manifest: &BTreeMap<String, String>) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let mut text = String::new();
        for (k, v) in manifest {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("manifest entry {k:?} is not encodable")));
            }
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.kind.tag()])?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(e.value.rows() as u64).to_le_bytes())?;
            w.write_all(&(e.value.cols() as u64).to_le_bytes())?;
            for v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads an archive written by [`ParamStore::write_archive`].
    pub fn read_archive<R: Read>(mut r: R) -> Result<(ParamStore, BTreeMap<String, String>)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let manifest_len = read_u32(&mut r)? as usize;
        let text = read_string(&mut r, manifest_len)?;
        let mut manifest = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed manifest line {line:?}")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, name_len)?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let kind = ParamKind::from_tag(tag[0])?;
            let rank = read_u32(&mut r)?;
            if rank != 2 {
                return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}")));
            }
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = vec![0.0; rows * cols];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            store.add(name, kind, Tensor::from_vec(rows, cols, data)?);
        }
        Ok((store, manifest))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FATRECK1";

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}
