//! Named learnable parameters and the LIPC checkpoint container.
//!
//! LIPC layout: magic `LIPC`, u32 version = 1, u16 entry count, then per
//! entry a u16 name length, the UTF-8 name, and a full LIPT tensor blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

pub const LIPC_MAGIC: &[u8; 4] = b"LIPC";
pub const LIPC_VERSION: u32 = 1;

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    items: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter {name:?}")));
        }
        let grad = Tensor::zeros(value.dims());
        self.index.insert(name.to_string(), self.items.len());
        self.items.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index_of(name).map(|i| &self.items[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        let i = self.index_of(name)?;
        Some(&mut self.items[i])
    }

    pub fn at(&self, idx: usize) -> &Parameter {
        &self.items[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.items[idx]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.items.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.items.iter().map(|p| p.name.clone()).collect()
    }

    /// Total scalar count over all parameter values.
    pub fn total_scalars(&self) -> usize {
        self.items.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad = Tensor::zeros(p.value.dims());
        }
    }

    /// Replace values from named tensors; the name sets must match exactly.
    pub fn load_values(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut seen: BTreeMap<&str, &Tensor> = BTreeMap::new();
        for (name, t) in entries {
            seen.insert(name.as_str(), t);
        }
        let missing: Vec<String> = self
            .items
            .iter()
            .filter(|p| !seen.contains_key(p.name.as_str()))
            .map(|p| p.name.clone())
            .collect();
        let unexpected: Vec<String> = seen
            .keys()
            .filter(|n| !self.index.contains_key(**n))
            .map(|n| n.to_string())
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::ParamMismatch {
                missing,
                unexpected,
            });
        }
        for p in &mut self.items {
            let t = seen[p.name.as_str()];
            if t.dims() != p.value.dims() {
                return Err(Error::shape(
                    "load_values",
                    format!(
                        "{}: expected dims {:?}, file has {:?}",
                        p.name,
                        p.value.dims(),
                        t.dims()
                    ),
                ));
            }
            p.value = t.clone();
            p.grad = Tensor::zeros(t.dims());
        }
        Ok(())
    }
}

/// Serialize named tensors into a LIPC checkpoint file.
pub fn write_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    if entries.len() > u16::MAX as usize {
        return Err(Error::Argument("too many checkpoint entries".into()));
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(LIPC_MAGIC);
    bytes.extend_from_slice(&LIPC_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Argument(format!("parameter name too long: {name}")));
        }
        bytes.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        bytes.extend_from_slice(nb);
        bytes.extend_from_slice(&io::encode_tensor(t));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read back all named tensors from a LIPC checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = io::read_bytes(path)?;
    let mut r = io::ByteReader::new(&bytes, path);
    if r.take(4)? != LIPC_MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != LIPC_VERSION {
        return Err(r.corrupt(format!("unsupported version {version}")));
    }
    let count = r.u16()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.corrupt("name is not utf-8"))?
            .to_string();
        entries.push((name, io::decode_tensor_from(&mut r)?));
    }
    if !r.is_empty() {
        return Err(r.corrupt("trailing bytes"));
    }
    Ok(entries)
}
