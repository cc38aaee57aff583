//! Named parameter storage and its on-disk format.
//!
//! File layout: an 8-byte little-endian `u64` header length, a UTF-8 JSON
//! header, then every tensor's values as little-endian `f64` in the order
//! given by their offsets. The header maps each parameter name to its
//! element offset, shape and trainability:
//!
//! ```json
//! {"format":"normlab.params.v1","count":1234,
//!  "tensors":{"embed.tok":{"offset":0,"shape":[11,8],"trainable":true}, ...}}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, NodeId, Tape, Tensor};

const FORMAT_TAG: &str = "normlab.params.v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen entries still receive gradients but are skipped by optimisers.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: Arc<HashMap<String, usize>>,
}

/// Tape nodes for every parameter of a [`ParamSet`], in set order.
#[derive(Debug, Clone)]
pub struct Bindings {
    ids: Vec<NodeId>,
    index: Arc<HashMap<String, usize>>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::Contract(format!("no parameter named {name:?}")))
    }

    pub fn try_get(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).map(|&i| self.ids[i])
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.insert_with(name.into(), value, true)
    }

    /// Adds a frozen entry (not touched by the optimiser).
    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.insert_with(name.into(), value, false)
    }

    fn insert_with(&mut self, name: String, value: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        Arc::make_mut(&mut self.index).insert(name.clone(), self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name:?}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let ids = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        Bindings {
            ids,
            index: Arc::clone(&self.index),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the adjoints of the bound leaves into `grad`. Calling this for
    /// several backward sweeps accumulates.
    pub fn accumulate_grads(&mut self, bindings: &Bindings, grads: &Gradients) -> Result<()> {
        if bindings.ids.len() != self.params.len() {
            return Err(Error::Contract("bindings do not belong to this parameter set".into()));
        }
        for (p, id) in self.params.iter_mut().zip(&bindings.ids) {
            if let Some(g) = grads.get(*id) {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.data().iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::shape("set_flat_values", &[self.num_values()], &[flat.len()]));
        }
        let mut at = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Global ℓ₂ norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        let mut offset = 0;
        for p in &self.params {
            tensors.insert(
                p.name.clone(),
                HeaderEntry {
                    offset,
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                },
            );
            offset += p.value.numel();
        }
        let header = Header {
            format: FORMAT_TAG.to_string(),
            count: offset,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset * 8);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Format("file shorter than the header length prefix".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let body_start = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&bytes[8..body_start])?;
        if header.format != FORMAT_TAG {
            return Err(Error::Format(format!("unknown format tag {:?}", header.format)));
        }
        let body = &bytes[body_start..];
        if body.len() != header.count * 8 {
            return Err(Error::Format(format!(
                "expected {} values, found {} bytes",
                header.count,
                body.len()
            )));
        }
        let mut entries: Vec<(String, HeaderEntry)> = header.tensors.into_iter().collect();
        entries.sort_by_key(|(_, e)| e.offset);
        let mut set = ParamSet::new();
        let mut expected = 0;
        for (name, e) in entries {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > header.count {
                return Err(Error::Format(format!("tensor {name:?} has a bad offset")));
            }
            let data = body[e.offset * 8..(e.offset + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            set.insert_with(name, Tensor::new(e.shape, data)?, e.trainable)?;
            expected += n;
        }
        if expected != header.count {
            return Err(Error::Format("tensors do not cover the value block".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    count: usize,
    tensors: BTreeMap<String, HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    offset: usize,
    shape: Vec<usize>,
    trainable: bool,
}
