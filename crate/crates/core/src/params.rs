//! Named parameter storage and its on-disk format.
//!
//! The binary layout is a text manifest followed by a raw blob:
//!
//! ```text
//! CRFD1
//! <name> f64 <dim> <dim> ... <byte offset>     (one line per tensor, sorted by name)
//! end <blob length in bytes>
//! <little-endian f64 blob>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"CRFD1\n";

/// Name → tensor map iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::invalid("param store", format!("bad parameter name {name:?}")));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::invalid("param store", format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    /// Replace the value of an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(
                "param store",
                format!("{name}: {:?} vs {:?}", slot.shape(), tensor.shape()),
            ));
        }
        *slot = tensor.with_requires_grad(true);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copy every entry of `other` in, overwriting same-named entries.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Register every entry as a gradient-tracking leaf on `tape`.
    pub fn register<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Register every entry as a constant (frozen) leaf on `tape`.
    pub fn register_frozen<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// Register entries accepted by `trainable` as gradient-tracking leaves
    /// and the rest as constants.
    pub fn register_with<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> ParamVars<'t> {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| {
                    let var = if trainable(k) { tape.param(v.clone()) } else { tape.constant(v.clone()) };
                    (k.clone(), var)
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let dims = if dims.is_empty() { "-".to_string() } else { dims.join(" ") };
            manifest.push_str(&format!("{name} f64 {dims} {offset}\n"));
            offset += t.numel() * 8;
        }
        manifest.push_str(&format!("end {offset}\n"));
        let mut out = Vec::with_capacity(MAGIC.len() + manifest.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(manifest.as_bytes());
        for t in self.entries.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a store from the front of `bytes`; returns the store and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<(ParamStore, usize)> {
        let bad = |detail: String| Error::malformed(origin, detail);
        if !bytes.starts_with(MAGIC) {
            return Err(bad("missing CRFD1 magic".into()));
        }
        let mut pos = MAGIC.len();
        let mut specs = Vec::new();
        let blob_len = loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated manifest".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| bad("manifest is not utf-8".into()))?;
            pos += end + 1;
            let toks: Vec<&str> = line.split(' ').collect();
            if toks.first() == Some(&"end") && toks.len() == 2 {
                break toks[1]
                    .parse::<usize>()
                    .map_err(|_| bad(format!("bad blob length in {line:?}")))?;
            }
            if toks.len() < 4 || toks[1] != "f64" {
                return Err(bad(format!("bad manifest line {line:?}")));
            }
            let dims: Vec<usize> = if toks[2..toks.len() - 1] == ["-"] {
                Vec::new()
            } else {
                toks[2..toks.len() - 1]
                    .iter()
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(format!("bad dims in {line:?}")))?
            };
            let offset: usize = toks[toks.len() - 1]
                .parse()
                .map_err(|_| bad(format!("bad offset in {line:?}")))?;
            specs.push((toks[0].to_string(), dims, offset));
        };
        let blob = bytes
            .get(pos..pos + blob_len)
            .ok_or_else(|| bad(format!("blob truncated: need {blob_len} bytes")))?;
        let mut store = ParamStore::new();
        for (name, dims, offset) in specs {
            let n: usize = dims.iter().product();
            let raw = blob
                .get(offset..offset + n * 8)
                .ok_or_else(|| bad(format!("tensor {name} out of blob range")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| bad(format!("{name}: {e}")))?;
            store.insert(name, t).map_err(|e| bad(e.to_string()))?;
        }
        Ok((store, pos + blob_len))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes, path)?.0)
    }
}

/// Parameters registered on a tape, addressable by name.
pub struct ParamVars<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collect the gradient of every registered parameter that was reached.
    pub fn gradients(&self, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, var) in &self.vars {
            if var.requires_grad() && grads.reached(*var) {
                out.insert(name.clone(), grads.get(*var)).expect("unique names");
            }
        }
        out
    }
}
