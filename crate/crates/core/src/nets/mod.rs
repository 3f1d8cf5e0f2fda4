//! Parameter containers and the small networks used by every stage.

mod adapter;
mod codec;
mod denoiser;

pub use adapter::{bind_adapted, AdaptedNet, LowRankAdapter};
pub use codec::{Codec, CodecKind};
pub use denoiser::{time_embedding, DenoiserNet, NetConfig};

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Named parameter arrays, kept in name order so serialization and
/// fingerprints are canonical.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.map {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies every entry under `prefix` into a new set with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in &self.map {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in &other.map {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }
}

/// Graph handles for a parameter set.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Puts every parameter on the tape, as trainable leaves or as constants.
pub fn bind(g: &mut Graph, params: &ParamSet, trainable: bool) -> Bound {
    let mut b = Bound::default();
    for (name, t) in params.iter() {
        let v = if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        };
        b.insert(name.clone(), v);
    }
    b
}

/// Collects gradients for bound parameters into a set with matching names.
pub fn collect_grads(
    g: &Graph,
    grads: &crate::autograd::Gradients,
    bound: &Bound,
) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, v) in bound.iter() {
        out.insert(name.clone(), grads.wrt(g, *v));
    }
    out
}

/// Anything that maps `(z, t, c)` to a noise prediction of the same shape.
pub trait EpsField {
    fn eps(&self, z: &Tensor, t: f64, c: &[f64]) -> Result<Tensor>;
}

/// A field that ignores its inputs and returns one fixed tensor.
#[derive(Clone, Debug)]
pub struct ConstantField(pub Tensor);

impl EpsField for ConstantField {
    fn eps(&self, z: &Tensor, _t: f64, _c: &[f64]) -> Result<Tensor> {
        self.0.check_same_shape(z)?;
        Ok(self.0.clone())
    }
}
