use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::Tensor;
use crate::real::Real;

/// Parameter registry keyed by hierarchical dotted name
/// (`speech_encoder.conv_in.w`). Values are reference counted so frozen
/// models can be shared by streaming states without copying.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    map: BTreeMap<String, Arc<Tensor<F>>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.map.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name).map(|t| t.as_ref())
    }

    pub fn get_arc(&self, name: &str) -> Option<Arc<Tensor<F>>> {
        self.map.get(name).cloned()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.map.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Number of scalars under a name prefix.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// FNV-1a over names and raw value bits, for cheap bitwise equality checks.
    pub fn checksum_prefixes(&self, prefixes: &[&str]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        let mut buf = Vec::new();
        for (k, v) in &self.map {
            if !prefixes.iter().any(|p| k.starts_with(p)) {
                continue;
            }
            eat(k.as_bytes());
            buf.clear();
            for &x in v.data() {
                x.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }
}
