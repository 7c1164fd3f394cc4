//! Named parameter storage and the per-forward [`Session`] that binds
//! stored tensors into a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics and other non-gradient state.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Canonically named tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) {
        self.entries.insert(name.into(), Entry { tensor, kind });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not registered")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics and reports them for running updates.
    Train,
    /// Batch norm uses stored running statistics.
    Eval,
}

/// One forward pass: a fresh graph plus lazily bound parameters.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    track_params: bool,
    bn_stats: Vec<(String, BatchStats)>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            mode,
            track_params: true,
            bn_stats: Vec::new(),
        }
    }

    /// Bind parameters as constants (no gradient bookkeeping).
    pub fn frozen(store: &'s ParamStore, mode: Mode) -> Self {
        let mut s = Self::new(store, mode);
        s.track_params = false;
        s
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Graph node for a stored parameter; repeated lookups share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.tensor(name)?.clone();
        let v = if self.track_params {
            self.graph.variable(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'s Tensor> {
        self.store.tensor(name)
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub(crate) fn record_batch_stats(&mut self, prefix: &str, stats: BatchStats) {
        self.bn_stats.push((prefix.to_string(), stats));
    }

    pub fn batch_stats(&self) -> &[(String, BatchStats)] {
        &self.bn_stats
    }
}

/// Applies recorded batch statistics to running buffers with the usual
/// exponential moving average: `running = (1 - m) * running + m * batch`.
pub fn apply_batch_stats(store: &mut ParamStore, stats: &[(String, BatchStats)], momentum: f64) {
    for (prefix, s) in stats {
        if let Some(rm) = store.get_mut(&format!("{prefix}.running_mean")) {
            for (r, b) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        if let Some(rv) = store.get_mut(&format!("{prefix}.running_var")) {
            for (r, b) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

pub mod init {
    use super::*;

    /// He-normal initialization for ReLU networks.
    pub fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the customary default for dense layers.
    pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::uniform(shape, -bound, bound, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_binds_each_parameter_once() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(&[2]), ParamKind::Trainable);
        let mut s = Session::new(&store, Mode::Train);
        let a = s.param("w").unwrap();
        let b = s.param("w").unwrap();
        assert_eq!(a, b);
        assert!(s.param("missing").is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        store.insert("bn.running_mean", Tensor::zeros(&[1]), ParamKind::Buffer);
        store.insert("bn.running_var", Tensor::ones(&[1]), ParamKind::Buffer);
        let stats = BatchStats {
            mean: vec![2.0],
            var: vec![3.0],
        };
        apply_batch_stats(&mut store, &[("bn".into(), stats)], 0.5);
        assert_eq!(store.get("bn.running_mean").unwrap().data(), &[1.0]);
        assert_eq!(store.get("bn.running_var").unwrap().data(), &[2.0]);
    }

    #[test]
    fn trainable_count_skips_buffers() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::ones(&[3, 2]), ParamKind::Trainable);
        store.insert("b", Tensor::ones(&[5]), ParamKind::Buffer);
        assert_eq!(store.trainable_count(), 6);
    }
}
