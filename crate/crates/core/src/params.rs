//! Named parameter storage shared by all networks.
//!
//! Parameters live in one flat arena; networks hold indices into it. Names use
//! dotted prefixes (`gen.`, `enc.`, `dx.`, `dxx.`, `dz.`) so optimizers and
//! backward passes can select a sub-network by prefix. Non-trainable entries
//! hold persistent buffers such as the power-iteration vectors of spectral
//! normalization.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::Tensor;

/// One named tensor in the arena.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Arena of named parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    #[must_use]
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a tensor under `name`; panics if the name is taken.
    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let idx = self.entries.len();
        self.by_name.insert(name.to_string(), idx);
        self.entries.push(ParamEntry { name: name.to_string(), value, trainable });
        idx
    }

    /// Adds a trainable tensor with independent normal entries `N(0, std²)`.
    pub fn add_randn(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> usize {
        let mut t = Tensor::randn(shape.to_vec(), rng);
        for v in t.data_mut() {
            *v *= std;
        }
        self.add(name, t, true)
    }

    /// Adds a trainable tensor filled with a constant.
    pub fn add_full(&mut self, name: &str, shape: &[usize], fill: f64) -> usize {
        self.add(name, Tensor::full(shape.to_vec(), fill), true)
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of a name; panics if absent.
    #[must_use]
    pub fn idx(&self, name: &str) -> usize {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    #[must_use]
    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    #[must_use]
    pub fn get(&self, idx: usize) -> &Tensor {
        &self.entries[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].value
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set_value(&mut self, idx: usize, value: Tensor) {
        assert_eq!(self.entries[idx].value.shape(), value.shape(), "shape change for {}", self.entries[idx].name);
        self.entries[idx].value = value;
    }

    #[must_use]
    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    #[must_use]
    pub fn is_trainable(&self, idx: usize) -> bool {
        self.entries[idx].trainable
    }

    #[must_use]
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Indices of trainable parameters whose name starts with `prefix`.
    #[must_use]
    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable && e.name.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }

    /// Total element count of trainable parameters under `prefix`
    /// (empty prefix counts everything trainable).
    #[must_use]
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }
}
