use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
    BnGain,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl Role {
    pub fn is_trainable(self) -> bool {
        !matches!(self, Role::BnRunningMean | Role::BnRunningVar)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Role::Weight => 0,
            Role::Bias => 1,
            Role::BnGain => 2,
            Role::BnShift => 3,
            Role::BnRunningMean => 4,
            Role::BnRunningVar => 5,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Role::Weight,
            1 => Role::Bias,
            2 => Role::BnGain,
            3 => Role::BnShift,
            4 => Role::BnRunningMean,
            5 => Role::BnRunningVar,
            _ => return None,
        })
    }
}

/// Shape plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub role: Role,
    pub tensor: Tensor,
}

/// Named parameter tensors of one model, in definition order.
///
/// Each instance carries an identity and a generation counter that is bumped
/// on every mutable access to a trainable entry; forward caches record both so
/// that a backward pass against mutated parameters is rejected.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamSet {
    entries: IndexMap<String, ParamEntry>,
    #[serde(skip, default = "next_id")]
    id: u64,
    #[serde(skip)]
    generation: u64,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            id: next_id(),
            generation: 0,
        }
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
            id: next_id(),
            generation: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, role: Role, tensor: Tensor) {
        self.generation += 1;
        self.entries.insert(name.into(), ParamEntry { role, tensor });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::structure(format!("missing parameter `{name}`")))
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        self.tensor(name).map(|t| t.data.as_slice())
    }

    /// Mutable values of an entry. Trainable entries bump the generation.
    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::structure(format!("missing parameter `{name}`")))?;
        if entry.role.is_trainable() {
            self.generation += 1;
        }
        Ok(entry.tensor.data.as_mut_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_trainable(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.iter().filter(|(_, e)| e.role.is_trainable())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub(crate) fn fingerprint(&self) -> (u64, u64) {
        (self.id, self.generation)
    }

    /// Checks that both sets have identical names, roles and shapes.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.0 == b.0 && a.1.role == b.1.role && a.1.tensor.shape == b.1.tensor.shape
            })
    }

    /// Applies `f(name, role, values)` to every entry; bumps the generation.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, Role, &mut [f64])) {
        self.generation += 1;
        for (k, e) in self.entries.iter_mut() {
            f(k, e.role, &mut e.tensor.data);
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.iter_trainable().map(|(_, e)| e.tensor.len()).sum()
    }

    /// Checks the running-variance invariant.
    pub fn validate(&self) -> Result<()> {
        for (name, e) in self.iter() {
            if e.role == Role::BnRunningVar && e.tensor.data.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::structure(format!(
                    "running variance `{name}` must be elementwise positive"
                )));
            }
        }
        Ok(())
    }
}

/// Gradient tensors keyed like the trainable subset of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    entries: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let entries = params
            .iter_trainable()
            .map(|(k, e)| (k.to_string(), Tensor::zeros(e.tensor.shape.clone())))
            .collect();
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
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

    pub fn scale(&mut self, s: f64) {
        for t in self.entries.values_mut() {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::structure("gradient key sets differ"));
        }
        for ((ka, a), (kb, b)) in self.entries.iter_mut().zip(&other.entries) {
            if ka != kb || a.shape != b.shape {
                return Err(Error::structure(format!("gradient `{ka}` vs `{kb}`")));
            }
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        Ok(())
    }

    /// True when the key set equals the trainable subset of `params`.
    pub fn matches(&self, params: &ParamSet) -> bool {
        let mut it = params.iter_trainable();
        for (k, t) in &self.entries {
            match it.next() {
                Some((pk, pe)) if pk == k && pe.tensor.shape == t.shape => {}
                _ => return false,
            }
        }
        it.next().is_none()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }
}
