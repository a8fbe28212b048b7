use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Arc<Vec<String>>,
    values: Vec<Array>,
    index: BTreeMap<String, ParamId>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Arc::new(Vec::new()),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Adds a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(alloc::format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        Arc::make_mut(&mut self.names).push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|id| &self.values[id.0])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Array> {
        let id = *self.index.get(name)?;
        Some(&mut self.values[id.0])
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// A zero array per parameter, same keys and shapes.
    pub fn zero_gradients(&self) -> GradientSet {
        GradientSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| Array::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }
}

/// Gradients aligned with the [`ParamSet`] that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    names: Arc<Vec<String>>,
    values: Vec<Array>,
}

impl GradientSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Element-wise sum. Both sets must come from the same parameter layout.
    pub fn accumulate(&mut self, other: &GradientSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("gradient sets have different parameter keys"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.values {
            v.scale_mut(k);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.max_abs()))
    }
}
