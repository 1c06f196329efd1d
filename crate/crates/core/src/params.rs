//! Named, layer-tagged tensor collections and the vector algebra the
//! federated strategies are written in.
//!
//! A [`ParameterSet`] is an immutable value: every operation returns a new
//! set. Entries are kept sorted by name so that iteration order, and with
//! it every reduction, is deterministic.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which part of the network an entry belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerTag {
    /// Shared trunk weights and biases.
    Base,
    /// Normalization affine parameters and running statistics.
    Norm,
    /// Final classifier layer.
    Head,
}

impl LayerTag {
    pub const ALL: [LayerTag; 3] = [LayerTag::Base, LayerTag::Norm, LayerTag::Head];

    /// Wire code used by the binary codec.
    pub fn code(self) -> u8 {
        match self {
            LayerTag::Base => 0,
            LayerTag::Norm => 1,
            LayerTag::Head => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LayerTag::Base),
            1 => Some(LayerTag::Norm),
            2 => Some(LayerTag::Head),
            _ => None,
        }
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerTag::Base => "Base",
            LayerTag::Norm => "Norm",
            LayerTag::Head => "Head",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("shape mismatch at entry `{name}`: {reason}")]
    ShapeMismatch { name: String, reason: String },
    #[error("entry count mismatch: {left} vs {right}")]
    EntryCount { left: usize, right: usize },
    #[error("duplicate entry name `{0}`")]
    DuplicateName(String),
    #[error("entry `{name}` has {len} values but shape {shape:?}")]
    BadLength {
        name: String,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("no entry named `{0}`")]
    Missing(String),
}

/// One named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tag: LayerTag,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Entry {
    pub fn new(
        name: impl Into<String>,
        tag: LayerTag,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, ParamError> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(ParamError::BadLength {
                name,
                len: values.len(),
                shape,
            });
        }
        Ok(Entry {
            name,
            tag,
            shape,
            values,
        })
    }

    fn with_new_values(&self, values: Vec<f64>) -> Entry {
        Entry {
            name: self.name.clone(),
            tag: self.tag,
            shape: self.shape.clone(),
            values,
        }
    }

    fn congruent_with(&self, other: &Entry) -> Result<(), ParamError> {
        if self.name != other.name {
            return Err(ParamError::ShapeMismatch {
                name: self.name.clone(),
                reason: format!("paired with entry `{}`", other.name),
            });
        }
        if self.tag != other.tag {
            return Err(ParamError::ShapeMismatch {
                name: self.name.clone(),
                reason: format!("tag {} vs {}", self.tag, other.tag),
            });
        }
        if self.shape != other.shape {
            return Err(ParamError::ShapeMismatch {
                name: self.name.clone(),
                reason: format!("shape {:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(())
    }
}

/// Ordered collection of tagged tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: Vec<Entry>,
}

impl ParameterSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a set from arbitrary-order entries, sorting them by name.
    pub fn from_entries(mut entries: Vec<Entry>) -> Result<Self, ParamError> {
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in entries.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(ParamError::DuplicateName(pair[0].name.clone()));
            }
        }
        for e in &entries {
            let expected: usize = e.shape.iter().product();
            if expected != e.values.len() {
                return Err(ParamError::BadLength {
                    name: e.name.clone(),
                    len: e.values.len(),
                    shape: e.shape.clone(),
                });
            }
        }
        Ok(ParameterSet { entries })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn values(&self, name: &str) -> Result<&[f64], ParamError> {
        self.get(name)
            .map(|e| e.values.as_slice())
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    /// Returns a copy with the values of `name` replaced.
    pub fn with_values(&self, name: &str, values: Vec<f64>) -> Result<Self, ParamError> {
        let mut out = self.clone();
        let idx = out
            .entries
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .map_err(|_| ParamError::Missing(name.to_string()))?;
        let entry = &mut out.entries[idx];
        if entry.values.len() != values.len() {
            return Err(ParamError::BadLength {
                name: name.to_string(),
                len: values.len(),
                shape: entry.shape.clone(),
            });
        }
        entry.values = values;
        Ok(out)
    }

    pub fn check_congruent(&self, other: &ParameterSet) -> Result<(), ParamError> {
        if self.entries.len() != other.entries.len() {
            return Err(ParamError::EntryCount {
                left: self.entries.len(),
                right: other.entries.len(),
            });
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            a.congruent_with(b)?;
        }
        Ok(())
    }

    pub fn is_congruent(&self, other: &ParameterSet) -> bool {
        self.check_congruent(other).is_ok()
    }

    /// Congruent set with every value zero.
    pub fn zeros_like(&self) -> Self {
        self.map(|_, _| 0.0)
    }

    /// Applies `f(entry, value)` to every scalar.
    pub fn map(&self, mut f: impl FnMut(&Entry, f64) -> f64) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| e.with_new_values(e.values.iter().map(|&v| f(e, v)).collect()))
            .collect();
        ParameterSet { entries }
    }

    /// Entrywise `f(entry, x, y)` over two congruent sets.
    pub fn zip_map(
        &self,
        other: &ParameterSet,
        mut f: impl FnMut(&Entry, f64, f64) -> f64,
    ) -> Result<Self, ParamError> {
        self.check_congruent(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| {
                a.with_new_values(
                    a.values
                        .iter()
                        .zip(&b.values)
                        .map(|(&x, &y)| f(a, x, y))
                        .collect(),
                )
            })
            .collect();
        Ok(ParameterSet { entries })
    }

    /// Entries selected by `keep`, everything else zeroed.
    pub fn mask(&self, mut keep: impl FnMut(&Entry) -> bool) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                if keep(e) {
                    e.clone()
                } else {
                    e.with_new_values(vec![0.0; e.values.len()])
                }
            })
            .collect();
        ParameterSet { entries }
    }

    /// Euclidean norm, accumulated in entry then index order.
    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.values.iter())
            .fold(0.0, |acc, v| acc + v * v)
            .sqrt()
    }

    /// Largest absolute value over all entries (0 for an empty set).
    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.values.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Congruent set with every value zero.
pub fn zeros_like(p: &ParameterSet) -> ParameterSet {
    p.zeros_like()
}

/// Entrywise `a * x + y`.
pub fn axpy(a: f64, x: &ParameterSet, y: &ParameterSet) -> Result<ParameterSet, ParamError> {
    if a == 0.0 {
        x.check_congruent(y)?;
        return Ok(y.clone());
    }
    x.zip_map(y, |_, xv, yv| a * xv + yv)
}

/// Inner product summed in entry order, then flat index order.
pub fn dot(x: &ParameterSet, y: &ParameterSet) -> Result<f64, ParamError> {
    x.check_congruent(y)?;
    let mut acc = 0.0;
    for (a, b) in x.entries.iter().zip(&y.entries) {
        for (u, v) in a.values.iter().zip(&b.values) {
            acc += u * v;
        }
    }
    Ok(acc)
}

/// Takes entries tagged in `keep_local` from `local`, the rest from `global`.
pub fn filter_merge(
    global: &ParameterSet,
    local: &ParameterSet,
    keep_local: &BTreeSet<LayerTag>,
) -> Result<ParameterSet, ParamError> {
    global.check_congruent(local)?;
    let entries = global
        .entries
        .iter()
        .zip(&local.entries)
        .map(|(g, l)| {
            if keep_local.contains(&g.tag) {
                l.clone()
            } else {
                g.clone()
            }
        })
        .collect();
    Ok(ParameterSet { entries })
}
