//! Named trainable parameters and flat-JSON checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor. Names are dotted paths whose first segment is
/// the owning block (e.g. `block2.layer1.attn.wq`), so a block's parameters
/// are recoverable by prefix.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// The parameters of one trainable unit (a block, or a whole model).
///
/// Blocks each own a separate `ParamSet`, which is what makes block
/// independence structural: a block's loss cannot touch parameters that are
/// not in its set.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Register a parameter. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(),
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_index(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total scalar element count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Bitwise equality of parameter values (names, shapes, and data).
    pub fn bit_identical(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor.data() == b.tensor.data()
            })
    }

    /// Serialize as a flat JSON object `name -> {shape, data}`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<&str, CheckpointEntry> = self
            .params
            .iter()
            .map(|p| {
                (
                    p.name.as_str(),
                    CheckpointEntry {
                        shape: p.tensor.shape().to_vec(),
                        data: p.tensor.data().to_vec(),
                    },
                )
            })
            .collect();
        let json = serde_json::to_string(&map)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Load values into this set. Every parameter must be present with a
    /// matching shape, and the file must not contain unknown names.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let mut map: BTreeMap<String, CheckpointEntry> = serde_json::from_str(&text)?;
        let display = path.display().to_string();
        for p in &mut self.params {
            let entry = map
                .remove(&p.name)
                .ok_or_else(|| Error::checkpoint(&display, format!("missing `{}`", p.name)))?;
            if entry.shape != p.tensor.shape() {
                return Err(Error::checkpoint(
                    &display,
                    format!(
                        "`{}` has shape {:?}, expected {:?}",
                        p.name,
                        entry.shape,
                        p.tensor.shape()
                    ),
                ));
            }
            p.tensor = Tensor::new(entry.shape, entry.data).with_requires_grad();
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::checkpoint(&display, format!("unknown `{extra}`")));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut set = ParamSet::new();
        set.add(
            "block0.w",
            Tensor::new(vec![2, 2], vec![0.1, -1.5e-300, std::f64::consts::PI, 3.0]),
        );
        set.save_checkpoint(&path).unwrap();

        let mut loaded = ParamSet::new();
        loaded.add("block0.w", Tensor::zeros(vec![2, 2]));
        loaded.load_checkpoint(&path).unwrap();
        assert!(set.bit_identical(&loaded));
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut set = ParamSet::new();
        set.add("block0.w", Tensor::zeros(vec![2]));
        set.save_checkpoint(&path).unwrap();

        let mut other = ParamSet::new();
        other.add("block0.w", Tensor::zeros(vec![3]));
        assert!(other.load_checkpoint(&path).is_err());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::zeros(vec![1]));
        set.add("w", Tensor::zeros(vec![1]));
    }
}
