use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Real;

/// Parameter groups that can be frozen independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Surrogate,
    Soiling,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Encoder,
        ParamGroup::Surrogate,
        ParamGroup::Soiling,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, never optimized.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

pub type ParamId = usize;

/// Flat, ordered list of every parameter and batch-norm statistic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        kind: ParamKind,
        shape: Vec<usize>,
        data: Vec<T>,
    ) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            group,
            kind,
            shape,
            data,
        });
        self.params.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id].data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// SHA-256 over names and little-endian values of one group, hex
    /// encoded. Includes batch-norm running statistics.
    pub fn group_checksum(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            hasher.update(p.name.as_bytes());
            buf.clear();
            for &v in &p.data {
                v.append_le_bytes(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    kind: p.kind,
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Gradients aligned with a [`ParamStore`]; entries for frozen groups and
/// running statistics stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub values: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            values: store
                .params
                .iter()
                .map(|p| vec![T::zero(); p.data.len()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id]
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .map(|v| v.abs().as_f64())
            .fold(0.0, f64::max)
    }
}
