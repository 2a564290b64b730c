//! Named parameter storage shared by every network of the model.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// The four parameter sets trained by the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Trajectory-distribution encoder.
    Td,
    /// Guidance encoder.
    Gg,
    /// Energy network plus positive/negative encoders.
    Ebm,
    /// Noise-prediction network.
    Pd,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Td, Group::Gg, Group::Ebm, Group::Pd];

    pub fn name(self) -> &'static str {
        match self {
            Group::Td => "td",
            Group::Gg => "gg",
            Group::Ebm => "ebm",
            Group::Pd => "pd",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    trainable: [bool; 4],
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    /// Empty store with every group trainable.
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            trainable: [true; 4],
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: Group) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(move |(_, p)| p.group == group)
            .map(|(id, _)| id)
    }

    /// Restrict gradient tracking to `groups`.
    pub fn set_trainable(&mut self, groups: &[Group]) {
        self.trainable = [false; 4];
        for g in groups {
            self.trainable[g.index()] = true;
        }
    }

    pub fn trainable_groups(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.trainable[g.index()])
            .collect()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[self.params[id.0].group.index()]
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn numel(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// FNV-1a over the exact bit patterns of a group's parameters.
    pub fn fingerprint(&self, group: Group) -> u64 {
        let mut h = Fnv::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.write(p.name.as_bytes());
            for &d in p.value.shape() {
                h.write(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_groups_follow_set_trainable() {
        let mut s = ParamStore::new();
        let a = s.add("td.w", Group::Td, Tensor::zeros(&[2]));
        let b = s.add("pd.w", Group::Pd, Tensor::zeros(&[2]));
        s.set_trainable(&[Group::Pd]);
        assert!(!s.is_trainable(a));
        assert!(s.is_trainable(b));
        assert_eq!(s.find("pd.w"), Some(b));
    }

    #[test]
    fn fingerprint_sees_single_bit_changes() {
        let mut s = ParamStore::new();
        let a = s.add("gg.w", Group::Gg, Tensor::ones(&[3]));
        let before = s.fingerprint(Group::Gg);
        let td = s.fingerprint(Group::Td);
        s.get_mut(a).data_mut()[1] = f64::from_bits(1.0f64.to_bits() + 1);
        assert_ne!(before, s.fingerprint(Group::Gg));
        assert_eq!(td, s.fingerprint(Group::Td));
    }
}
