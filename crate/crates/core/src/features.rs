use serde::{Deserialize, Serialize};

/// A subset of feature indices `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSet {
    members: Vec<bool>,
}

impl FeatureSet {
    pub fn empty(n: usize) -> Self {
        Self { members: vec![false; n] }
    }

    pub fn full(n: usize) -> Self {
        Self { members: vec![true; n] }
    }

    pub fn from_indices(n: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut set = Self::empty(n);
        for i in indices {
            set.insert(i);
        }
        set
    }

    /// Size of the universe, not the number of members.
    pub fn universe(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, feature: usize) -> bool {
        self.members.get(feature).copied().unwrap_or(false)
    }

    /// Returns `true` if the feature was newly added.
    pub fn insert(&mut self, feature: usize) -> bool {
        assert!(feature < self.members.len(), "feature {feature} out of range");
        !std::mem::replace(&mut self.members[feature], true)
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.members.iter().any(|&m| m)
    }

    pub fn is_full(&self) -> bool {
        self.members.iter().all(|&m| m)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }

    pub fn is_subset(&self, other: &FeatureSet) -> bool {
        self.iter().all(|f| other.contains(f))
    }

    pub fn as_mask(&self) -> &[bool] {
        &self.members
    }

    /// Bit string with feature 0 first, e.g. `"0110"`.
    pub fn to_bit_string(&self) -> String {
        self.members.iter().map(|&m| if m { '1' } else { '0' }).collect()
    }
}
