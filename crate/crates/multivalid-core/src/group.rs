//! Examples and group systems.
//!
//! A group system is a finite collection 𝒢 of (possibly intersecting) subsets
//! of the feature space. Features themselves never cross the API boundary:
//! an example is identified by the set 𝒢(x) of group indices it belongs to,
//! plus an optional label in [0,1].

use serde::{Deserialize, Serialize};

use crate::CoreError;

/// Index of a group within a [`GroupSystem`].
pub type GroupId = u32;

/// A finite group collection: `group_count` groups, with every example
/// belonging to at most `max_membership` of them (d in the regret bounds).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSystem {
    group_count: u32,
    max_membership: u32,
}

impl GroupSystem {
    pub fn new(group_count: u32, max_membership: u32) -> Result<Self, CoreError> {
        if group_count == 0 {
            return Err(CoreError::EmptyGroupSystem);
        }
        if max_membership == 0 || max_membership > group_count {
            return Err(CoreError::MembershipBoundTooLarge {
                max: max_membership,
                count: group_count,
            });
        }
        Ok(Self { group_count, max_membership })
    }

    pub fn group_count(&self) -> u32 {
        self.group_count
    }

    pub fn max_membership(&self) -> u32 {
        self.max_membership
    }

    /// Validates a membership list against this system: indices in range,
    /// no duplicates, and within the membership bound. An empty list is
    /// allowed (an example may belong to no group; predictors treat it as a
    /// vacuous sum).
    pub fn validate(&self, group_ids: &[GroupId]) -> Result<(), CoreError> {
        if group_ids.len() > self.max_membership as usize {
            return Err(CoreError::MembershipExceeded {
                got: group_ids.len(),
                max: self.max_membership,
            });
        }
        for window in group_ids.windows(2) {
            if window[0] >= window[1] {
                return Err(CoreError::GroupIdOutOfRange {
                    id: window[1],
                    count: self.group_count,
                });
            }
        }
        if let Some(&last) = group_ids.last() {
            if last >= self.group_count {
                return Err(CoreError::GroupIdOutOfRange { id: last, count: self.group_count });
            }
        }
        Ok(())
    }
}

/// One stream element: the groups it belongs to and, once the adversary has
/// revealed it, a label in [0,1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    group_ids: Vec<GroupId>,
    label: Option<f64>,
}

impl Example {
    /// Builds an example, sorting and deduplicating `group_ids` and checking
    /// them against `system`.
    pub fn new(
        system: &GroupSystem,
        mut group_ids: Vec<GroupId>,
        label: Option<f64>,
    ) -> Result<Self, CoreError> {
        group_ids.sort_unstable();
        group_ids.dedup();
        system.validate(&group_ids)?;
        if let Some(y) = label {
            if !(0.0..=1.0).contains(&y) || y.is_nan() {
                return Err(CoreError::LabelOutOfRange { value: y });
            }
        }
        Ok(Self { group_ids, label })
    }

    /// Sorted, duplicate-free group memberships 𝒢(x).
    pub fn group_ids(&self) -> &[GroupId] {
        &self.group_ids
    }

    pub fn label(&self) -> Option<f64> {
        self.label
    }

    pub fn with_label(&self, label: f64) -> Result<Self, CoreError> {
        if !(0.0..=1.0).contains(&label) || label.is_nan() {
            return Err(CoreError::LabelOutOfRange { value: label });
        }
        Ok(Self { group_ids: self.group_ids.clone(), label: Some(label) })
    }
}
