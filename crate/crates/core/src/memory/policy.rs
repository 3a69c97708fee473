//! Slot-replacement policy registry.
//!
//! Every replacement strategy sits behind [`UpdatePolicy`] and is selected
//! by name at runtime (`memory.policy=` in configs, `--set` on the CLI).
//! The rule letters match the usual baseline naming: A remove-oldest,
//! B remove-newest, C random drop, D random select (reservoir), E keep
//! first+last, F drop the most similar template.

use crate::error::{Error, Result};
use crate::memory::{MemoryBank, SlotEntry, UpdateContext, UpdateDecision};
use crate::scalar::Scalar;

pub trait UpdatePolicy<T: Scalar> {
    fn kind(&self) -> PolicyKind;

    /// Insert `incoming`, evicting per the policy when the bank is full.
    /// Only the learned policy returns an [`UpdateDecision`].
    fn update(
        &mut self,
        bank: &mut MemoryBank<T>,
        incoming: SlotEntry<T>,
        ctx: &mut UpdateContext<'_, T>,
    ) -> Result<Option<UpdateDecision<T>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Learned,
    Oldest,
    Newest,
    RandomDrop,
    RandomSelect,
    FirstLast,
    MostSimilar,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Learned,
        PolicyKind::Oldest,
        PolicyKind::Newest,
        PolicyKind::RandomDrop,
        PolicyKind::RandomSelect,
        PolicyKind::FirstLast,
        PolicyKind::MostSimilar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Learned => "learned",
            PolicyKind::Oldest => "oldest",
            PolicyKind::Newest => "newest",
            PolicyKind::RandomDrop => "random-drop",
            PolicyKind::RandomSelect => "random-select",
            PolicyKind::FirstLast => "first-last",
            PolicyKind::MostSimilar => "most-similar",
        }
    }

    /// Baseline letter (A–F); `None` for the learned policy.
    pub fn rule_letter(self) -> Option<char> {
        match self {
            PolicyKind::Learned => None,
            PolicyKind::Oldest => Some('A'),
            PolicyKind::Newest => Some('B'),
            PolicyKind::RandomDrop => Some('C'),
            PolicyKind::RandomSelect => Some('D'),
            PolicyKind::FirstLast => Some('E'),
            PolicyKind::MostSimilar => Some('F'),
        }
    }

    pub fn from_rule_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.rule_letter() == Some(c.to_ascii_uppercase()))
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown policy '{}'; known: {}", s, known.join(", ")))
            })
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s)
    }
}

/// Instantiate a policy by kind.
pub fn create_policy<T: Scalar>(kind: PolicyKind) -> Box<dyn UpdatePolicy<T>> {
    use crate::memory::learned::LearnedPolicy;
    use crate::memory::rules::*;
    match kind {
        PolicyKind::Learned => Box::new(LearnedPolicy),
        PolicyKind::Oldest => Box::new(OldestPolicy),
        PolicyKind::Newest => Box::new(NewestPolicy),
        PolicyKind::RandomDrop => Box::new(RandomDropPolicy),
        PolicyKind::RandomSelect => Box::new(ReservoirPolicy::new()),
        PolicyKind::FirstLast => Box::new(FirstLastPolicy),
        PolicyKind::MostSimilar => Box::new(MostSimilarPolicy),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for kind in PolicyKind::ALL {
            assert_eq!(PolicyKind::from_name(kind.name()).unwrap(), kind);
            let built = create_policy::<f64>(kind);
            assert_eq!(built.kind(), kind);
        }
        assert!(PolicyKind::from_name("lru").is_err());
        assert_eq!(PolicyKind::from_rule_letter('a'), Some(PolicyKind::Oldest));
        assert_eq!(PolicyKind::from_rule_letter('F'), Some(PolicyKind::MostSimilar));
    }
}
