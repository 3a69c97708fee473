//! Rule-based replacement baselines (letters A–F).

use rand::Rng;

use crate::error::{Error, Result};
use crate::memory::policy::PolicyKind;
use crate::memory::similarity::similarity;
use crate::memory::{MemoryBank, SlotEntry, UpdateContext, UpdateDecision, UpdatePolicy};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Convenience wrapper matching the rule-policy calling convention: build
/// the policy for `kind` and run one insertion. Stateful rules
/// (random-select) should instead hold one policy value across a sequence.
pub fn baseline_policy_update<T: Scalar>(
    bank: &mut MemoryBank<T>,
    x_new: Tensor<T>,
    frame_index: usize,
    kind: PolicyKind,
    ctx: &mut UpdateContext<'_, T>,
) -> Result<()> {
    if kind == PolicyKind::Learned {
        return Err(Error::Config("baseline_policy_update expects a rule kind (A-F)".into()));
    }
    let mut policy = crate::memory::policy::create_policy::<T>(kind);
    crate::memory::update_memory(bank, x_new, frame_index, policy.as_mut(), ctx)?;
    Ok(())
}

fn fill_or<T: Scalar>(
    bank: &mut MemoryBank<T>,
    incoming: SlotEntry<T>,
) -> Result<Option<SlotEntry<T>>> {
    if !bank.is_full() {
        bank.push(incoming)?;
        Ok(None)
    } else {
        Ok(Some(incoming))
    }
}

fn min_frame_non_pinned<T: Scalar>(bank: &MemoryBank<T>) -> Option<usize> {
    bank.slots()
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.pinned)
        .min_by_key(|(_, s)| s.frame_index)
        .map(|(i, _)| i)
}

fn max_frame_non_pinned<T: Scalar>(bank: &MemoryBank<T>) -> Option<usize> {
    bank.slots()
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.pinned)
        .max_by_key(|(_, s)| s.frame_index)
        .map(|(i, _)| i)
}

fn eligible_indices<T: Scalar>(bank: &MemoryBank<T>) -> Vec<usize> {
    bank.eligible_mask()
        .into_iter()
        .enumerate()
        .filter_map(|(i, e)| e.then_some(i))
        .collect()
}

/// Rule A: evict the oldest non-pinned slot (queue).
pub struct OldestPolicy;

impl<T: Scalar> UpdatePolicy<T> for OldestPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Oldest
    }

    fn update(
        &mut self,
        bank: &mut MemoryBank<T>,
        incoming: SlotEntry<T>,
        _ctx: &mut UpdateContext<'_, T>,
    ) -> Result<Option<UpdateDecision<T>>> {
        if let Some(incoming) = fill_or(bank, incoming)? {
            let victim = min_frame_non_pinned(bank)
                .ok_or_else(|| Error::State("no evictable slot".into()))?;
            bank.replace(victim, incoming)?;
        }
        Ok(None)
    }
}

/// Rule B: evict the newest previously stored non-pinned slot (stack).
/// By definition this is the one policy that does replace the most recent
/// slot.
pub struct NewestPolicy;

impl<T: Scalar> UpdatePolicy<T> for NewestPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Newest
    }

    fn update(
        &mut self,
        bank: &mut MemoryBank<T>,
        incoming: SlotEntry<T>,
        _ctx: &mut UpdateContext<'_, T>,
    ) -> Result<Option<UpdateDecision<T>>> {
        if let Some(incoming) = fill_or(bank, incoming)? {
            let victim = max_frame_non_pinned(bank)
                .ok_or_else(|| Error::State("no evictable slot".into()))?;
            bank.replace(victim, incoming)?;
        }
        Ok(None)
    }
}

/// Rule C: evict a uniformly random non-pinned, non-latest slot.
pub struct RandomDropPolicy;

impl<T: Scalar> UpdatePolicy<T> for RandomDropPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::RandomDrop
    }

    fn update(
        &mut self,
        bank: &mut MemoryBank<T>,
        incoming: SlotEntry<T>,
        ctx: &mut UpdateContext<'_, T>,
    ) -> Result<Option<UpdateDecision<T>>> {
        if let Some(incoming) = fill_or(bank, incoming)? {
            let candidates = eligible_indices(bank);
            if candidates.is_empty() {
                return Err(Error::Config("random-drop has no eligible slot (K too small)".into()));
            }
            let rng = ctx
                .policy_rng
                .as_mut()
                .ok_or_else(|| Error::Config("random-drop requires a policy RNG".into()))?;
            let victim = candidates[rng.gen_range(0..candidates.len())];
            bank.replace(victim, incoming)?;
        }
        Ok(None)
    }
}

/// Rule D: uniform reservoir sample of size K-2 over all past intermediate
/// frames, with the pinned first and the latest frame always kept.
pub struct ReservoirPolicy {
    /// Number of intermediate candidates streamed so far.
    seen: usize,
}

impl ReservoirPolicy {
    pub fn new() -> Self {
        ReservoirPolicy { seen: 0 }
    }
}

impl Default for ReservoirPolicy {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> UpdatePolicy<T> for ReservoirPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::RandomSelect
    }

    fn update(
        &mut self,
        bank: &mut MemoryBank<T>,
        incoming: SlotEntry<T>,
        ctx: &mut UpdateContext<'_, T>,
    ) -> Result<Option<UpdateDecision<T>>> {
        if let Some(incoming) = fill_or(bank, incoming)? {
            let k = bank.capacity();
            if k < 3 {
                return Err(Error::Config("random-select needs K >= 3".into()));
            }
            let reservoir = eligible_indices(bank);
            debug_assert_eq!(reservoir.len(), k - 2);
            if self.seen < k - 2 {
                // bank just reached capacity: intermediates currently held
                // are the whole stream so far
                self.seen = k - 2;
            }
            let rng = ctx
                .policy_rng
                .as_mut()
                .ok_or_else(|| Error::Config("random-select requires a policy RNG".into()))?;

            // the outgoing latest joins the candidate stream
            let outgoing = max_frame_non_pinned(bank)
                .ok_or_else(|| Error::State("no evictable slot".into()))?;
            self.seen += 1;
            let accept = rng.gen_range(0.0..1.0) < (k - 2) as f64 / self.seen as f64;
            if accept {
                // outgoing latest enters the reservoir in place of a
                // uniformly random member; its slot then takes the new frame
                let kicked = reservoir[rng.gen_range(0..reservoir.len())];
                let keep = bank.slot(outgoing).clone();
                bank.replace(kicked, keep)?;
            }
            bank.replace(outgoing, incoming)?;
        }
        Ok(None)
    }
}

/// Rule E: keep only the pinned first frame and the most recent frame.
pub struct FirstLastPolicy;

impl<T: Scalar> UpdatePolicy<T> for FirstLastPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::FirstLast
    }

    fn update(
        &mut self,
        bank: &mut MemoryBank<T>,
        incoming: SlotEntry<T>,
        _ctx: &mut UpdateContext<'_, T>,
    ) -> Result<Option<UpdateDecision<T>>> {
        // drop every non-pinned slot, then store the incoming frame
        let mut i = 0;
        while i < bank.len() {
            if bank.slot(i).pinned {
                i += 1;
            } else {
                bank.remove(i);
            }
        }
        bank.push(incoming)?;
        Ok(None)
    }
}

/// Rule F: evict the eligible slot most similar to the incoming template
/// (raw-feature similarity; ties to the lowest index).
pub struct MostSimilarPolicy;

impl<T: Scalar> UpdatePolicy<T> for MostSimilarPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::MostSimilar
    }

    fn update(
        &mut self,
        bank: &mut MemoryBank<T>,
        incoming: SlotEntry<T>,
        _ctx: &mut UpdateContext<'_, T>,
    ) -> Result<Option<UpdateDecision<T>>> {
        if let Some(incoming) = fill_or(bank, incoming)? {
            let candidates = eligible_indices(bank);
            if candidates.is_empty() {
                return Err(Error::Config("most-similar has no eligible slot (K too small)".into()));
            }
            let mut victim = candidates[0];
            let mut best = T::neg_infinity();
            for &i in &candidates {
                let s = similarity(&incoming.template.detached(), &bank.slot(i).template.detached())?
                    .value();
                if s > best {
                    best = s;
                    victim = i;
                }
            }
            bank.replace(victim, incoming)?;
        }
        Ok(None)
    }
}
