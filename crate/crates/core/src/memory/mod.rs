//! Fixed-capacity, spatially-indexed memory.
//!
//! A [`MemoryBank`] holds up to `K` slot templates. While the bank is
//! filling, new templates are appended; once it is full, an
//! [`UpdatePolicy`] picks one slot to overwrite with the incoming
//! template. Policies are interchangeable trait objects selected by name
//! (see [`policy`]): the learned Gumbel-Softmax policy plus six rule-based
//! baselines. The first inserted slot is pinned and — like the most recent
//! slot — is protected from eviction by every policy whose definition does
//! not itself evict the newest entry.

pub mod fusion;
pub mod gumbel;
pub mod learned;
pub mod policy;
pub mod rules;
pub mod similarity;
pub mod snapshot;

pub use fusion::{fusion_update, FusionModule};
pub use gumbel::{gumbel_softmax, GumbelNoise};
pub use learned::{LearnedPolicy, UpdateKeyProjector};
pub use policy::{create_policy, PolicyKind, UpdatePolicy};
pub use similarity::similarity;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One stored template plus bookkeeping.
#[derive(Clone)]
pub struct SlotEntry<T: Scalar> {
    pub template: Tensor<T>,
    pub frame_index: usize,
    pub pinned: bool,
}

impl<T: Scalar> SlotEntry<T> {
    pub fn new(template: Tensor<T>, frame_index: usize) -> Self {
        SlotEntry { template, frame_index, pinned: false }
    }
}

#[derive(Clone)]
pub struct MemoryBank<T: Scalar> {
    capacity: usize,
    slots: Vec<SlotEntry<T>>,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory capacity must be >= 1".into()));
        }
        Ok(MemoryBank { capacity, slots: Vec::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn slots(&self) -> &[SlotEntry<T>] {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> &SlotEntry<T> {
        &self.slots[i]
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.frame_index).collect()
    }

    fn check_shape(&self, t: &Tensor<T>) -> Result<()> {
        if let Some(first) = self.slots.first() {
            if first.template.shape() != t.shape() {
                return Err(Error::dim(
                    "memory_bank",
                    format!(
                        "template shape {:?} vs slot shape {:?}",
                        t.shape(),
                        first.template.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Append while below capacity.
    pub fn push(&mut self, entry: SlotEntry<T>) -> Result<()> {
        if self.is_full() {
            return Err(Error::State("bank is full; use an update policy".into()));
        }
        self.check_shape(&entry.template)?;
        if entry.pinned && self.slots.iter().any(|s| s.pinned) {
            return Err(Error::State("at most one pinned slot".into()));
        }
        self.slots.push(entry);
        Ok(())
    }

    /// Overwrite slot `i` in place.
    pub fn replace(&mut self, i: usize, entry: SlotEntry<T>) -> Result<()> {
        if i >= self.slots.len() {
            return Err(Error::Contract(format!("slot {} out of {}", i, self.slots.len())));
        }
        if self.slots[i].pinned {
            return Err(Error::Contract(format!("slot {} is pinned", i)));
        }
        self.check_shape(&entry.template)?;
        self.slots[i] = entry;
        Ok(())
    }

    /// Swap just the template of slot `i`, keeping its bookkeeping
    /// (used by Eq.-(4)-style in-place updates and the fusion module).
    pub fn set_template(&mut self, i: usize, template: Tensor<T>) -> Result<()> {
        if i >= self.slots.len() {
            return Err(Error::Contract(format!("slot {} out of {}", i, self.slots.len())));
        }
        self.check_shape(&template)?;
        self.slots[i].template = template;
        Ok(())
    }

    pub fn remove(&mut self, i: usize) -> SlotEntry<T> {
        self.slots.remove(i)
    }

    /// Update frame bookkeeping of a slot whose template was already
    /// rewritten through the differentiable update path.
    pub(crate) fn replace_meta(&mut self, i: usize, frame_index: usize) {
        self.slots[i].frame_index = frame_index;
        self.slots[i].pinned = false;
    }

    /// Slot index holding the highest frame index (the most recent entry).
    pub fn newest_slot(&self) -> Option<usize> {
        self.slots
            .iter()
            .enumerate()
            .max_by_key(|(_, s)| s.frame_index)
            .map(|(i, _)| i)
    }

    /// Eviction eligibility: everything except pinned slots and the most
    /// recent slot.
    pub fn eligible_mask(&self) -> Vec<bool> {
        let newest = self.newest_slot();
        self.slots
            .iter()
            .enumerate()
            .map(|(i, s)| !s.pinned && Some(i) != newest)
            .collect()
    }

    /// Detach every template from any tape (end-of-clip truncation).
    pub fn detached(&self) -> Self {
        MemoryBank {
            capacity: self.capacity,
            slots: self
                .slots
                .iter()
                .map(|s| SlotEntry {
                    template: s.template.detached(),
                    frame_index: s.frame_index,
                    pinned: s.pinned,
                })
                .collect(),
        }
    }
}

/// Execution mode of a memory update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Gumbel noise sampled, straight-through hard selection on the tape.
    Train,
    /// Deterministic: zero noise, argmax, literal slot replacement.
    Eval,
    /// Soft relaxation (Eq. (4) driven by the soft weights directly);
    /// used only by gradient checks along the soft path.
    SoftRelax,
}

/// Everything a policy may need, threaded by the caller.
pub struct UpdateContext<'a, T: Scalar> {
    pub mode: Mode,
    pub tau: T,
    pub projector: Option<&'a UpdateKeyProjector<T>>,
    pub fusion: Option<&'a FusionModule<T>>,
    pub gumbel: Option<&'a mut GumbelNoise>,
    pub policy_rng: Option<&'a mut ChaCha8Rng>,
    /// Alternative feature map scored against the memory in Eq. (1)
    /// (e.g. the query-side encoding) while the incoming template is
    /// still what gets stored.
    pub score_override: Option<&'a Tensor<T>>,
}

impl<'a, T: Scalar> UpdateContext<'a, T> {
    pub fn rule_eval(policy_rng: Option<&'a mut ChaCha8Rng>) -> Self {
        UpdateContext {
            mode: Mode::Eval,
            tau: T::one(),
            projector: None,
            fusion: None,
            gumbel: None,
            policy_rng,
            score_override: None,
        }
    }
}

/// Per-update record of the learned policy's decision.
#[derive(Debug, Clone)]
pub struct UpdateDecision<T: Scalar> {
    pub scores: Vec<T>,
    pub gumbel: Vec<T>,
    pub tau: T,
    pub soft: Vec<T>,
    pub hard: Vec<T>,
    pub eligible: Vec<bool>,
    pub victim: usize,
}

/// Insert `x_new` into the bank under the given policy. Appends while the
/// bank is filling (the very first entry is pinned); delegates to the
/// policy once full. Only the learned policy emits an [`UpdateDecision`].
pub fn update_memory<T: Scalar>(
    bank: &mut MemoryBank<T>,
    x_new: Tensor<T>,
    frame_index: usize,
    policy: &mut dyn UpdatePolicy<T>,
    ctx: &mut UpdateContext<'_, T>,
) -> Result<Option<UpdateDecision<T>>> {
    if x_new.rank() != 3 {
        return Err(Error::dim(
            "update_memory",
            format!("template must be C×H×W, got {:?}", x_new.shape()),
        ));
    }
    if bank.is_empty() {
        let mut entry = SlotEntry::new(x_new, frame_index);
        entry.pinned = true;
        bank.push(entry)?;
        return Ok(None);
    }
    policy.update(bank, SlotEntry::new(x_new, frame_index), ctx)
}
