//! Learned slot replacement: score each stored template against the new
//! one with shared update keys, turn the scores into a categorical choice
//! with Gumbel-Softmax, and overwrite exactly the selected slot.
//!
//! Training uses the straight-through estimator: the forward pass commits
//! to the one-hot argmax while gradients flow through the soft weights, so
//! the slot update `x_i ← (1-a_i)·x_i + a_i·x_new` is applied with the
//! hard coefficients but remains trainable end to end.

use crate::error::{Error, Result};
use crate::memory::gumbel::gumbel_softmax;
use crate::memory::similarity::similarity;
use crate::memory::{MemoryBank, Mode, SlotEntry, UpdateContext, UpdateDecision, UpdatePolicy};
use crate::memory::policy::PolicyKind;
use crate::nn::{ConvLayer, HasParams, Init};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

/// Convolutional projection shared between the query-side and memory-side
/// update keys. Spatial dims are preserved (3×3, stride 1, pad 1).
#[derive(Clone)]
pub struct UpdateKeyProjector<T: Scalar> {
    pub conv: ConvLayer<T>,
}

impl<T: Scalar> UpdateKeyProjector<T> {
    pub fn new(in_channels: usize, key_channels: usize, init: &mut Init) -> Self {
        UpdateKeyProjector { conv: ConvLayer::new(in_channels, key_channels, 3, 1, 1, init) }
    }

    pub fn project(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 3 || x.shape()[0] != self.conv.in_channels() {
            return Err(Error::dim(
                "update_key_projector",
                format!(
                    "input shape {:?} vs expected {} channels",
                    x.shape(),
                    self.conv.in_channels()
                ),
            ));
        }
        self.conv.forward(x)
    }
}

impl<T: Scalar> HasParams<T> for UpdateKeyProjector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv.visit(&crate::nn::join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv.visit_mut(&crate::nn::join(prefix, "conv"), f);
    }
}

pub struct LearnedPolicy;

impl<T: Scalar> UpdatePolicy<T> for LearnedPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Learned
    }

    fn update(
        &mut self,
        bank: &mut MemoryBank<T>,
        incoming: SlotEntry<T>,
        ctx: &mut UpdateContext<'_, T>,
    ) -> Result<Option<UpdateDecision<T>>> {
        if bank.capacity() < 3 {
            return Err(Error::Config(format!(
                "learned policy needs K >= 3 (pinned + latest + one eligible), got K = {}",
                bank.capacity()
            )));
        }
        if !bank.is_full() {
            bank.push(incoming)?;
            return Ok(None);
        }
        let proj = ctx
            .projector
            .ok_or_else(|| Error::Config("learned policy requires an update-key projector".into()))?;

        let k = bank.len();
        let scoring = ctx.score_override.unwrap_or(&incoming.template);
        let u_q = proj.project(scoring)?;
        let mut per_slot = Vec::with_capacity(k);
        for slot in bank.slots() {
            let u_m = proj.project(&slot.template)?;
            per_slot.push(similarity(&u_q, &u_m)?);
        }
        let refs: Vec<&Tensor<T>> = per_slot.iter().collect();
        let scores = ops::concat(&refs, 0)?;

        let eligible = bank.eligible_mask();
        let noise: Vec<T> = match ctx.mode {
            Mode::Train => match ctx.gumbel.as_mut() {
                Some(g) => g.sample(k),
                None => vec![T::zero(); k],
            },
            Mode::Eval | Mode::SoftRelax => vec![T::zero(); k],
        };
        let a_soft = gumbel_softmax(&scores, &noise, ctx.tau, &eligible)?;
        let victim = argmax_lowest(a_soft.data());
        debug_assert!(eligible[victim], "argmax landed on an ineligible slot");

        // Merge the outgoing template into another slot before it goes.
        if ctx.fusion.is_some() && ctx.mode != Mode::SoftRelax {
            if let Some(target) = fusion_target(&scores, &eligible, victim, bank) {
                crate::memory::fusion::fusion_update(bank, victim, target, ctx.fusion)?;
            }
        }

        let mut decision = UpdateDecision {
            scores: scores.data().to_vec(),
            gumbel: noise.clone(),
            tau: ctx.tau,
            soft: a_soft.data().to_vec(),
            hard: one_hot(k, victim),
            eligible: eligible.clone(),
            victim,
        };

        match ctx.mode {
            Mode::Eval => {
                let mut entry = incoming;
                entry.pinned = false;
                bank.replace(victim, entry)?;
            }
            Mode::Train | Mode::SoftRelax => {
                let coefs = match ctx.mode {
                    Mode::Train => ops::straight_through(&a_soft)?,
                    _ => a_soft,
                };
                decision.hard = coefs.data().to_vec();
                for i in 0..k {
                    if !eligible[i] {
                        continue; // coefficient identically zero: untouched
                    }
                    let coef = ops::gather(&coefs, &[i])?;
                    let keep = ops::one_minus(&coef);
                    let merged = ops::add(
                        &ops::scale_by(&keep, &bank.slot(i).template)?,
                        &ops::scale_by(&coef, &incoming.template)?,
                    )?;
                    bank.set_template(i, merged)?;
                }
                bank.replace_meta(victim, incoming.frame_index);
            }
        }
        Ok(Some(decision))
    }
}

fn argmax_lowest<T: Scalar>(values: &[T]) -> usize {
    let mut bi = 0;
    let mut best = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            bi = i;
        }
    }
    bi
}

fn one_hot<T: Scalar>(n: usize, i: usize) -> Vec<T> {
    let mut v = vec![T::zero(); n];
    v[i] = T::one();
    v
}

/// Fusion target: the eligible slot least similar to the incoming template
/// (lowest Eq.-(1) score), excluding the victim itself and pinned slots.
fn fusion_target<T: Scalar>(
    scores: &Tensor<T>,
    eligible: &[bool],
    victim: usize,
    bank: &MemoryBank<T>,
) -> Option<usize> {
    let mut target = None;
    let mut best = T::infinity();
    for i in 0..bank.len() {
        if i == victim || bank.slot(i).pinned {
            continue;
        }
        let _ = eligible;
        let s = scores.data()[i];
        if s < best {
            best = s;
            target = Some(i);
        }
    }
    target
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{create_policy, update_memory, GumbelNoise};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn filled_bank(k: usize, c: usize, rng: &mut ChaCha8Rng) -> MemoryBank<f64> {
        let mut bank = MemoryBank::new(k).unwrap();
        let mut policy = create_policy::<f64>(PolicyKind::Oldest);
        for t in 0..k {
            let x = Tensor::from_fn(&[c, 2, 2], |_| rng.gen_range(-1.0..1.0));
            let mut ctx = UpdateContext::rule_eval(None);
            update_memory(&mut bank, x, t, policy.as_mut(), &mut ctx).unwrap();
        }
        bank
    }

    #[test]
    fn k_below_three_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = filled_bank(2, 3, &mut rng);
        let mut init = Init::new(0);
        let proj = UpdateKeyProjector::<f64>::new(3, 2, &mut init);
        let mut policy = LearnedPolicy;
        let mut ctx = UpdateContext::rule_eval(None);
        ctx.projector = Some(&proj);
        let x = Tensor::zeros(&[3, 2, 2]);
        let err = policy.update(&mut bank, SlotEntry::new(x, 9), &mut ctx).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn eval_update_changes_exactly_one_slot_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bank = filled_bank(5, 4, &mut rng);
        let before: Vec<Tensor<f64>> =
            bank.slots().iter().map(|s| s.template.clone()).collect();
        let mut init = Init::new(3);
        let proj = UpdateKeyProjector::<f64>::new(4, 2, &mut init);
        let x = Tensor::from_fn(&[4, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let mut policy = LearnedPolicy;
        let mut ctx = UpdateContext::rule_eval(None);
        ctx.projector = Some(&proj);
        let decision =
            policy.update(&mut bank, SlotEntry::new(x.clone(), 10), &mut ctx).unwrap().unwrap();

        let mut changed = 0;
        for (i, slot) in bank.slots().iter().enumerate() {
            if i == decision.victim {
                assert!(slot.template.bit_eq(&x), "victim must hold the new template bitwise");
                changed += 1;
            } else {
                assert!(slot.template.bit_eq(&before[i]), "slot {} must be untouched", i);
            }
        }
        assert_eq!(changed, 1);
        assert!(decision.eligible[decision.victim]);
    }

    #[test]
    fn train_mode_soft_hard_argmax_agree_and_values_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bank = filled_bank(4, 3, &mut rng);
        let before: Vec<Tensor<f64>> =
            bank.slots().iter().map(|s| s.template.clone()).collect();
        let mut init = Init::new(7);
        let proj = UpdateKeyProjector::<f64>::new(3, 2, &mut init);
        let x = Tensor::from_fn(&[3, 2, 2], |_| rng.gen_range(-1.0..1.0));

        let mut policy = LearnedPolicy;
        let mut gumbel = GumbelNoise::new(77);
        let mut ctx = UpdateContext::rule_eval(None);
        ctx.mode = Mode::Train;
        ctx.projector = Some(&proj);
        ctx.gumbel = Some(&mut gumbel);
        let decision =
            policy.update(&mut bank, SlotEntry::new(x.clone(), 11), &mut ctx).unwrap().unwrap();

        // forward argmax of hard equals argmax of soft under the same noise
        let soft_arg = argmax_lowest(&decision.soft);
        assert_eq!(soft_arg, decision.victim);

        for (i, slot) in bank.slots().iter().enumerate() {
            if i == decision.victim {
                assert!(slot.template.value_eq(&x), "victim value-identical to x_new");
                assert_eq!(slot.frame_index, 11);
            } else {
                assert!(slot.template.value_eq(&before[i]), "slot {} value-identical", i);
            }
        }
    }
}
