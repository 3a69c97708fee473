//! Rule policies vs. explicit reference semantics, plus the statistical
//! properties of the stochastic ones.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stremn_core::memory::{
    create_policy, update_memory, GumbelNoise, MemoryBank, Mode, PolicyKind, UpdateContext,
    UpdateKeyProjector,
};
use stremn_core::nn::Init;
use stremn_core::tensor::Tensor;

fn tmpl(v: f64) -> Tensor<f64> {
    Tensor::from_fn(&[2, 1, 1], |i| v * 0.37 + i as f64)
}

/// Drive one rule policy over `frames` insertions; returns slot frame
/// indices sorted.
fn run_policy(kind: PolicyKind, frames: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut bank = MemoryBank::new(k).unwrap();
    let mut policy = create_policy::<f64>(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..frames {
        let mut ctx = UpdateContext::rule_eval(Some(&mut rng));
        update_memory(&mut bank, tmpl(t as f64), t, policy.as_mut(), &mut ctx).unwrap();
    }
    let mut out = bank.frame_indices();
    out.sort_unstable();
    out
}

/// Queue reference: pinned frame 0 plus a FIFO of the rest.
fn queue_reference(frames: usize, k: usize) -> Vec<usize> {
    let mut q: VecDeque<usize> = VecDeque::new();
    for t in 1..frames {
        q.push_back(t);
        if q.len() > k - 1 {
            q.pop_front();
        }
    }
    let mut out: Vec<usize> = q.into_iter().collect();
    if frames > 0 {
        out.push(0);
    }
    out.sort_unstable();
    out
}

/// Stack reference: pinned frame 0, first K-2 pushed frames, then churn on
/// the top element.
fn stack_reference(frames: usize, k: usize) -> Vec<usize> {
    let mut s: Vec<usize> = Vec::new();
    for t in 1..frames {
        if s.len() < k - 1 {
            s.push(t);
        } else {
            *s.last_mut().unwrap() = t;
        }
    }
    if frames > 0 {
        s.push(0);
    }
    s.sort_unstable();
    s
}

/// First/last reference.
fn first_last_reference(frames: usize) -> Vec<usize> {
    match frames {
        0 => vec![],
        1 => vec![0],
        n => vec![0, n - 1],
    }
}

#[test]
fn rules_match_reference_semantics_on_1000_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..1000 {
        let k = rng.gen_range(3..=8);
        let frames = rng.gen_range(1..=30);
        let seed = rng.gen::<u64>();
        assert_eq!(
            run_policy(PolicyKind::Oldest, frames, k, seed),
            queue_reference(frames, k),
            "queue mismatch: case {} frames {} k {}",
            case,
            frames,
            k
        );
        assert_eq!(
            run_policy(PolicyKind::Newest, frames, k, seed),
            stack_reference(frames, k),
            "stack mismatch: case {} frames {} k {}",
            case,
            frames,
            k
        );
        assert_eq!(
            run_policy(PolicyKind::FirstLast, frames, k, seed),
            first_last_reference(frames),
            "first-last mismatch: case {} frames {} k {}",
            case,
            frames,
            k
        );
    }
}

#[test]
fn reservoir_inclusion_frequencies_uniform_within_3_sigma() {
    let k = 6;
    let frames = 12; // intermediates 1..=10, latest 11, pinned 0
    let trials = 10_000;
    let mut counts = vec![0u32; frames];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..trials {
        let seed = rng.gen::<u64>();
        let kept = run_policy(PolicyKind::RandomSelect, frames, k, seed);
        for f in kept {
            if f != 0 && f != frames - 1 {
                counts[f] += 1;
            }
        }
    }
    let p = (k - 2) as f64 / (frames - 2) as f64;
    let expected = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for f in 1..frames - 1 {
        let dev = (counts[f] as f64 - expected).abs();
        assert!(
            dev <= 3.0 * sigma,
            "frame {} included {} times, expected {:.0} ± {:.0}",
            f,
            counts[f],
            expected,
            3.0 * sigma
        );
    }
}

#[test]
fn capacity_is_min_t_k_up_to_10_000_updates() {
    let k = 6;
    let mut bank = MemoryBank::new(k).unwrap();
    let mut policy = create_policy::<f64>(PolicyKind::Oldest);
    let mut peak = 0;
    for t in 0..10_000 {
        let mut ctx = UpdateContext::rule_eval(None);
        update_memory(&mut bank, tmpl((t % 97) as f64), t, policy.as_mut(), &mut ctx).unwrap();
        peak = peak.max(bank.len());
        assert_eq!(bank.len(), (t + 1).min(k));
    }
    assert_eq!(peak, k);
}

#[test]
fn learned_eval_never_evicts_pinned_or_latest_over_10_000_updates() {
    let mut init = Init::new(9);
    let proj = UpdateKeyProjector::<f64>::new(2, 2, &mut init);
    let mut data_rng = ChaCha8Rng::seed_from_u64(11);
    let k = 5;

    let mut bank = MemoryBank::new(k).unwrap();
    let mut policy = create_policy::<f64>(PolicyKind::Learned);
    // fill
    for t in 0..k {
        let x = Tensor::from_fn(&[2, 2, 2], |_| data_rng.gen_range(-1.0..1.0));
        let mut ctx = UpdateContext::rule_eval(None);
        ctx.projector = Some(&proj);
        update_memory(&mut bank, x, t, policy.as_mut(), &mut ctx).unwrap();
    }
    let mut violations = 0;
    for t in k..k + 10_000 {
        let pinned_slots: Vec<usize> = bank
            .slots()
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.pinned.then_some(i))
            .collect();
        let newest_slot = bank.newest_slot().unwrap();
        let newest_frame = bank.slot(newest_slot).frame_index;

        let x = Tensor::from_fn(&[2, 2, 2], |_| data_rng.gen_range(-1.0..1.0));
        let mut ctx = UpdateContext::rule_eval(None);
        ctx.projector = Some(&proj);
        let decision =
            update_memory(&mut bank, x, t, policy.as_mut(), &mut ctx).unwrap().unwrap();

        if pinned_slots.contains(&decision.victim) || decision.victim == newest_slot {
            violations += 1;
        }
        // pinned entry and the previously newest frame both survived
        assert!(bank.slots().iter().any(|s| s.pinned && s.frame_index == 0));
        assert!(bank.frame_indices().contains(&newest_frame));
    }
    assert_eq!(violations, 0);
}

#[test]
fn train_mode_argmax_consistent_between_soft_and_hard() {
    let mut init = Init::new(21);
    let proj = UpdateKeyProjector::<f64>::new(2, 2, &mut init);
    let mut data_rng = ChaCha8Rng::seed_from_u64(13);
    let mut gumbel = GumbelNoise::new(5);
    let k = 5;

    for _ in 0..200 {
        let mut bank = MemoryBank::new(k).unwrap();
        let mut policy = create_policy::<f64>(PolicyKind::Learned);
        for t in 0..k {
            let x = Tensor::from_fn(&[2, 2, 2], |_| data_rng.gen_range(-1.0..1.0));
            let mut ctx = UpdateContext::rule_eval(None);
            ctx.projector = Some(&proj);
            update_memory(&mut bank, x, t, policy.as_mut(), &mut ctx).unwrap();
        }
        let x = Tensor::from_fn(&[2, 2, 2], |_| data_rng.gen_range(-1.0..1.0));
        let mut ctx = UpdateContext::rule_eval(None);
        ctx.mode = Mode::Train;
        ctx.projector = Some(&proj);
        ctx.gumbel = Some(&mut gumbel);
        let d = update_memory(&mut bank, x, k, policy.as_mut(), &mut ctx).unwrap().unwrap();

        let soft_argmax = d
            .soft
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let hard_argmax = d
            .hard
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        assert_eq!(soft_argmax, hard_argmax);
        assert_eq!(d.victim, hard_argmax);

        // soft weights form a simplex over the eligible entries
        let sum: f64 = d.soft.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for (i, &e) in d.eligible.iter().enumerate() {
            if !e {
                assert_eq!(d.soft[i], 0.0);
            }
        }
    }
}
