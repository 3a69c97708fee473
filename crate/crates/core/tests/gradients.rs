//! Finite-difference validation of every differentiable operation and the
//! composite pipelines, at 64-bit over 5 random seeds.

use stremn_core::gradcheck::{full_suite, grad_check, random_tensor, seeded};
use stremn_core::memory::similarity;

#[test]
fn operation_suite_passes_at_1e5() {
    let rows = full_suite(0xBEEF, 5);
    let mut failed = Vec::new();
    for row in &rows {
        println!(
            "{:<32} max_rel_err {:>12.3e}  tol {:>8.0e}  {}",
            row.name,
            row.max_rel_err,
            row.tolerance,
            if row.pass { "pass" } else { "FAIL" }
        );
        if !row.pass {
            failed.push(row.name.clone());
        }
    }
    assert!(failed.is_empty(), "gradient suite failures: {:?}", failed);
    assert!(rows.len() >= 25, "suite should cover all ops, got {} rows", rows.len());
}

#[test]
fn similarity_gradient_wrt_both_maps_below_1e6() {
    for seed in 0..5u64 {
        let mut rng = seeded(1000 + seed);
        let uq = random_tensor(&mut rng, &[3, 2, 2]);
        let um = random_tensor(&mut rng, &[3, 2, 2]);
        let check = grad_check(|_t, i| similarity(&i[0], &i[1]), &[uq, um]).unwrap();
        assert!(check.max_rel_err < 1e-6, "seed {}: {}", seed, check.max_rel_err);
    }
}

#[test]
fn grad_check_reports_worst_coordinate() {
    let mut rng = seeded(7);
    let x = random_tensor(&mut rng, &[4]);
    let check = grad_check(
        |_t, i| {
            let y = stremn_core::tensor::ops::tanh(&i[0]);
            Ok(stremn_core::tensor::ops::mean_all(&y))
        },
        &[x],
    )
    .unwrap();
    assert!(check.non_finite_at.is_none());
    assert!(check.worst.0 == 0 && check.worst.1 < 4);
}
