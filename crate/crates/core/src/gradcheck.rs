//! Finite-difference gradient checking.
//!
//! `grad_check` compares reverse-mode gradients of a scalar-valued function
//! against central differences (step 1e-5) at 64-bit precision and reports
//! the max relative error over all input coordinates:
//! `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{GradientTape, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Outcome for one checked function.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    /// Set when an analytic or numeric gradient came out non-finite.
    pub non_finite_at: Option<(usize, usize)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite_at.is_none() && self.max_rel_err < tol
    }
}

/// Check `f`'s reverse-mode gradient w.r.t. every coordinate of `inputs`.
///
/// `f` receives the tape plus tape-tracked clones of the inputs and must
/// return a scalar. It is called many times (2 per coordinate) for the
/// numeric side, so keep shapes small.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradCheck>
where
    F: Fn(&GradientTape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tape = GradientTape::new();
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.var(t)).collect();
    let loss = f(&tape, &tracked)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = tracked.iter().map(|t| grads.wrt_or_zeros(t)).collect();

    // numeric side runs untracked: ops behave identically without a tape,
    // and a straight-through node can expose its soft path to the probe by
    // branching on `is_tracked`
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let t = GradientTape::new();
        Ok(f(&t, pts)?.value())
    };

    let mut worst = (0usize, 0usize);
    let mut max_rel = 0.0f64;
    let mut non_finite = None;
    for (ii, input) in inputs.iter().enumerate() {
        for ci in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[ii] = perturb(input, ci, FD_STEP);
            minus[ii] = perturb(input, ci, -FD_STEP);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let a = analytic[ii].data()[ci];
            if !a.is_finite() || !numeric.is_finite() {
                non_finite = Some((ii, ci));
                continue;
            }
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel > max_rel {
                max_rel = rel;
                worst = (ii, ci);
            }
        }
    }
    Ok(GradCheck { max_rel_err: max_rel, worst, non_finite_at: non_finite })
}

fn perturb(t: &Tensor<f64>, coord: usize, delta: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[coord] += delta;
    Tensor::from_vec(t.shape(), data).expect("same shape")
}

/// Uniform values in [-1, 1), deterministic per seed.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One row of the operation-level suite.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl SuiteEntry {
    fn from_check(name: &str, check: GradCheck, tol: f64) -> Self {
        SuiteEntry {
            name: name.to_string(),
            max_rel_err: check.max_rel_err,
            tolerance: tol,
            pass: check.passes(tol),
        }
    }
}

/// Run `grad_check` for one named case and push the row.
pub fn suite_case<F>(
    rows: &mut Vec<SuiteEntry>,
    name: &str,
    tol: f64,
    inputs: &[Tensor<f64>],
    f: F,
) where
    F: Fn(&GradientTape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    match grad_check(f, inputs) {
        Ok(check) => rows.push(SuiteEntry::from_check(name, check, tol)),
        Err(e) => rows.push(SuiteEntry {
            name: format!("{} (error: {})", name, e),
            max_rel_err: f64::INFINITY,
            tolerance: tol,
            pass: false,
        }),
    }
}

/// The operation-level suite plus composite pipeline checks. Each entry is
/// evaluated on `seeds` random draws; the reported error is the worst.
/// Everything runs at 64-bit with tolerance 1e-5 (1e-6 where noted).
pub fn full_suite(base_seed: u64, seeds: usize) -> Vec<SuiteEntry> {
    use crate::attention::{concat_memory_kv, memory_read, KeyValue, KvRole};
    use crate::memory::gumbel::gumbel_softmax;
    use crate::memory::learned::{LearnedPolicy, UpdateKeyProjector};
    use crate::memory::similarity::similarity;
    use crate::memory::{
        update_memory, FusionModule, MemoryBank, Mode, SlotEntry, UpdateContext,
    };
    use crate::nn::Init;
    use crate::tensor::ops;

    let mut rows = Vec::new();
    let tol = 1e-5;

    // worst-case over `seeds` draws for one case builder
    fn multi<F, G>(
        rows: &mut Vec<SuiteEntry>,
        name: &str,
        tol: f64,
        base_seed: u64,
        seeds: usize,
        make_inputs: G,
        f: F,
    ) where
        F: Fn(&GradientTape<f64>, &[Tensor<f64>]) -> crate::error::Result<Tensor<f64>>,
        G: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    {
        let mut worst = SuiteEntry {
            name: name.to_string(),
            max_rel_err: 0.0,
            tolerance: tol,
            pass: true,
        };
        for s in 0..seeds {
            let mut rng = seeded(base_seed ^ (s as u64).wrapping_mul(0x9E37_79B9));
            let inputs = make_inputs(&mut rng);
            match grad_check(&f, &inputs) {
                Ok(check) => {
                    if check.max_rel_err > worst.max_rel_err {
                        worst.max_rel_err = check.max_rel_err;
                    }
                    worst.pass &= check.passes(tol);
                }
                Err(e) => {
                    worst.name = format!("{} (error: {})", name, e);
                    worst.max_rel_err = f64::INFINITY;
                    worst.pass = false;
                }
            }
        }
        rows.push(worst);
    }

    // weighted-sum readout makes loss gradients non-uniform
    fn dot(t: &Tensor<f64>, seed: u64) -> crate::error::Result<Tensor<f64>> {
        let mut rng = seeded(seed);
        let r = random_tensor(&mut rng, t.shape());
        Ok(ops::sum_all(&ops::mul(t, &r)?))
    }

    // Central differences (step 1e-5) are only meaningful away from the
    // non-smooth set (ReLU kinks, max ties): redraw until the forward pass
    // keeps a safe margin from it.
    fn redraw<G, P>(r: &mut ChaCha8Rng, make: G, safe: P) -> Vec<Tensor<f64>>
    where
        G: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
        P: Fn(&[Tensor<f64>]) -> bool,
    {
        for _ in 0..100 {
            let inputs = make(r);
            if safe(&inputs) {
                return inputs;
            }
        }
        panic!("could not draw inputs away from the non-smooth set");
    }

    // margin of the smallest pairwise gap between a row max and the rest
    fn max_rows_safe(t: &Tensor<f64>, margin: f64) -> bool {
        let cols = *t.shape().last().unwrap();
        let rows = t.len() / cols;
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for &v in row {
                if v > best {
                    second = best;
                    best = v;
                } else if v > second {
                    second = v;
                }
            }
            if cols > 1 && best - second < margin {
                return false;
            }
        }
        true
    }

    fn min_abs(t: &Tensor<f64>) -> f64 {
        t.data().iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()))
    }

    // smallest reverse-mode gradient coordinate of `f` at `inputs`
    fn min_grad_magnitude<F>(f: &F, inputs: &[Tensor<f64>]) -> f64
    where
        F: Fn(&GradientTape<f64>, &[Tensor<f64>]) -> crate::error::Result<Tensor<f64>>,
    {
        let tape = GradientTape::new();
        let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.var(t)).collect();
        let loss = match f(&tape, &tracked) {
            Ok(l) => l,
            Err(_) => return 0.0,
        };
        let grads = match tape.backward(&loss) {
            Ok(g) => g,
            Err(_) => return 0.0,
        };
        tracked
            .iter()
            .map(|t| min_abs(&grads.wrt_or_zeros(t)))
            .fold(f64::INFINITY, f64::min)
    }

    // cosine matrix of the Eq.-(1) chain, for tie checking
    fn cosine_rows(uq: &Tensor<f64>, um: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, w) = (uq.shape()[0], uq.shape()[1], uq.shape()[2]);
        let qn = ops::l2_normalize_channels(uq, 1e-12).unwrap();
        let mn = ops::l2_normalize_channels(um, 1e-12).unwrap();
        let q2 = ops::transpose2d(&ops::reshape(&qn, &[c, h * w]).unwrap()).unwrap();
        let m2 = ops::reshape(&mn, &[c, h * w]).unwrap();
        ops::matmul(&q2, &m2).unwrap()
    }

    multi(&mut rows, "add", tol, base_seed, seeds, |r| vec![random_tensor(r, &[7]), random_tensor(r, &[7])], |_t, i| dot(&ops::add(&i[0], &i[1])?, 3));
    multi(&mut rows, "sub", tol, base_seed, seeds, |r| vec![random_tensor(r, &[7]), random_tensor(r, &[7])], |_t, i| dot(&ops::sub(&i[0], &i[1])?, 4));
    multi(&mut rows, "mul", tol, base_seed, seeds, |r| vec![random_tensor(r, &[7]), random_tensor(r, &[7])], |_t, i| dot(&ops::mul(&i[0], &i[1])?, 5));
    multi(&mut rows, "matmul", tol, base_seed, seeds, |r| vec![random_tensor(r, &[3, 4]), random_tensor(r, &[4, 2])], |_t, i| dot(&ops::matmul(&i[0], &i[1])?, 6));
    multi(&mut rows, "transpose", tol, base_seed, seeds, |r| vec![random_tensor(r, &[3, 5])], |_t, i| dot(&ops::transpose2d(&i[0])?, 7));
    multi(&mut rows, "reshape", tol, base_seed, seeds, |r| vec![random_tensor(r, &[2, 6])], |_t, i| dot(&ops::reshape(&i[0], &[3, 4])?, 8));
    multi(&mut rows, "concat", tol, base_seed, seeds, |r| vec![random_tensor(r, &[2, 3]), random_tensor(r, &[2, 3])], |_t, i| dot(&ops::concat(&[&i[0], &i[1]], 1)?, 9));
    multi(&mut rows, "slice_rows", tol, base_seed, seeds, |r| vec![random_tensor(r, &[4, 3])], |_t, i| dot(&ops::slice_rows(&i[0], 1, 2)?, 10));
    multi(&mut rows, "gather_scatter", tol, base_seed, seeds, |r| vec![random_tensor(r, &[6])], |_t, i| {
        dot(&ops::scatter(&ops::gather(&i[0], &[4, 1, 3])?, &[0, 2, 5], 7)?, 11)
    });
    multi(&mut rows, "scale_by", tol, base_seed, seeds, |r| vec![random_tensor(r, &[1]), random_tensor(r, &[5])], |_t, i| dot(&ops::scale_by(&i[0], &i[1])?, 12));
    multi(&mut rows, "leaky_relu", tol, base_seed, seeds, |r| {
        redraw(r, |r| vec![random_tensor(r, &[9])], |i| min_abs(&i[0]) > 1e-4)
    }, |_t, i| dot(&ops::leaky_relu(&i[0], 0.01), 13));
    multi(&mut rows, "sigmoid", tol, base_seed, seeds, |r| vec![random_tensor(r, &[9])], |_t, i| dot(&ops::sigmoid(&i[0]), 14));
    multi(&mut rows, "tanh", tol, base_seed, seeds, |r| vec![random_tensor(r, &[9])], |_t, i| dot(&ops::tanh(&i[0]), 15));
    multi(&mut rows, "softmax", tol, base_seed, seeds, |r| vec![random_tensor(r, &[3, 5])], |_t, i| dot(&ops::softmax_last(&i[0]), 16));
    multi(&mut rows, "max_last", tol, base_seed, seeds, |r| {
        redraw(r, |r| vec![random_tensor(r, &[4, 5])], |i| max_rows_safe(&i[0], 1e-4))
    }, |_t, i| dot(&ops::max_last(&i[0]), 17));
    multi(&mut rows, "mean_sum", tol, base_seed, seeds, |r| vec![random_tensor(r, &[8])], |_t, i| {
        ops::add(&ops::mean_all(&i[0]), &ops::scale_const(&ops::sum_all(&i[0]), 0.25))
    });
    multi(&mut rows, "l2_normalize", tol, base_seed, seeds, |r| vec![random_tensor(r, &[3, 2, 2])], |_t, i| dot(&ops::l2_normalize_channels(&i[0], 1e-12)?, 18));
    multi(&mut rows, "conv2d_s1", 1e-6, base_seed, seeds, |r| {
        vec![random_tensor(r, &[2, 5, 5]), random_tensor(r, &[3, 2, 3, 3]), random_tensor(r, &[3])]
    }, |_t, i| dot(&ops::conv2d(&i[0], &i[1], &i[2], 1, 1)?, 19));
    multi(&mut rows, "conv2d_s2", 1e-6, base_seed, seeds, |r| {
        vec![random_tensor(r, &[2, 6, 6]), random_tensor(r, &[2, 2, 3, 3]), random_tensor(r, &[2])]
    }, |_t, i| dot(&ops::conv2d(&i[0], &i[1], &i[2], 2, 1)?, 20));
    multi(&mut rows, "bilinear_upsample", tol, base_seed, seeds, |r| vec![random_tensor(r, &[2, 3, 3])], |_t, i| dot(&ops::bilinear_up2(&i[0])?, 21));
    multi(&mut rows, "group_norm", tol, base_seed, seeds, |r| {
        vec![random_tensor(r, &[4, 3, 3]), random_tensor(r, &[4]), random_tensor(r, &[4])]
    }, |_t, i| dot(&ops::group_norm(&i[0], 2, &i[1], &i[2], 1e-5)?, 22));
    multi(&mut rows, "cross_entropy", tol, base_seed, seeds, |r| vec![random_tensor(r, &[3, 2, 2])], |_t, i| {
        ops::cross_entropy_pixel(&i[0], &[0, 2, 1, 1])
    });
    multi(&mut rows, "mse", tol, base_seed, seeds, |r| vec![random_tensor(r, &[6]), random_tensor(r, &[6])], |_t, i| ops::mse(&i[0], &i[1]));
    multi(&mut rows, "mae", tol, base_seed, seeds, |r| {
        redraw(r, |r| vec![random_tensor(r, &[6]), random_tensor(r, &[6])], |i| {
            i[0].data().iter().zip(i[1].data().iter()).all(|(&a, &b)| (a - b).abs() > 1e-4)
        })
    }, |_t, i| ops::mae(&i[0], &i[1]));

    // composite from the op contract battery
    let composite = |_t: &GradientTape<f64>,
                     i: &[Tensor<f64>]|
     -> crate::error::Result<Tensor<f64>> {
        let conv = ops::conv2d(&i[0], &i[1], &i[2], 1, 1)?;
        let gn = ops::group_norm(&conv, 2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5)?;
        let act = ops::leaky_relu(&gn, 0.01);
        ops::cross_entropy_pixel(&act, &[0, 3, 1, 2, 2, 0, 1, 3, 0, 2, 1, 0, 3, 3, 2, 1])
    };
    multi(&mut rows, "conv_gn_leaky_ce", 1e-6, base_seed, seeds, |r| {
        redraw(r, |r| {
            vec![random_tensor(r, &[2, 4, 4]), random_tensor(r, &[4, 2, 3, 3]), random_tensor(r, &[4])]
        }, |i| {
            // away from activation kinks, and with every gradient
            // coordinate above the central-difference noise floor
            let conv = ops::conv2d(&i[0], &i[1], &i[2], 1, 1).unwrap();
            let gn = ops::group_norm(&conv, 2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5)
                .unwrap();
            min_abs(&gn) > 2e-3 && min_grad_magnitude(&composite, i) > 1e-3
        })
    }, composite);

    // Eq.-(1) similarity w.r.t. both key maps
    multi(&mut rows, "similarity_eq1", 1e-6, base_seed, seeds, |r| {
        redraw(r, |r| vec![random_tensor(r, &[3, 2, 2]), random_tensor(r, &[3, 2, 2])], |i| {
            max_rows_safe(&cosine_rows(&i[0], &i[1]), 1e-4)
        })
    }, |_t, i| similarity(&i[0], &i[1]));

    // Gumbel-Softmax soft path w.r.t. scores (fixed noise)
    multi(&mut rows, "gumbel_softmax", tol, base_seed, seeds, |r| vec![random_tensor(r, &[5])], |_t, i| {
        let noise = [0.21, -0.4, 0.9, 0.05, -1.2];
        let soft = gumbel_softmax(&i[0], &noise, 1.0, &[false, true, true, true, false])?;
        dot(&soft, 23)
    });

    // straight-through node along its soft path: hard forward, soft backward,
    // with a linear readout so the finite difference of the soft path applies
    multi(&mut rows, "straight_through_soft", tol, base_seed, seeds, |r| vec![random_tensor(r, &[4])], |_t, i| {
        let soft = ops::softmax_last(&i[0]);
        let hard = ops::straight_through(&soft)?;
        let c = Tensor::from_vec(&[4], vec![0.3, -0.8, 1.4, 0.6])?;
        // finite differences must follow the soft path
        let probe = if i[0].is_tracked() { hard } else { soft };
        Ok(ops::sum_all(&ops::mul(&probe, &c)?))
    });

    // dense read w.r.t. query and memory keys/values
    multi(&mut rows, "memory_read_eq5", tol, base_seed, seeds, |r| {
        vec![
            random_tensor(r, &[2, 2, 2]), // q key
            random_tensor(r, &[3, 2, 2]), // q value
            random_tensor(r, &[2, 2, 2]), // slot-a key
            random_tensor(r, &[3, 2, 2]), // slot-a value
            random_tensor(r, &[2, 2, 2]), // slot-b key
            random_tensor(r, &[3, 2, 2]), // slot-b value
        ]
    }, |_t, i| {
        let q = KeyValue { key: i[0].clone(), value: i[1].clone(), role: KvRole::Query };
        let a = KeyValue { key: i[2].clone(), value: i[3].clone(), role: KvRole::Memory };
        let b = KeyValue { key: i[4].clone(), value: i[5].clone(), role: KvRole::Memory };
        let m = concat_memory_kv(&[a, b])?;
        dot(&memory_read(&q, &m, false)?.features, 24)
    });

    // fusion chain w.r.t. both templates
    multi(&mut rows, "fusion_merge", tol, base_seed, seeds, |r| {
        vec![random_tensor(r, &[2, 2, 2]), random_tensor(r, &[2, 2, 2])]
    }, |_t, i| {
        let fusion = FusionModule::<f64>::new(2, &mut Init::new(31));
        dot(&fusion.apply(&i[0], &i[1])?, 25)
    });

    // full soft-path pipeline: update (soft relaxation) -> read -> decode
    multi(&mut rows, "pipeline_update_read_decode", tol, base_seed, seeds, |r| {
        redraw(r, |r| {
            vec![
                random_tensor(r, &[3, 2, 2]), // slot 0 (pinned)
                random_tensor(r, &[3, 2, 2]), // slot 1
                random_tensor(r, &[3, 2, 2]), // slot 2
                random_tensor(r, &[3, 2, 2]), // slot 3 (latest)
                random_tensor(r, &[3, 2, 2]), // incoming template
                random_tensor(r, &[3, 2, 2]), // query feature
            ]
        }, |i| {
            // similarity row-max ties inside the update are the only kinks
            let mut init = Init::new(47);
            let proj = UpdateKeyProjector::<f64>::new(3, 2, &mut init);
            let uq = proj.project(&i[4]).unwrap();
            i[..4].iter().all(|slot| {
                let um = proj.project(slot).unwrap();
                max_rows_safe(&cosine_rows(&uq, &um), 1e-4)
            })
        })
    }, |_t, i| {
        let mut init = Init::new(47);
        let proj = UpdateKeyProjector::<f64>::new(3, 2, &mut init);
        let q_kv = crate::attention::KvProjector::<f64>::new(3, 2, 2, KvRole::Query, &mut init);
        let m_kv = crate::attention::KvProjector::<f64>::new(3, 2, 2, KvRole::Memory, &mut init);
        let head = crate::nn::ConvLayer::<f64>::new(4, 1, 3, 1, 1, &mut init);

        let mut bank = MemoryBank::new(4)?;
        for (t, slot) in i[..4].iter().enumerate() {
            let mut entry = SlotEntry::new(slot.clone(), t);
            entry.pinned = t == 0;
            bank.push(entry)?;
        }
        let mut policy = LearnedPolicy;
        let mut ctx = UpdateContext {
            mode: Mode::SoftRelax,
            tau: 1.0,
            projector: Some(&proj),
            fusion: None,
            gumbel: None,
            policy_rng: None,
            score_override: None,
        };
        update_memory(&mut bank, i[4].clone(), 4, &mut policy, &mut ctx)?;

        let q = q_kv.project(&i[5])?;
        let mut kvs = Vec::new();
        for slot in bank.slots() {
            kvs.push(m_kv.project(&slot.template)?);
        }
        let m = concat_memory_kv(&kvs)?;
        let read = memory_read(&q, &m, false)?;
        let out = ops::sigmoid(&head.forward(&read.features)?);
        dot(&out, 26)
    });

    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn linear_function_is_near_exact() {
        let mut rng = seeded(7);
        let x = random_tensor(&mut rng, &[6]);
        let c = random_tensor(&mut rng, &[6]);
        let check = grad_check(
            |_t, inp| Ok(ops::sum_all(&ops::mul(&inp[0], &c)?)),
            &[x],
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-9, "linear grad err {}", check.max_rel_err);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut rng = seeded(3);
        let x = random_tensor(&mut rng, &[5]);
        let tape = GradientTape::new();
        let xt = tape.var(&x);
        let loss = ops::sum_all(&ops::softmax_last(&xt));
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(&xt).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-12), "{:?}", g.data());
    }

    #[test]
    fn polynomial_matches() {
        let check = grad_check(
            |_t, inp| ops::mul(&inp[0], &inp[0]),
            &[Tensor::scalar(3.0)],
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-9);
    }
}
