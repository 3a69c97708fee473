//! Brute-force reference implementations checked against the engine. The
//! oracles are deliberately naive (nested loops, no shared code with the
//! implementations they test).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stremn_core::attention::{concat_memory_kv, memory_read_with_weights, KeyValue, KvRole};
use stremn_core::memory::similarity;
use stremn_core::tensor::{ops, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(-1.5..1.5))
}

/// Direct summation over every output position and kernel tap.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (win + 2 * pad - k) / stride + 1;
    Tensor::from_fn(&[cout, ho, wo], |idx| {
        let co = idx / (ho * wo);
        let oy = (idx / wo) % ho;
        let ox = idx % wo;
        let mut acc = b.data()[co];
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = oy * stride + ky;
                    let ix = ox * stride + kx;
                    if iy < pad || ix < pad {
                        continue;
                    }
                    let (iy, ix) = (iy - pad, ix - pad);
                    if iy >= h || ix >= win {
                        continue;
                    }
                    acc += x.data()[(ci * h + iy) * win + ix]
                        * w.data()[((co * cin + ci) * k + ky) * k + kx];
                }
            }
        }
        acc
    })
}

#[test]
fn conv2d_matches_loop_oracle_small_shapes_exhaustively() {
    let mut r = rng(100);
    let mut cases = 0;
    for cin in 1..=4usize {
        for cout in [1usize, 3, 4] {
            for k in [1usize, 3] {
                for h in k..=8usize {
                    for w in [k, k + 1, 8usize] {
                        if w < k {
                            continue;
                        }
                        for stride in [1usize, 2] {
                            for pad in [0usize, (k - 1) / 2, 1] {
                                if h + 2 * pad < k || w + 2 * pad < k {
                                    continue;
                                }
                                let x = rand_t(&mut r, &[cin, h, w]);
                                let wt = rand_t(&mut r, &[cout, cin, k, k]);
                                let b = rand_t(&mut r, &[cout]);
                                let got = ops::conv2d(&x, &wt, &b, stride, pad).unwrap();
                                let want = conv_oracle(&x, &wt, &b, stride, pad);
                                assert_eq!(got.shape(), want.shape());
                                assert!(
                                    got.linf_diff(&want) < 1e-12,
                                    "cin={} cout={} k={} h={} w={} s={} p={}",
                                    cin,
                                    cout,
                                    k,
                                    h,
                                    w,
                                    stride,
                                    pad
                                );
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(cases > 500, "exhaustive battery ran {} cases", cases);
}

/// Triple loop over (p, q, channel) with explicit cosine.
fn similarity_oracle(q: &Tensor<f64>, m: &Tensor<f64>) -> f64 {
    let (c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let hw = h * w;
    let pix = |t: &Tensor<f64>, ch: usize, p: usize| t.data()[ch * hw + p];
    let mut total = 0.0;
    for p in 0..hw {
        let mut best = f64::NEG_INFINITY;
        for qq in 0..hw {
            let mut dot = 0.0;
            let mut nq = 0.0;
            let mut nm = 0.0;
            for ch in 0..c {
                let a = pix(q, ch, p);
                let b = pix(m, ch, qq);
                dot += a * b;
                nq += a * a;
                nm += b * b;
            }
            let cos = dot / ((nq + 1e-12).sqrt() * (nm + 1e-12).sqrt());
            if cos > best {
                best = cos;
            }
        }
        total += best;
    }
    total / hw as f64
}

#[test]
fn similarity_matches_triple_loop_oracle_200_instances() {
    let mut r = rng(200);
    for i in 0..200 {
        let c = r.gen_range(1..=4);
        let h = r.gen_range(1..=4);
        let w = r.gen_range(1..=4);
        let uq = rand_t(&mut r, &[c, h, w]);
        let um = rand_t(&mut r, &[c, h, w]);
        let got = similarity(&uq, &um).unwrap().value();
        let want = similarity_oracle(&uq, &um);
        assert!(
            (got - want).abs() < 1e-12,
            "instance {}: {} vs {} (c={} h={} w={})",
            i,
            got,
            want,
            c,
            h,
            w
        );
        assert!((-1.0..=1.0).contains(&got), "similarity out of range: {}", got);
    }
}

/// Double loop over query pixels and memory positions.
fn read_oracle(
    qk: &Tensor<f64>,
    qv: &Tensor<f64>,
    slots: &[(Tensor<f64>, Tensor<f64>)],
) -> Vec<f64> {
    let (dk, h, w) = (qk.shape()[0], qk.shape()[1], qk.shape()[2]);
    let dv = qv.shape()[0];
    let hw = h * w;
    let mut mem_keys: Vec<Vec<f64>> = Vec::new();
    let mut mem_vals: Vec<Vec<f64>> = Vec::new();
    for (k, v) in slots {
        for p in 0..hw {
            mem_keys.push((0..dk).map(|c| k.data()[c * hw + p]).collect());
            mem_vals.push((0..dv).map(|c| v.data()[c * hw + p]).collect());
        }
    }
    let mut out = vec![0.0; 2 * dv * hw];
    for i in 0..hw {
        let qki: Vec<f64> = (0..dk).map(|c| qk.data()[c * hw + i]).collect();
        let logits: Vec<f64> = mem_keys
            .iter()
            .map(|mk| mk.iter().zip(qki.iter()).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for c in 0..dv {
            let mut acc = 0.0;
            for (j, mv) in mem_vals.iter().enumerate() {
                acc += exps[j] / z * mv[c];
            }
            out[c * hw + i] = acc;
            out[(dv + c) * hw + i] = qv.data()[c * hw + i];
        }
    }
    out
}

#[test]
fn memory_read_matches_double_loop_oracle_200_instances() {
    let mut r = rng(300);
    for i in 0..200 {
        let dk = r.gen_range(1..=3);
        let dv = r.gen_range(1..=3);
        let h = r.gen_range(1..=3);
        let w = r.gen_range(1..=3);
        let slots_n = r.gen_range(1..=3);
        let qk = rand_t(&mut r, &[dk, h, w]);
        let qv = rand_t(&mut r, &[dv, h, w]);
        let slots: Vec<(Tensor<f64>, Tensor<f64>)> = (0..slots_n)
            .map(|_| (rand_t(&mut r, &[dk, h, w]), rand_t(&mut r, &[dv, h, w])))
            .collect();

        let q = KeyValue { key: qk.clone(), value: qv.clone(), role: KvRole::Query };
        let kvs: Vec<KeyValue<f64>> = slots
            .iter()
            .map(|(k, v)| KeyValue { key: k.clone(), value: v.clone(), role: KvRole::Memory })
            .collect();
        let m = concat_memory_kv(&kvs).unwrap();
        let (read, weights) = memory_read_with_weights(&q, &m, false).unwrap();

        let want = read_oracle(&qk, &qv, &slots);
        let got = read.features.data();
        let mut max_diff = 0.0f64;
        for (a, b) in got.iter().zip(want.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
        assert!(max_diff < 1e-10, "instance {}: read deviates by {}", i, max_diff);

        let p = m.positions();
        for row in 0..h * w {
            let s: f64 = weights.data()[row * p..(row + 1) * p].iter().sum();
            assert!((s - 1.0).abs() < 1e-7, "weights row {} sums to {}", row, s);
        }
    }
}

#[test]
fn memory_read_invariant_under_slot_permutation() {
    let mut r = rng(400);
    for _ in 0..20 {
        let q = KeyValue {
            key: rand_t(&mut r, &[3, 2, 2]),
            value: rand_t(&mut r, &[2, 2, 2]),
            role: KvRole::Query,
        };
        let slots: Vec<KeyValue<f64>> = (0..4)
            .map(|_| KeyValue {
                key: rand_t(&mut r, &[3, 2, 2]),
                value: rand_t(&mut r, &[2, 2, 2]),
                role: KvRole::Memory,
            })
            .collect();
        let base =
            memory_read_with_weights(&q, &concat_memory_kv(&slots).unwrap(), false).unwrap().0;
        let permuted: Vec<KeyValue<f64>> =
            [2usize, 0, 3, 1].iter().map(|&i| slots[i].clone()).collect();
        let shuffled =
            memory_read_with_weights(&q, &concat_memory_kv(&permuted).unwrap(), false).unwrap().0;
        assert!(
            base.features.linf_diff(&shuffled.features) < 1e-10,
            "slot order must not be observable"
        );
    }
}

#[test]
fn shifting_one_query_pixels_logits_leaves_output_unchanged() {
    // memory keys carry a constant channel 0, so bumping channel 0 of one
    // query-key pixel adds the same constant to all of that pixel's logits
    let mut r = rng(500);
    let mk_key = |r: &mut ChaCha8Rng| {
        Tensor::from_fn(&[3, 2, 2], |i| if i < 4 { 1.0 } else { r.gen_range(-1.0..1.0) })
    };
    let slots: Vec<KeyValue<f64>> = (0..3)
        .map(|_| KeyValue {
            key: mk_key(&mut r),
            value: rand_t(&mut r, &[2, 2, 2]),
            role: KvRole::Memory,
        })
        .collect();
    let m = concat_memory_kv(&slots).unwrap();

    let qkey = rand_t(&mut r, &[3, 2, 2]);
    let qval = rand_t(&mut r, &[2, 2, 2]);
    let mut bumped = qkey.data().to_vec();
    bumped[2] += 17.5; // channel 0, pixel 2
    let qkey_bumped = Tensor::from_vec(&[3, 2, 2], bumped).unwrap();

    let base = memory_read_with_weights(
        &KeyValue { key: qkey, value: qval.clone(), role: KvRole::Query },
        &m,
        false,
    )
    .unwrap()
    .0;
    let shifted = memory_read_with_weights(
        &KeyValue { key: qkey_bumped, value: qval, role: KvRole::Query },
        &m,
        false,
    )
    .unwrap()
    .0;
    assert!(base.features.linf_diff(&shifted.features) < 1e-9);
}
