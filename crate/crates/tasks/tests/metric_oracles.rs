//! Naive direct-summation SSIM oracle vs. the separable implementation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stremn_core::tensor::Tensor;
use stremn_tasks::metrics::{ssim_frame, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};

/// Direct 2-D windowed sums at every valid center, no separability, no
/// shared code with the implementation.
fn ssim_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let half = (SSIM_WINDOW / 2) as isize;
    let mut kernel = vec![0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let mut ksum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            kernel[((dy + half) * (2 * half + 1) + dx + half) as usize] = v;
            ksum += v;
        }
    }
    for v in kernel.iter_mut() {
        *v /= ksum;
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pix = |img: &Tensor<f32>, y: isize, x: isize| -> f64 {
            img.data()[ch * h * w + y as usize * w + x as usize] as f64
        };
        for cy in half..h as isize - half {
            for cx in half..w as isize - half {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let k = kernel[((dy + half) * (2 * half + 1) + dx + half) as usize];
                        let va = pix(a, cy + dy, cx + dx);
                        let vb = pix(b, cy + dy, cx + dx);
                        mu_a += k * va;
                        mu_b += k * vb;
                        aa += k * va * va;
                        bb += k * vb * vb;
                        ab += k * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_direct_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for case in 0..8 {
        let h = rng.gen_range(SSIM_WINDOW..24);
        let w = rng.gen_range(SSIM_WINDOW..24);
        let a = Tensor::<f32>::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0));
        let b = Tensor::<f32>::from_fn(&[3, h, w], |i| {
            (a.data()[i] + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0)
        });
        let got = ssim_frame(&a, &b).unwrap();
        let want = ssim_oracle(&a, &b);
        assert!(
            (got - want).abs() < 1e-8,
            "case {} ({}x{}): {} vs {}",
            case,
            h,
            w,
            got,
            want
        );
    }
}

#[test]
fn ssim_self_is_one_for_any_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..4 {
        let x = Tensor::<f32>::from_fn(&[3, 16, 20], |_| rng.gen_range(0.0..1.0));
        let s = ssim_frame(&x, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "SSIM(x,x) = {}", s);
    }
}
