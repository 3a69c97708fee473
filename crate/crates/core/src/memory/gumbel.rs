//! Gumbel-Softmax over the eligible memory slots.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

/// Seeded Gumbel(0,1) source. Kept separate from the rule-policy RNG so
/// learned and rule runs stay comparable under one seed.
pub struct GumbelNoise {
    rng: ChaCha8Rng,
}

impl GumbelNoise {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x6B11);
        GumbelNoise { rng }
    }

    pub fn sample<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        (0..n)
            .map(|_| {
                let u: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
                T::from_f64(-(-u.ln()).ln())
            })
            .collect()
    }
}

/// Softmax of `(s_i + g_i)/τ` normalized over the eligible indices only;
/// ineligible entries come out exactly zero. Differentiable w.r.t. the
/// scores. Zero noise (`g = 0`) gives the deterministic evaluation form.
pub fn gumbel_softmax<T: Scalar>(
    scores: &Tensor<T>,
    noise: &[T],
    tau: T,
    eligible: &[bool],
) -> Result<Tensor<T>> {
    if tau <= T::zero() {
        return Err(Error::Config(format!("gumbel temperature must be positive, got {}", tau)));
    }
    let n = scores.len();
    if scores.rank() != 1 || noise.len() != n || eligible.len() != n {
        return Err(Error::dim(
            "gumbel_softmax",
            format!(
                "scores {:?}, {} noise values, {} mask entries",
                scores.shape(),
                noise.len(),
                eligible.len()
            ),
        ));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| eligible[i]).collect();
    if idx.is_empty() {
        return Err(Error::Config("no eligible slots to normalize over".into()));
    }
    let noise_t = Tensor::from_vec(&[n], noise.to_vec())?;
    let shifted = ops::add(scores, &noise_t)?;
    let scaled = ops::scale_const(&shifted, T::one() / tau);
    let picked = ops::gather(&scaled, &idx)?;
    let soft = ops::softmax_last(&picked);
    ops::scatter(&soft, &idx, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_direct_evaluation() {
        let s = Tensor::<f64>::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let a = gumbel_softmax(&s, &[0.0, 0.0], 1.0, &[true, true]).unwrap();
        assert!((a.data()[0] - 0.73106).abs() < 1e-5);
        assert!((a.data()[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn equal_scores_give_uniform_over_eligible() {
        let s = Tensor::<f64>::from_vec(&[4], vec![0.3, 0.3, 0.3, 0.3]).unwrap();
        let a = gumbel_softmax(&s, &[0.0; 4], 1.0, &[false, true, true, false]).unwrap();
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(a.data()[3], 0.0);
        assert!((a.data()[1] - 0.5).abs() < 1e-12);
        assert!((a.data()[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_sharpens_to_argmax() {
        let s = Tensor::<f64>::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let a = gumbel_softmax(&s, &[0.0, 0.0], 1e-3, &[true, true]).unwrap();
        assert!((a.data()[0] - 1.0).abs() < 1e-6);
        assert!(a.data()[1] < 1e-6);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let s = Tensor::<f64>::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        assert!(gumbel_softmax(&s, &[0.0, 0.0], 0.0, &[true, true]).is_err());
        assert!(gumbel_softmax(&s, &[0.0, 0.0], -1.0, &[true, true]).is_err());
    }

    #[test]
    fn noise_stream_is_seed_deterministic() {
        let a: Vec<f64> = GumbelNoise::new(9).sample(8);
        let b: Vec<f64> = GumbelNoise::new(9).sample(8);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }
}
