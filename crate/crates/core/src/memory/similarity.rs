//! Deformable template similarity: every query pixel may match any memory
//! pixel, so the score tolerates object motion between templates.
//!
//! `s = (1/HW) · Σ_p max_q cos(u_q(p), u_m(q))` with an eps guard so
//! zero-norm pixels contribute cosine 0.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{chw, ops, Tensor};

pub const NORM_EPS: f64 = 1e-12;

/// Scalar similarity in [-1, 1] between two key maps of identical shape.
/// Differentiable w.r.t. both inputs (the max routes its subgradient to
/// the best-matching pixel, ties to the lowest index).
pub fn similarity<T: Scalar>(u_q: &Tensor<T>, u_m: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(u_q, "similarity")?;
    let (c2, h2, w2) = chw(u_m, "similarity")?;
    if (c, h, w) != (c2, h2, w2) {
        return Err(Error::dim(
            "similarity",
            format!("{:?} vs {:?}", u_q.shape(), u_m.shape()),
        ));
    }
    let eps = T::from_f64(NORM_EPS);
    let qn = ops::l2_normalize_channels(u_q, eps)?;
    let mn = ops::l2_normalize_channels(u_m, eps)?;
    let q2 = ops::transpose2d(&ops::reshape(&qn, &[c, h * w])?)?; // HW × C
    let m2 = ops::reshape(&mn, &[c, h * w])?; // C × HW
    let cos = ops::matmul(&q2, &m2)?; // HW × HW, cos[p][q]
    let best = ops::max_last(&cos); // HW
    Ok(ops::mean_all(&best))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(shape: &[usize], vals: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, vals).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let u = map(&[2, 2, 2], vec![0.5, -1.0, 2.0, 0.3, 1.1, 0.2, -0.4, 0.9]);
        let s = similarity(&u, &u).unwrap().value();
        assert!((s - 1.0).abs() < 1e-9, "self-similarity {}", s);
    }

    #[test]
    fn orthogonal_maps_score_zero() {
        // channel-0-only query pixels vs channel-1-only memory pixels
        let q = map(&[2, 1, 2], vec![1.0, 2.0, 0.0, 0.0]);
        let m = map(&[2, 1, 2], vec![0.0, 0.0, 3.0, 0.5]);
        let s = similarity(&q, &m).unwrap().value();
        assert!(s.abs() < 1e-12, "orthogonal similarity {}", s);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let q = map(&[2, 2, 1], vec![0.4, -0.7, 1.3, 0.1]);
        let m = map(&[2, 2, 1], vec![-0.2, 0.9, 0.5, 1.7]);
        let base = similarity(&q, &m).unwrap().value();
        // the eps guard perturbs tiny norms, so tolerance loosens as the
        // scale shrinks; the score (and hence any argmax) is stable
        for (scale, tol) in [(0.5, 1e-9), (3.0, 1e-9), (250.0, 1e-9), (0.01, 1e-6)] {
            let qs = crate::tensor::ops::scale_const(&q, scale);
            let ms = crate::tensor::ops::scale_const(&m, 7.5);
            let s = similarity(&qs, &ms).unwrap().value();
            assert!((s - base).abs() < tol, "scale {} changed score by {}", scale, (s - base).abs());
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let q = Tensor::<f64>::zeros(&[2, 2, 2]);
        let m = Tensor::<f64>::zeros(&[2, 2, 3]);
        assert!(similarity(&q, &m).is_err());
    }
}
