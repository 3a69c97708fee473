//! Optional slot-fusion module (off by default).
//!
//! Before a selected template is deleted, its content can be merged into
//! another slot: the pair is aligned pixel-to-pixel with a softmax
//! attention map, an input filter `r` gates the outgoing template, and an
//! update gate `z` blends the aligned content into the target slot. Kept
//! behind a flag; enabling it reproduces the published no-change result
//! rather than an improvement.

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, HasParams, Init};
use crate::scalar::Scalar;
use crate::tensor::{chw, ops, Tensor};

/// Three small convolutional nets `f`, `h`, `g` over concatenated channel
/// pairs (2C -> C each).
#[derive(Clone)]
pub struct FusionModule<T: Scalar> {
    pub f: ConvLayer<T>,
    pub h: ConvLayer<T>,
    pub g: ConvLayer<T>,
}

impl<T: Scalar> FusionModule<T> {
    pub fn new(channels: usize, init: &mut Init) -> Self {
        let f = ConvLayer::new(2 * channels, channels, 3, 1, 1, init);
        let mut h = ConvLayer::new(2 * channels, channels, 3, 1, 1, init);
        let g = ConvLayer::new(2 * channels, channels, 3, 1, 1, init);
        // carry-biased update gate: start close to the identity blend
        h.bias = Tensor::full(&[channels], T::from_f64(-2.0));
        FusionModule { f, h, g }
    }

    /// Feature alignment: pixels of `src` attend over pixels of `tgt`
    /// (`softmax(src·tgtᵀ)·tgt` over flattened pixels).
    pub fn align(src: &Tensor<T>, tgt: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = chw(src, "fusion_align")?;
        if tgt.shape() != src.shape() {
            return Err(Error::dim(
                "fusion_align",
                format!("{:?} vs {:?}", src.shape(), tgt.shape()),
            ));
        }
        let p = h * w;
        let s2 = ops::transpose2d(&ops::reshape(src, &[c, p])?)?; // P×C
        let t2 = ops::transpose2d(&ops::reshape(tgt, &[c, p])?)?; // P×C
        let logits = ops::matmul(&s2, &ops::transpose2d(&t2)?)?; // P×P
        let attn = ops::softmax_last(&logits);
        let aligned = ops::matmul(&attn, &t2)?; // P×C
        ops::reshape(&ops::transpose2d(&aligned)?, &[c, h, w])
    }

    /// Gated blend `(1-z)⊙x_j + z⊙candidate`.
    pub fn gated_blend(x_j: &Tensor<T>, candidate: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let keep = ops::mul(&ops::one_minus(z), x_j)?;
        let take = ops::mul(z, candidate)?;
        ops::add(&keep, &take)
    }

    /// Merge the to-be-deleted template `x_i` into target `x_j`, returning
    /// the updated target.
    pub fn apply(&self, x_i: &Tensor<T>, x_j: &Tensor<T>) -> Result<Tensor<T>> {
        let xa_j = Self::align(x_i, x_j)?;
        let r = ops::sigmoid(&self.f.forward(&ops::concat(&[x_i, &xa_j], 0)?)?);
        let x_i_filtered = ops::mul(&r, x_i)?;
        let xa_i = Self::align(x_j, &x_i_filtered)?;
        let gates_in = ops::concat(&[&xa_i, x_j], 0)?;
        let z = ops::sigmoid(&self.h.forward(&gates_in)?);
        let candidate = ops::tanh(&self.g.forward(&gates_in)?);
        Self::gated_blend(x_j, &candidate, &z)
    }
}

impl<T: Scalar> HasParams<T> for FusionModule<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.f.visit(&crate::nn::join(prefix, "f"), f);
        self.h.visit(&crate::nn::join(prefix, "h"), f);
        self.g.visit(&crate::nn::join(prefix, "g"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.f.visit_mut(&crate::nn::join(prefix, "f"), f);
        self.h.visit_mut(&crate::nn::join(prefix, "h"), f);
        self.g.visit_mut(&crate::nn::join(prefix, "g"), f);
    }
}

/// Replace slot `target` with the fusion of slot `deleted` into it. Errors
/// with an unsupported-operation error when the module is not enabled.
pub fn fusion_update<T: Scalar>(
    bank: &mut crate::memory::MemoryBank<T>,
    deleted: usize,
    target: usize,
    fusion: Option<&FusionModule<T>>,
) -> Result<()> {
    let fusion = fusion
        .ok_or_else(|| Error::Unsupported("fusion module is disabled (memory.fusion=false)".into()))?;
    if deleted == target {
        return Err(Error::Contract("fusion source and target must differ".into()));
    }
    if deleted >= bank.len() || target >= bank.len() {
        return Err(Error::Contract(format!(
            "fusion indices ({}, {}) out of bank length {}",
            deleted,
            target,
            bank.len()
        )));
    }
    let merged = fusion.apply(&bank.slot(deleted).template, &bank.slot(target).template)?;
    bank.set_template(target, merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_gate_is_identity() {
        let x_j = Tensor::from_fn(&[2, 2, 2], |i| (i as f64) * 0.3 - 0.7);
        let cand = Tensor::from_fn(&[2, 2, 2], |i| (i as f64).cos());
        let z = Tensor::zeros(&[2, 2, 2]);
        let out = FusionModule::gated_blend(&x_j, &cand, &z).unwrap();
        assert!(out.value_eq(&x_j));
    }

    #[test]
    fn open_input_filter_is_identity() {
        let x_i = Tensor::from_fn(&[2, 2, 2], |i| (i as f64) * 0.21 - 0.4);
        let r = Tensor::ones(&[2, 2, 2]);
        let filtered = ops::mul(&r, &x_i).unwrap();
        assert!(filtered.value_eq(&x_i));
    }

    #[test]
    fn disabled_flag_is_unsupported_error() {
        let mut bank = crate::memory::MemoryBank::<f64>::new(3).unwrap();
        bank.push(crate::memory::SlotEntry::new(Tensor::zeros(&[1, 1, 1]), 0)).unwrap();
        bank.push(crate::memory::SlotEntry::new(Tensor::zeros(&[1, 1, 1]), 1)).unwrap();
        let err = fusion_update(&mut bank, 0, 1, None).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    /// Single-pixel maps collapse every equation to scalars; check the
    /// whole chain against a hand-rolled evaluation.
    #[test]
    fn single_pixel_matches_scalar_oracle() {
        let mut init = Init::new(42);
        let fusion = FusionModule::<f64>::new(1, &mut init);
        let xi = 0.37;
        let xj = -0.81;
        let x_i = Tensor::from_vec(&[1, 1, 1], vec![xi]).unwrap();
        let x_j = Tensor::from_vec(&[1, 1, 1], vec![xj]).unwrap();

        // conv on a 1×1 map with 3×3 kernel pad 1 touches only the center tap
        let center = |l: &ConvLayer<f64>, a: f64, b: f64| {
            let w = l.weight.data();
            // weight layout: [cout=1, cin=2, 3, 3]; center tap index 4
            w[4] * a + w[13] * b + l.bias.data()[0]
        };
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());

        // single pixel: attention softmax over one logit is 1, so FAM = tgt
        let xa_j = xj;
        let r = sigmoid(center(&fusion.f, xi, xa_j));
        let xi_f = r * xi;
        let xa_i = xi_f;
        let z = sigmoid(center(&fusion.h, xa_i, xj));
        let cand = (center(&fusion.g, xa_i, xj)).tanh();
        let expected = (1.0 - z) * xj + z * cand;

        let got = fusion.apply(&x_i, &x_j).unwrap().value();
        assert!((got - expected).abs() < 1e-12, "{} vs {}", got, expected);
    }
}
