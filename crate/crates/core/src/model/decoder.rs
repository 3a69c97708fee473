//! Upsampling decoder. The readout is the only input: there are no skip
//! connections from the encoders, so everything the decoder sees went
//! through the memory. Each stage is bilinear 2× upsampling followed by a
//! 3×3 conv, group norm, and leaky ReLU; a head conv maps to class logits
//! (segmentation) or sigmoid RGB (next-frame prediction).

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, GroupNormLayer, HasParams, Init, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::{chw, ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Two per-pixel logits (background, foreground).
    Segmentation,
    /// Three channels squashed to [0, 1].
    Frame,
}

impl HeadKind {
    pub fn out_channels(self) -> usize {
        match self {
            HeadKind::Segmentation => 2,
            HeadKind::Frame => 3,
        }
    }
}

#[derive(Clone)]
struct UpBlock<T: Scalar> {
    conv: ConvLayer<T>,
    gn: GroupNormLayer<T>,
}

impl<T: Scalar> UpBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let up = ops::bilinear_up2(x)?;
        let h = self.gn.forward(&self.conv.forward(&up)?)?;
        Ok(ops::leaky_relu(&h, T::from_f64(LEAKY_SLOPE)))
    }
}

impl<T: Scalar> HasParams<T> for UpBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv.visit(&crate::nn::join(prefix, "conv"), f);
        self.gn.visit(&crate::nn::join(prefix, "gn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv.visit_mut(&crate::nn::join(prefix, "conv"), f);
        self.gn.visit_mut(&crate::nn::join(prefix, "gn"), f);
    }
}

#[derive(Clone)]
pub struct Decoder<T: Scalar> {
    blocks: Vec<UpBlock<T>>,
    head: ConvLayer<T>,
    head_kind: HeadKind,
    in_channels: usize,
}

impl<T: Scalar> Decoder<T> {
    /// `upsamples` must equal log2 of the encoder downsample factor so the
    /// output lands back at input resolution.
    pub fn new(
        in_channels: usize,
        upsamples: usize,
        head_kind: HeadKind,
        groups: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(upsamples);
        let mut cin = in_channels;
        for _ in 0..upsamples {
            let cout = (cin / 2).max(groups.max(8));
            if cout % groups != 0 {
                return Err(Error::Config(format!(
                    "decoder width {} not divisible by {} norm groups",
                    cout, groups
                )));
            }
            blocks.push(UpBlock {
                conv: ConvLayer::new(cin, cout, 3, 1, 1, init),
                gn: GroupNormLayer::new(cout, groups),
            });
            cin = cout;
        }
        let head = ConvLayer::new(cin, head_kind.out_channels(), 3, 1, 1, init);
        Ok(Decoder { blocks, head, head_kind, in_channels })
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn forward(&self, readout: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, _, _) = chw(readout, "decoder")?;
        if c != self.in_channels {
            return Err(Error::dim(
                "decoder",
                format!("readout has {} channels, decoder wants {}", c, self.in_channels),
            ));
        }
        let mut cur = readout.clone();
        for b in &self.blocks {
            cur = b.forward(&cur)?;
        }
        let out = self.head.forward(&cur)?;
        Ok(match self.head_kind {
            HeadKind::Segmentation => out,
            HeadKind::Frame => ops::sigmoid(&out),
        })
    }
}

impl<T: Scalar> HasParams<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&crate::nn::join(prefix, &format!("up{}", i)), f);
        }
        self.head.visit(&crate::nn::join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&crate::nn::join(prefix, &format!("up{}", i)), f);
        }
        self.head.visit_mut(&crate::nn::join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_shape_contract() {
        let dec: Decoder<f64> =
            Decoder::new(32, 3, HeadKind::Segmentation, 4, &mut Init::new(0)).unwrap();
        let y = dec.forward(&Tensor::zeros(&[32, 8, 8])).unwrap();
        assert_eq!(y.shape(), &[2, 64, 64]);
    }

    #[test]
    fn frame_head_stays_in_unit_range() {
        let dec: Decoder<f64> = Decoder::new(16, 2, HeadKind::Frame, 4, &mut Init::new(3)).unwrap();
        let x = Tensor::from_fn(&[16, 4, 4], |i| ((i * 131 % 97) as f64 - 48.0) * 2.0);
        let y = dec.forward(&x).unwrap();
        assert_eq!(y.shape(), &[3, 16, 16]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
