//! Desk-scale convolutional encoders: `blocks` stages of two 3×3 convs
//! with group normalization and leaky ReLU; the first `log2(s)` stages
//! downsample by striding their first conv.

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, GroupNormLayer, HasParams, Init, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::{chw, ops, Tensor};

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub blocks: usize,
    pub base_width: usize,
    /// Total downsample factor `s` (power of two, at most 2^blocks).
    pub downsample: usize,
    pub groups: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if !self.downsample.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample factor {} is not a power of two",
                self.downsample
            )));
        }
        if self.num_strided() > self.blocks {
            return Err(Error::Config(format!(
                "downsample {} needs {} strided blocks but only {} exist",
                self.downsample,
                self.num_strided(),
                self.blocks
            )));
        }
        for i in 0..self.blocks {
            let w = self.width(i);
            if w % self.groups != 0 {
                return Err(Error::Config(format!(
                    "block {} width {} not divisible by {} norm groups",
                    i, w, self.groups
                )));
            }
        }
        Ok(())
    }

    fn num_strided(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Channel width of block `i`: base, 2×base, then 4×base onwards.
    pub fn width(&self, i: usize) -> usize {
        self.base_width * (1 << i.min(2))
    }

    pub fn out_channels(&self) -> usize {
        self.width(self.blocks - 1)
    }
}

#[derive(Clone)]
struct ConvBlock<T: Scalar> {
    conv1: ConvLayer<T>,
    gn1: GroupNormLayer<T>,
    conv2: ConvLayer<T>,
    gn2: GroupNormLayer<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(cin: usize, cout: usize, stride: usize, groups: usize, init: &mut Init) -> Self {
        ConvBlock {
            conv1: ConvLayer::new(cin, cout, 3, stride, 1, init),
            gn1: GroupNormLayer::new(cout, groups),
            conv2: ConvLayer::new(cout, cout, 3, 1, 1, init),
            gn2: GroupNormLayer::new(cout, groups),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let h = ops::leaky_relu(&self.gn1.forward(&self.conv1.forward(x)?)?, slope);
        Ok(ops::leaky_relu(&self.gn2.forward(&self.conv2.forward(&h)?)?, slope))
    }
}

impl<T: Scalar> HasParams<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv1.visit(&crate::nn::join(prefix, "conv1"), f);
        self.gn1.visit(&crate::nn::join(prefix, "gn1"), f);
        self.conv2.visit(&crate::nn::join(prefix, "conv2"), f);
        self.gn2.visit(&crate::nn::join(prefix, "gn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.visit_mut(&crate::nn::join(prefix, "conv1"), f);
        self.gn1.visit_mut(&crate::nn::join(prefix, "gn1"), f);
        self.conv2.visit_mut(&crate::nn::join(prefix, "conv2"), f);
        self.gn2.visit_mut(&crate::nn::join(prefix, "gn2"), f);
    }
}

#[derive(Clone)]
pub struct Encoder<T: Scalar> {
    cfg: EncoderConfig,
    blocks: Vec<ConvBlock<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: EncoderConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let strided = cfg.downsample.trailing_zeros() as usize;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut cin = cfg.in_channels;
        for i in 0..cfg.blocks {
            let cout = cfg.width(i);
            let stride = if i < strided { 2 } else { 1 };
            blocks.push(ConvBlock::new(cin, cout, stride, cfg.groups, init));
            cin = cout;
        }
        Ok(Encoder { cfg, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_from(x, 0)
    }

    /// Run only the first block (the input stem).
    pub fn forward_stem(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.blocks[0].forward(x)
    }

    /// Run blocks `start..`; lets a variant with its own stem reuse the
    /// upper blocks of another encoder.
    pub fn forward_from(&self, x: &Tensor<T>, start: usize) -> Result<Tensor<T>> {
        let (c, h, w) = chw(x, "encoder")?;
        if start == 0 {
            if c != self.cfg.in_channels {
                return Err(Error::dim(
                    "encoder",
                    format!("input has {} channels, encoder wants {}", c, self.cfg.in_channels),
                ));
            }
            if h % self.cfg.downsample != 0 || w % self.cfg.downsample != 0 {
                return Err(Error::Config(format!(
                    "input dims {}x{} not divisible by downsample factor {}",
                    h, w, self.cfg.downsample
                )));
            }
        }
        let mut cur = x.clone();
        for block in &self.blocks[start..] {
            cur = block.forward(&cur)?;
        }
        Ok(cur)
    }
}

impl<T: Scalar> HasParams<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&crate::nn::join(prefix, &format!("block{}", i)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&crate::nn::join(prefix, &format!("block{}", i)), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(in_channels: usize) -> EncoderConfig {
        EncoderConfig { in_channels, blocks: 3, base_width: 8, downsample: 8, groups: 4 }
    }

    #[test]
    fn shape_contract() {
        let enc: Encoder<f64> = Encoder::new(cfg(3), &mut Init::new(0)).unwrap();
        let x = Tensor::zeros(&[3, 64, 64]);
        let y = enc.forward(&x).unwrap();
        assert_eq!(y.shape(), &[32, 8, 8]);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_map() {
        // biases init to zero; group_norm of all-zeros is zero; leaky(0)=0
        let enc: Encoder<f64> = Encoder::new(cfg(3), &mut Init::new(1)).unwrap();
        let y = enc.forward(&Tensor::zeros(&[3, 16, 16])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let enc: Encoder<f64> = Encoder::new(cfg(3), &mut Init::new(0)).unwrap();
        assert!(enc.forward(&Tensor::zeros(&[3, 60, 64])).is_err());
    }
}
