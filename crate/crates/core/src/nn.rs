//! Small layer primitives shared by the model encoders/decoder, the
//! update-key projector, and the fusion module, plus parameter traversal
//! used for tracking, checkpointing, and optimizer updates.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ops, GradientTape, Tensor};

/// Negative slope used by every leaky ReLU in the models.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Deterministic parameter initializer (Box-Muller over a seeded stream).
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xA11C);
        Init { rng }
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn he_conv<T: Scalar>(&mut self, cout: usize, cin: usize, k: usize) -> Tensor<T> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let data: Vec<T> = (0..cout * cin * k * k).map(|_| T::from_f64(self.normal(std))).collect();
        Tensor::from_vec(&[cout, cin, k, k], data).expect("conv kernel shape")
    }
}

/// Visit every parameter tensor with its dotted name. Traversal order is
/// fixed, which keeps checkpoints, Adam state, and gradient collection
/// aligned across runs.
pub trait HasParams<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
}

pub fn collect_params<T: Scalar, M: HasParams<T> + ?Sized>(m: &M) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name, t.clone())));
    out
}

/// Replace every parameter with a tape-tracked handle (used per training
/// step so gradients can be pulled by parameter).
pub fn track_params<T: Scalar, M: HasParams<T> + ?Sized>(m: &mut M, tape: &GradientTape<T>) {
    m.visit_mut("", &mut |_name, t| {
        *t = tape.var(t);
    });
}

pub fn save_params<T: Scalar, M: HasParams<T> + ?Sized>(
    m: &M,
    ckpt: &mut Checkpoint,
) -> Result<()> {
    let mut err = None;
    m.visit("", &mut |name, t| {
        if err.is_none() {
            if let Err(e) = ckpt.insert_tensor(&name, t) {
                err = Some(e);
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn load_params<T: Scalar, M: HasParams<T> + ?Sized>(
    m: &mut M,
    ckpt: &Checkpoint,
) -> Result<()> {
    let mut err = None;
    m.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match ckpt.tensor::<T>(&name) {
            Ok(loaded) => {
                if loaded.shape() != t.shape() {
                    err = Some(Error::Checkpoint(format!(
                        "record '{}' has shape {:?}, model wants {:?}",
                        name,
                        loaded.shape(),
                        t.shape()
                    )));
                } else {
                    *t = loaded;
                }
            }
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{}.{}", prefix, name)
    }
}

/// 2-D convolution layer (square odd kernel).
#[derive(Clone)]
pub struct ConvLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, init: &mut Init) -> Self {
        ConvLayer { weight: init.he_conv(cout, cin, k), bias: Tensor::zeros(&[cout]), stride, pad }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, &self.weight, &self.bias, self.stride, self.pad)
    }
}

impl<T: Scalar> HasParams<T> for ConvLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Group normalization with learned per-channel affine.
#[derive(Clone)]
pub struct GroupNormLayer<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub groups: usize,
    pub eps: T,
}

impl<T: Scalar> GroupNormLayer<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        GroupNormLayer {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            groups,
            eps: T::from_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::group_norm(x, self.groups, &self.gamma, &self.beta, self.eps)
    }
}

impl<T: Scalar> HasParams<T> for GroupNormLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_roundtrip_via_checkpoint() {
        let mut init = Init::new(11);
        let layer: ConvLayer<f32> = ConvLayer::new(3, 4, 3, 1, 1, &mut init);
        let mut ckpt = Checkpoint::new();
        save_params(&layer, &mut ckpt).unwrap();

        let mut other: ConvLayer<f32> = ConvLayer::new(3, 4, 3, 1, 1, &mut Init::new(99));
        assert!(!other.weight.bit_eq(&layer.weight));
        load_params(&mut other, &ckpt).unwrap();
        assert!(other.weight.bit_eq(&layer.weight));
        assert!(other.bias.bit_eq(&layer.bias));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: Tensor<f64> = Init::new(5).he_conv(2, 3, 3);
        let b: Tensor<f64> = Init::new(5).he_conv(2, 3, 3);
        assert!(a.bit_eq(&b));
    }
}
