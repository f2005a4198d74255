//! Parameterized layers as plain structs. Forward passes return whatever
//! intermediate state the matching backward pass needs; the networks thread
//! those caches through explicitly.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::nn::init::he_init;
use crate::nn::ops;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

// ============================================================
// Standard convolution ("same" padding for odd kernels)
// ============================================================

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new_he<R: Rng>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Self {
        Conv2d {
            w: he_init(&[cout, cin, k, k], cin * k * k, rng),
            b: Tensor::zeros(&[cout]),
            padding: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d_forward(x, &self.w, &self.b, 1, self.padding)
    }

    /// Returns (gx, gw, gb).
    pub fn backward(&self, x: &Tensor<T>, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        ops::conv2d_backward(x, &self.w, gy, 1, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

// ============================================================
// Depthwise-separable convolution
// ============================================================

/// Depthwise k×k (one filter per input channel, no bias) followed by a
/// pointwise 1×1 mixing conv with bias. Parameter count
/// C_in·k² + C_in·C_out + C_out.
#[derive(Debug, Clone)]
pub struct DwSepConv2d<T: Scalar> {
    pub dw: Tensor<T>,
    pub pw: Tensor<T>,
    pub b: Tensor<T>,
    pub padding: usize,
}

impl<T: Scalar> DwSepConv2d<T> {
    pub fn new_he<R: Rng>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Self {
        DwSepConv2d {
            dw: he_init(&[cin, 1, k, k], k * k, rng),
            pw: he_init(&[cout, cin, 1, 1], cin, rng),
            b: Tensor::zeros(&[cout]),
            padding: k / 2,
        }
    }

    /// Returns (y, mid) where mid is the depthwise output the backward pass
    /// re-reads.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mid = ops::depthwise_conv2d_forward(x, &self.dw, self.padding)?;
        let y = ops::conv2d_forward(&mid, &self.pw, &self.b, 1, 0)?;
        Ok((y, mid))
    }

    /// Returns (gx, gdw, gpw, gb).
    pub fn backward(
        &self,
        x: &Tensor<T>,
        mid: &Tensor<T>,
        gy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (gmid, gpw, gb) = ops::conv2d_backward(mid, &self.pw, gy, 1, 0)?;
        let (gx, gdw) = ops::depthwise_conv2d_backward(x, &self.dw, &gmid, self.padding)?;
        Ok((gx, gdw, gpw, gb))
    }

    pub fn param_count(&self) -> usize {
        self.dw.len() + self.pw.len() + self.b.len()
    }
}

// ============================================================
// Squeeze-and-excitation block
// ============================================================

#[derive(Debug, Clone)]
pub struct SeBlock<T: Scalar> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

impl<T: Scalar> SeBlock<T> {
    pub fn new_he<R: Rng>(c: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if reduction == 0 || c % reduction != 0 {
            return Err(config_err!(
                "se block: channels {c} not divisible by reduction {reduction}"
            ));
        }
        let cr = c / reduction;
        Ok(SeBlock {
            w1: he_init(&[cr, c], c, rng),
            w2: he_init(&[c, cr], cr, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ops::SeCache<T>)> {
        ops::se_forward(x, &self.w1, &self.w2)
    }

    /// Returns (gx, gw1, gw2).
    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &ops::SeCache<T>,
        gy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        ops::se_backward(x, &self.w1, &self.w2, cache, gy)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }
}
