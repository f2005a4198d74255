//! Input normalization and training-time augmentation.
//!
//! Scanners differ in brightness and noise floor, so every image that feeds
//! a network first gets column-wise z-scoring (a column is an A-scan for
//! B-scan images, a lateral line for en-face stacks) and then a floor that
//! zeroes strongly negative outliers. Augmentation simulates residual
//! acquisition noise at network-input scale, i.e. after normalization.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::image::Image;
use crate::scalar::Scalar;

/// Replace each image column by `(c - mean(c)) / std(c)` with population
/// std. Columns with std below 1e−6 become all zeros instead of blowing up
/// (padded or dark columns). Multi-channel stacks call this per channel.
pub fn column_zscore<T: Scalar>(img: &Image<T>) -> Image<T> {
    let (w, h) = (img.width(), img.height());
    let mut out = Image::zeros(w, h);
    for x in 0..w {
        let mut s = 0f64;
        let mut q = 0f64;
        for y in 0..h {
            let v = img.get(x, y).to_f64_lossy();
            s += v;
            q += v * v;
        }
        let n = h as f64;
        let mean = s / n;
        let std = (q / n - mean * mean).max(0.0).sqrt();
        if std < 1e-6 {
            continue; // leave the column at zero
        }
        for y in 0..h {
            let v = (img.get(x, y).to_f64_lossy() - mean) / std;
            out.set(x, y, T::from_f64_lossy(v));
        }
    }
    out
}

/// Zero out values strictly below −0.5; everything else passes through.
pub fn threshold_floor<T: Scalar>(img: &Image<T>) -> Image<T> {
    let floor = T::from_f64_lossy(-0.5);
    img.map(|v| if v < floor { T::zero() } else { v })
}

/// Column-zscore then floor — the standard network-input normalization.
pub fn normalize_channel<T: Scalar>(img: &Image<T>) -> Image<T> {
    threshold_floor(&column_zscore(img))
}

/// Training augmentation over a batch of channel stacks. Each sample is
/// independently selected with probability 0.5; a selected sample is
/// brightness-scaled by one u ~ Uniform[lo, hi] across all channels, then
/// gets per-column Gaussian noise — one draw per column per channel, added
/// to every pixel of that column. Shapes never change; the result is a pure
/// function of the rng state.
pub fn augment_with<T: Scalar, R: Rng>(
    batch: &mut [Vec<Image<T>>],
    brightness: (f64, f64),
    sigma: f64,
    rng: &mut R,
) {
    let bright = Uniform::new_inclusive(brightness.0, brightness.1);
    for sample in batch.iter_mut() {
        if !rng.gen_bool(0.5) {
            continue;
        }
        let u = bright.sample(rng);
        let uf = T::from_f64_lossy(u);
        for ch in sample.iter_mut() {
            *ch = ch.map(|v| v * uf);
        }
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).unwrap();
            for ch in sample.iter_mut() {
                let (w, h) = (ch.width(), ch.height());
                for x in 0..w {
                    let n = T::from_f64_lossy(noise.sample(rng));
                    for y in 0..h {
                        let v = ch.get(x, y);
                        ch.set(x, y, v + n);
                    }
                }
            }
        }
    }
}

/// Default augmentation: brightness ±20%, column noise σ = 0.1.
pub fn augment<T: Scalar, R: Rng>(batch: &mut [Vec<Image<T>>], rng: &mut R) {
    augment_with(batch, (0.8, 1.2), 0.1, rng);
}
