//! 2-d images and binary masks, plus the handful of image-processing
//! primitives the pipeline needs: connected components, morphology with a
//! small disk, and windowed local statistics via integral images.
//!
//! Convention: `idx = y*width + x`. B-scans are stored with `width = X`
//! (lateral) and `height = Z` (axial), so an image *column* is one A-scan.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

// ============================================================
// Image
// ============================================================

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T: Scalar> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![T::zero(); width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err!(
                "image {}x{} wants {} elements, got {}",
                width,
                height,
                width * height,
                data.len()
            ));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Self {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Binarize with `v >= t`.
    pub fn threshold(&self, t: T) -> Mask2 {
        Mask2 {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v >= t).collect(),
        }
    }
}

// ============================================================
// Binary mask
// ============================================================

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2 {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask2 {
    pub fn new(width: usize, height: usize) -> Self {
        Mask2 {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err!(
                "mask {}x{} wants {} elements, got {}",
                width,
                height,
                width * height,
                data.len()
            ));
        }
        Ok(Mask2 {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask2) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn and(&self, other: &Mask2) -> Result<Mask2> {
        if !self.same_shape(other) {
            return Err(shape_err!("mask and: shape mismatch"));
        }
        Ok(Mask2 {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn or(&self, other: &Mask2) -> Result<Mask2> {
        if !self.same_shape(other) {
            return Err(shape_err!("mask or: shape mismatch"));
        }
        Ok(Mask2 {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }

    /// 8-connected components. Returns one pixel list per component, each
    /// pixel as `(x, y)`; components are ordered by their first-discovered
    /// pixel in row-major scan order, pixels within a component likewise
    /// sorted row-major.
    pub fn components(&self) -> Vec<Vec<(usize, usize)>> {
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for start in 0..w * h {
            if !self.data[start] || seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            seen[start] = true;
            stack.push(start);
            while let Some(idx) = stack.pop() {
                let (x, y) = (idx % w, idx / w);
                comp.push((x, y));
                let x0 = x.saturating_sub(1);
                let y0 = y.saturating_sub(1);
                let x1 = (x + 1).min(w.saturating_sub(1));
                let y1 = (y + 1).min(h.saturating_sub(1));
                for ny in y0..=y1 {
                    for nx in x0..=x1 {
                        let nidx = ny * w + nx;
                        if self.data[nidx] && !seen[nidx] {
                            seen[nidx] = true;
                            stack.push(nidx);
                        }
                    }
                }
            }
            comp.sort_by_key(|&(x, y)| (y, x));
            out.push(comp);
        }
        out
    }

    /// Keep only components whose pixel count is at least `min_area`.
    pub fn drop_small_components(&self, min_area: usize) -> Mask2 {
        let mut out = Mask2::new(self.width, self.height);
        for comp in self.components() {
            if comp.len() >= min_area {
                for (x, y) in comp {
                    out.set(x, y, true);
                }
            }
        }
        out
    }
}

// ============================================================
// Morphology (disk of radius 1 == 4-neighbour cross + centre)
// ============================================================

const DISK1: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

pub fn erode_disk1(m: &Mask2) -> Mask2 {
    let (w, h) = (m.width(), m.height());
    let mut out = Mask2::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut keep = true;
            for (dx, dy) in DISK1 {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                // Treat out-of-bounds as background so erosion shrinks
                // components touching the border too.
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    keep = false;
                    break;
                }
                if !m.get(nx as usize, ny as usize) {
                    keep = false;
                    break;
                }
            }
            if keep {
                out.set(x, y, true);
            }
        }
    }
    out
}

pub fn dilate_disk1(m: &Mask2) -> Mask2 {
    let (w, h) = (m.width(), m.height());
    let mut out = Mask2::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if !m.get(x, y) {
                continue;
            }
            for (dx, dy) in DISK1 {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize {
                    out.set(nx as usize, ny as usize, true);
                }
            }
        }
    }
    out
}

/// Morphological opening: erosion followed by dilation.
pub fn opening_disk1(m: &Mask2) -> Mask2 {
    dilate_disk1(&erode_disk1(m))
}

fn opening_line(m: &Mask2, dx: isize, dy: isize) -> Mask2 {
    let (w, h) = (m.width(), m.height());
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && x < w as isize && y < h as isize;
    let mut er = Mask2::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let keep = [-1isize, 0, 1].iter().all(|&s| {
                let (nx, ny) = (x as isize + s * dx, y as isize + s * dy);
                inside(nx, ny) && m.get(nx as usize, ny as usize)
            });
            if keep {
                er.set(x, y, true);
            }
        }
    }
    let mut out = Mask2::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if !er.get(x, y) {
                continue;
            }
            for s in [-1isize, 0, 1] {
                let (nx, ny) = (x as isize + s * dx, y as isize + s * dy);
                if inside(nx, ny) {
                    out.set(nx as usize, ny as usize, true);
                }
            }
        }
    }
    out
}

/// Thin-structure-preserving opening: the union of openings by the 3×1 and
/// 1×3 line elements. Removes isolated pixels and 2×2 speckle like a disk
/// opening, but keeps elongated structures down to 1–2 px wide (a radius-1
/// disk erosion has no interior there and would erase them). Anti-extensive:
/// the result is always a subset of the input.
pub fn opening_lines1(m: &Mask2) -> Mask2 {
    let mut out = opening_line(m, 1, 0);
    let v = opening_line(m, 0, 1);
    for (o, &b) in out.data_mut().iter_mut().zip(v.data()) {
        *o |= b;
    }
    out
}

// ============================================================
// Local statistics via integral images
// ============================================================

/// Per-pixel mean and population standard deviation over a `win x win`
/// square window centred on the pixel and clamped to the image bounds
/// (pixels near the border use a smaller effective window). `win` must be
/// odd.
pub fn local_mean_std<T: Scalar>(img: &Image<T>, win: usize) -> Result<(Image<T>, Image<T>)> {
    if win == 0 || win % 2 == 0 {
        return Err(crate::error::config_err!(
            "window size must be odd and positive, got {win}"
        ));
    }
    let (w, h) = (img.width(), img.height());
    // Integral images in f64; (w+1)x(h+1) with a zero border.
    let stride = w + 1;
    let mut sum = vec![0f64; (w + 1) * (h + 1)];
    let mut sumsq = vec![0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row_s = 0f64;
        let mut row_q = 0f64;
        for x in 0..w {
            let v = img.get(x, y).to_f64_lossy();
            row_s += v;
            row_q += v * v;
            sum[(y + 1) * stride + (x + 1)] = sum[y * stride + (x + 1)] + row_s;
            sumsq[(y + 1) * stride + (x + 1)] = sumsq[y * stride + (x + 1)] + row_q;
        }
    }
    let r = (win / 2) as isize;
    let mut mean = Image::zeros(w, h);
    let mut std = Image::zeros(w, h);
    for y in 0..h {
        let y0 = (y as isize - r).max(0) as usize;
        let y1 = ((y as isize + r) as usize).min(h - 1);
        for x in 0..w {
            let x0 = (x as isize - r).max(0) as usize;
            let x1 = ((x as isize + r) as usize).min(w - 1);
            let n = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            let rect = |t: &[f64]| {
                t[(y1 + 1) * stride + (x1 + 1)] - t[y0 * stride + (x1 + 1)]
                    - t[(y1 + 1) * stride + x0]
                    + t[y0 * stride + x0]
            };
            let s = rect(&sum);
            let q = rect(&sumsq);
            let m = s / n;
            let var = (q / n - m * m).max(0.0);
            mean.set(x, y, T::from_f64_lossy(m));
            std.set(x, y, T::from_f64_lossy(var.sqrt()));
        }
    }
    Ok((mean, std))
}
