//! 16-bit binary PGM (P5) export for en-face images and masks.
//!
//! PGM is the interchange format for everything human-viewable: trivially
//! parseable anywhere, no codec dependence. All writers emit maxval 65535
//! with big-endian samples, image row 0 at the top.

use std::path::Path;

use crate::error::{format_err, Result};
use crate::image::{Image, Mask2};

const MAXVAL: u32 = 65_535;

fn encode(width: usize, height: usize, samples: impl Iterator<Item = u16>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{MAXVAL}\n").into_bytes();
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

/// Min–max scale an image into the full 16-bit range; a constant image
/// encodes as all zeros.
pub fn image_to_pgm16(img: &Image<f32>) -> Vec<u8> {
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = (hi - lo) as f64;
    let scale = |v: f32| -> u16 {
        if span <= 0.0 {
            0
        } else {
            (((v - lo) as f64 / span * MAXVAL as f64).round() as u32).min(MAXVAL) as u16
        }
    };
    encode(img.width(), img.height(), img.data().iter().map(|&v| scale(v)))
}

/// Fixed-scale encoding for probability maps: 0.0 -> 0, 1.0 -> 65535,
/// values clamped, so gray levels are comparable across files.
pub fn prob_to_pgm16(prob: &Image<f32>) -> Vec<u8> {
    encode(
        prob.width(),
        prob.height(),
        prob.data()
            .iter()
            .map(|&v| ((v.clamp(0.0, 1.0) as f64 * MAXVAL as f64).round() as u32).min(MAXVAL) as u16),
    )
}

pub fn mask_to_pgm16(m: &Mask2) -> Vec<u8> {
    encode(
        m.width(),
        m.height(),
        m.data().iter().map(|&b| if b { MAXVAL as u16 } else { 0 }),
    )
}

/// Background image dimmed to 80% of the range with the mask's boundary
/// pixels burned in at full white, so lesion outlines stay visible over
/// bright vasculature.
pub fn overlay_to_pgm16(base: &Image<f32>, mask: &Mask2) -> Result<Vec<u8>> {
    let (w, h) = (base.width(), base.height());
    if w != mask.width() || h != mask.height() {
        return Err(format_err!(
            "overlay: image {}x{} vs mask {}x{}",
            w,
            h,
            mask.width(),
            mask.height()
        ));
    }
    let (lo, hi) = base
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = (hi - lo) as f64;
    let dim = MAXVAL as f64 * 0.8;
    let is_boundary = |x: usize, y: usize| -> bool {
        if !mask.get(x, y) {
            return false;
        }
        if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
            return true;
        }
        !(mask.get(x - 1, y) && mask.get(x + 1, y) && mask.get(x, y - 1) && mask.get(x, y + 1))
    };
    let mut samples = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let v = if is_boundary(x, y) {
                MAXVAL as u16
            } else if span <= 0.0 {
                0
            } else {
                ((base.get(x, y) - lo) as f64 / span * dim).round() as u16
            };
            samples.push(v);
        }
    }
    Ok(encode(w, h, samples.into_iter()))
}

pub fn write_pgm(bytes: &[u8], path: &Path) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Parse a maxval-65535 P5 file back into (width, height, samples).
/// Accepts the writer's own output plus arbitrary whitespace/comments in
/// the header, as the format allows.
pub fn parse_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err!("pgm: truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(format_err!("pgm: not a P5 file"));
    }
    let parse = |t: String| -> Result<usize> {
        t.parse::<usize>().map_err(|_| format_err!("pgm: bad header number '{t}'"))
    };
    let w = parse(token()?)?;
    let h = parse(token()?)?;
    let maxval = parse(token()?)?;
    if maxval != MAXVAL as usize {
        return Err(format_err!("pgm: expected maxval {MAXVAL}, got {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let want = w * h * 2;
    let raster = &bytes[pos.min(bytes.len())..];
    if raster.len() != want {
        return Err(format_err!(
            "pgm: raster is {} bytes, want {want} for {w}x{h}",
            raster.len()
        ));
    }
    let samples = raster
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((w, h, samples))
}

// ============================================================
// Tests
// ============================================================
