//! Deterministic synthetic OCT/OCTA eyes with exact ground truth.
//!
//! Each phantom is a pure function of its config (including the seed): a
//! smooth vitreoretinal interface over a layered retina, sinusoidal
//! superficial vessels in the sub-interface band, and optionally lesions
//! growing above the interface in one of three shapes — `flat` membranes
//! hugging the surface, `tabletop` plateaus floating on stalks, and
//! `forward` fronds climbing into the vitreous. Confound artifacts
//! (interface protrusion over a vessel, microsaccade line scans, white
//! decorrelation noise, and a bright hemorrhage-like clump) can be mixed
//! in without ever disturbing the ground truth.
//!
//! Truth holds by construction: lesion flow is written at or above
//! [`FLOW_THRESHOLD`] + margin, every non-lesion contribution to the
//! vitreous stays strictly below it (the budgets are enforced by
//! validation and write order), so projecting the OCTA over the true
//! surface and thresholding recovers the lesion footprint exactly.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::image::{Image, Mask2};
use crate::ovol;
use crate::slab::gcc_depth_px;
use crate::volume::{
    mask_to_surface, surface_to_mask, LesionMask, Modality, Spacing, Volume, VriMask, VriSurface,
};

/// En-face OCTA level that separates lesion flow from everything else.
/// Lesion voxels are written at ≥ 0.8; every artifact budget tops out at
/// 0.65.
pub const FLOW_THRESHOLD: f32 = 0.70;

/// Upper bound of the uniform OCTA background in the vitreous.
pub const OCTA_BACKGROUND: f32 = 0.03;

// ============================================================
// Config
// ============================================================

/// Lesion shape class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Morphology {
    Flat,
    Tabletop,
    Forward,
}

/// Injected confound type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    VesselProtrusion,
    Microsaccade,
    DecorrelationNoise,
    HemorrhageMimic,
}

/// What was actually injected, and where (B-scan range `[y0, y1)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactAnnotation {
    pub kind: ArtifactKind,
    pub y0: usize,
    pub y1: usize,
    pub magnitude: f32,
}

/// Artifact intensities in [0, 1]; 0 disables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArtifactFlags {
    pub vessel_protrusion: f32,
    pub microsaccade: f32,
    pub decorrelation_noise: f32,
    pub hemorrhage_mimic: f32,
}

impl Default for ArtifactFlags {
    fn default() -> Self {
        ArtifactFlags {
            vessel_protrusion: 0.0,
            microsaccade: 0.0,
            decorrelation_noise: 0.0,
            hemorrhage_mimic: 0.0,
        }
    }
}

/// Reflectivity / flow contrast levels in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalLevels {
    pub vitreous_bg: f32,
    pub retina: f32,
    pub choroid: f32,
    pub vessels: f32,
    pub lesion_flow: f32,
}

impl Default for SignalLevels {
    fn default() -> Self {
        SignalLevels {
            vitreous_bg: 0.02,
            retina: 0.55,
            choroid: 0.35,
            vessels: 0.90,
            lesion_flow: 0.85,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub nz: usize,
    pub nx: usize,
    pub ny: usize,
    pub spacing: Spacing,
    pub n_lesions: usize,
    /// Sampling weights over {flat, tabletop, forward}; ignored when
    /// `morphologies` pins the shapes explicitly.
    pub morphology_weights: [f64; 3],
    /// Explicit per-lesion shapes (length must equal `n_lesions`).
    pub morphologies: Option<Vec<Morphology>>,
    pub artifacts: ArtifactFlags,
    /// Correlation length of the interface height field, px.
    pub surface_smoothness_px: f64,
    pub levels: SignalLevels,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            nz: 96,
            nx: 96,
            ny: 96,
            spacing: Spacing::new(3.05, 40.0, 40.0).unwrap(),
            n_lesions: 1,
            morphology_weights: [1.0, 1.0, 1.0],
            morphologies: None,
            artifacts: ArtifactFlags::default(),
            surface_smoothness_px: 24.0,
            levels: SignalLevels::default(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nz < 8 || self.nx < 8 || self.ny < 8 {
            return Err(config_err!(
                "phantom dims must each be >= 8, got ({}, {}, {})",
                self.nz,
                self.nx,
                self.ny
            ));
        }
        Spacing::new(self.spacing.axial_um, self.spacing.x_um, self.spacing.y_um)?;
        if self.surface_smoothness_px <= 0.0 {
            return Err(config_err!("surface smoothness must be positive"));
        }
        let lv = [
            self.levels.vitreous_bg,
            self.levels.retina,
            self.levels.choroid,
            self.levels.vessels,
            self.levels.lesion_flow,
        ];
        if lv.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(config_err!("signal levels must lie in [0, 1]"));
        }
        let fl = [
            self.artifacts.vessel_protrusion,
            self.artifacts.microsaccade,
            self.artifacts.decorrelation_noise,
            self.artifacts.hemorrhage_mimic,
        ];
        if fl.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(config_err!("artifact intensities must lie in [0, 1]"));
        }
        if self.n_lesions > 0 {
            if self.levels.lesion_flow < 0.8 {
                return Err(config_err!(
                    "lesion flow level must be >= 0.8 to clear the {} en-face threshold",
                    FLOW_THRESHOLD
                ));
            }
            match &self.morphologies {
                Some(ms) => {
                    if ms.len() != self.n_lesions {
                        return Err(config_err!(
                            "{} morphologies pinned for {} lesions",
                            ms.len(),
                            self.n_lesions
                        ));
                    }
                }
                None => {
                    if self.morphology_weights.iter().any(|&w| w < 0.0)
                        || self.morphology_weights.iter().sum::<f64>() <= 0.0
                    {
                        return Err(config_err!(
                            "morphology weights must be non-negative with positive sum"
                        ));
                    }
                }
            }
            if self.wants_tall_lesions() && self.nz < 24 {
                return Err(config_err!(
                    "tabletop/forward lesions need Z >= 24, got {}",
                    self.nz
                ));
            }
        }
        Ok(())
    }

    fn wants_tall_lesions(&self) -> bool {
        match &self.morphologies {
            Some(ms) => ms
                .iter()
                .any(|m| matches!(m, Morphology::Tabletop | Morphology::Forward)),
            None => self.morphology_weights[1] > 0.0 || self.morphology_weights[2] > 0.0,
        }
    }
}

// ============================================================
// Truth
// ============================================================

/// Exact ground truth for one phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    pub vri: VriSurface,
    pub lesions: LesionMask,
    /// Shape label per lesion component, parallel to `lesions.components`.
    pub morphologies: Vec<Morphology>,
    pub artifacts: Vec<ArtifactAnnotation>,
    /// En-face OCTA threshold that recovers `lesions` over the true surface.
    pub flow_threshold: f32,
}

// ============================================================
// Noise fields
// ============================================================

/// Separable Gaussian blur with edge replication.
fn gaussian_blur(img: &Image<f64>, sigma: f64) -> Image<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let (w, h) = (img.width(), img.height());

    let mut tmp = Image::<f64>::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * img.get(sx, y);
            }
            tmp.set(x, y, acc / norm);
        }
    }
    let mut out = Image::<f64>::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp.get(x, sy);
            }
            out.set(x, y, acc / norm);
        }
    }
    out
}

/// Low-pass-filtered white noise, min-max normalized to [0, 1].
fn smooth_field(w: usize, h: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Image<f64> {
    let raw = Image::from_vec(w, h, (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect())
        .expect("sized above");
    let blurred = gaussian_blur(&raw, sigma);
    let lo = blurred.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = blurred
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return Image::from_vec(w, h, vec![0.5; w * h]).expect("sized above");
    }
    blurred.map(|v| (v - lo) / (hi - lo))
}

// ============================================================
// Geometry pieces
// ============================================================

struct VesselSpec {
    x0: f64,
    amp: f64,
    wavelength: f64,
    phase: f64,
    depth: usize,
    radius: f64,
}

impl VesselSpec {
    fn x_at(&self, y: usize) -> f64 {
        self.x0
            + self.amp * (2.0 * std::f64::consts::PI * y as f64 / self.wavelength + self.phase).sin()
    }
}

/// Irregular en-face footprint: pixels plus a (0, 1]-normalized height
/// profile peaking at 1 somewhere inside.
struct Blob {
    pixels: Vec<(usize, usize)>,
    bump: Image<f64>,
    y0: usize,
    y1: usize,
}

impl Blob {
    fn contains(&self, x: usize, y: usize) -> bool {
        self.bump.get(x, y) > 0.0
    }
}

/// Grow a blob around (cx, cy): a disk of radius `rho` warped by the shared
/// noise field, keeping the connected component under the center.
fn grow_blob(
    cx: f64,
    cy: f64,
    rho: f64,
    noise: &Image<f64>,
) -> Option<Blob> {
    let (w, h) = (noise.width(), noise.height());
    let mut score = Image::<f64>::zeros(w, h);
    let mut hit = Mask2::new(w, h);
    let r_out = (rho * 1.05).ceil() as i64 + 1;
    let (cxi, cyi) = (cx.round() as i64, cy.round() as i64);
    for y in (cyi - r_out).max(0)..=(cyi + r_out).min(h as i64 - 1) {
        for x in (cxi - r_out).max(0)..=(cxi + r_out).min(w as i64 - 1) {
            let (xu, yu) = (x as usize, y as usize);
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let f = (1.0 - r2 / (rho * rho)) + 0.5 * (noise.get(xu, yu) - 0.5);
            if f > 0.15 {
                score.set(xu, yu, f);
                hit.set(xu, yu, true);
            }
        }
    }
    let comps = hit.components();
    let keep = comps
        .into_iter()
        .find(|px| px.contains(&(cxi as usize, cyi as usize)))?;
    let fmax = keep
        .iter()
        .map(|&(x, y)| score.get(x, y))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut bump = Image::<f64>::zeros(w, h);
    let (mut y0, mut y1) = (h, 0);
    for &(x, y) in &keep {
        // Strictly positive over the footprint, exactly 1 at the peak.
        let p = ((score.get(x, y) - 0.15) / (fmax - 0.15)).max(1e-3);
        bump.set(x, y, p);
        y0 = y0.min(y);
        y1 = y1.max(y + 1);
    }
    Some(Blob {
        pixels: keep,
        bump,
        y0,
        y1,
    })
}

/// Rejection-sample non-overlapping blob centers. Returns None if the
/// geometry cannot be placed.
fn place_blobs(
    n: usize,
    base_rho: f64,
    noise: &Image<f64>,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Blob>> {
    let (w, h) = (noise.width(), noise.height());
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut blobs = Vec::new();
    for _ in 0..n {
        let mut ok = false;
        for _ in 0..400 {
            let rho = base_rho * rng.gen_range(0.7..1.3);
            let margin = rho * 1.05 + 3.0;
            if 2.0 * margin + 1.0 >= w as f64 || 2.0 * margin + 1.0 >= h as f64 {
                continue;
            }
            let cx = rng.gen_range(margin..(w as f64 - 1.0 - margin));
            let cy = rng.gen_range(margin..(h as f64 - 1.0 - margin));
            let clear = placed.iter().all(|&(px, py, pr)| {
                let d = ((cx - px).powi(2) + (cy - py).powi(2)).sqrt();
                d >= 1.05 * (rho + pr) + 6.0
            });
            if !clear {
                continue;
            }
            if let Some(b) = grow_blob(cx, cy, rho, noise) {
                placed.push((cx, cy, rho));
                blobs.push(b);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(blobs)
}

/// Plateau / frond peak elevations scale with volume depth; flat stays at
/// 2–3 px so the ordering flat < tabletop <= forward holds for every seed.
fn tall_elevations(nz: usize) -> (usize, usize) {
    let e_table = ((0.14 * nz as f64).round() as usize).max(4);
    let e_fwd = ((0.23 * nz as f64).round() as usize).max(e_table + 1);
    (e_table, e_fwd)
}

// ============================================================
// Generator
// ============================================================

/// Build one phantom eye: OCT volume, OCTA volume, and exact truth.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume, Volume, PhantomTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (nz, nx, ny) = (cfg.nz, cfg.nx, cfg.ny);
    let (e_table, e_fwd) = tall_elevations(nz);

    // -- interface height field -------------------------------------------
    let field = smooth_field(nx, ny, (cfg.surface_smoothness_px / 2.0).max(0.5), &mut rng);
    let mut surf = VriSurface::filled(nx, ny, 0);
    for y in 0..ny {
        for x in 0..nx {
            let z = (0.40 * nz as f64 + 0.25 * nz as f64 * field.get(x, y)).round() as usize;
            surf.set(x, y, z.min(nz - 1));
        }
    }

    // -- lesion shapes (drawn before artifacts so the protrusion can cap
    //    its lift against the tallest requested lesion) --------------------
    let shapes: Vec<Morphology> = if cfg.n_lesions == 0 {
        Vec::new()
    } else {
        match &cfg.morphologies {
            Some(ms) => ms.clone(),
            None => {
                let dist = WeightedIndex::new(cfg.morphology_weights)
                    .map_err(|e| config_err!("morphology weights: {e}"))?;
                (0..cfg.n_lesions)
                    .map(|_| match dist.sample(&mut rng) {
                        0 => Morphology::Flat,
                        1 => Morphology::Tabletop,
                        _ => Morphology::Forward,
                    })
                    .collect()
            }
        }
    };
    let flat_heights: Vec<usize> = shapes
        .iter()
        .map(|m| match m {
            Morphology::Flat => rng.gen_range(2..=3usize),
            _ => 0,
        })
        .collect();
    let e_req = shapes
        .iter()
        .map(|m| match m {
            Morphology::Flat => 3,
            Morphology::Tabletop => e_table,
            Morphology::Forward => e_fwd,
        })
        .max()
        .unwrap_or(0);

    // -- superficial vessels ----------------------------------------------
    let retina_px = ((0.28 * nz as f64).round() as usize).max(3);
    let gcc_px = gcc_depth_px(cfg.spacing.axial_um).min(retina_px.saturating_sub(1)).max(3);
    let n_vessels = ((nx as f64 / 24.0).round() as usize).max(2);
    let vessels: Vec<VesselSpec> = (0..n_vessels)
        .map(|_| {
            let x0 = rng.gen_range(4.0..(nx as f64 - 5.0));
            let amp = rng
                .gen_range(2.0..6.0f64)
                .min(x0 - 2.0)
                .min(nx as f64 - 3.0 - x0)
                .max(0.5);
            let depth_hi = gcc_px.saturating_sub(2).max(2);
            VesselSpec {
                x0,
                amp,
                wavelength: rng.gen_range(0.8 * ny as f64..2.0 * ny as f64),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                depth: rng.gen_range(2..=depth_hi),
                radius: rng.gen_range(1.0..2.0),
            }
        })
        .collect();

    let mut annotations: Vec<ArtifactAnnotation> = Vec::new();

    // -- protrusion: lift the interface over one vessel --------------------
    if cfg.artifacts.vessel_protrusion > 0.0 {
        let v = &vessels[rng.gen_range(0..vessels.len())];
        let span = ((0.3 * ny as f64).round() as usize).clamp(4, ny);
        let y0 = rng.gen_range(0..=(ny - span));
        let want = (cfg.artifacts.vessel_protrusion as f64 * (0.07 * nz as f64 + 2.0)).round()
            as i64;
        // Keep every lifted column deep enough for the tallest lesion (or
        // at least 2 px of vitreous when there are none).
        let floor_z = if cfg.n_lesions > 0 { e_req as i64 + 1 } else { 2 };
        let mut min_region = i64::MAX;
        for y in y0..y0 + span {
            let xc = v.x_at(y).round() as i64;
            for x in (xc - 8).max(0)..=(xc + 8).min(nx as i64 - 1) {
                min_region = min_region.min(surf.get(x as usize, y) as i64);
            }
        }
        let lift = want.min(min_region - floor_z);
        if lift >= 1 {
            for y in y0..y0 + span {
                let t = (y - y0) as f64 + 0.5;
                let wy = (std::f64::consts::PI * t / span as f64).sin().powi(2);
                let xc = v.x_at(y);
                for x in 0..nx {
                    let wx = (-((x as f64 - xc).powi(2)) / (2.0 * 3.0 * 3.0)).exp();
                    let dz = (lift as f64 * wy * wx).round() as usize;
                    if dz > 0 {
                        let z = surf.get(x, y);
                        surf.set(x, y, z.saturating_sub(dz).max(floor_z as usize));
                    }
                }
            }
            annotations.push(ArtifactAnnotation {
                kind: ArtifactKind::VesselProtrusion,
                y0,
                y1: y0 + span,
                magnitude: lift as f32,
            });
        }
    }

    // -- lesion + hemorrhage footprints -------------------------------------
    let blob_noise = smooth_field(nx, ny, 3.0, &mut rng);
    let base_rho =
        (nx.min(ny) as f64 / 8.0).clamp(3.0, 12.0) / (1.0 + 0.35 * (cfg.n_lesions.max(1) - 1) as f64);
    let blobs = if cfg.n_lesions > 0 {
        place_blobs(cfg.n_lesions, base_rho, &blob_noise, &mut rng).ok_or_else(|| {
            config_err!(
                "could not place {} lesions in a {}x{} field",
                cfg.n_lesions,
                nx,
                ny
            )
        })?
    } else {
        Vec::new()
    };
    let hemorrhage = if cfg.artifacts.hemorrhage_mimic > 0.0 {
        // Reuse the placement machinery; skip silently if it cannot fit
        // next to the lesions.
        let mut all = place_blobs(
            cfg.n_lesions + 1,
            (nx.min(ny) as f64 / 10.0).clamp(3.0, 9.0),
            &blob_noise,
            &mut rng,
        );
        if cfg.n_lesions > 0 {
            // Avoid the real footprints by rejection against them.
            all = None;
            'outer: for _ in 0..200 {
                let rho = (nx.min(ny) as f64 / 10.0).clamp(3.0, 9.0) * rng.gen_range(0.8..1.2);
                let margin = rho * 1.05 + 3.0;
                if 2.0 * margin + 1.0 >= nx as f64 || 2.0 * margin + 1.0 >= ny as f64 {
                    break;
                }
                let cx = rng.gen_range(margin..(nx as f64 - 1.0 - margin));
                let cy = rng.gen_range(margin..(ny as f64 - 1.0 - margin));
                if let Some(b) = grow_blob(cx, cy, rho, &blob_noise) {
                    for &(x, y) in &b.pixels {
                        if blobs.iter().any(|lb| lb.contains(x, y)) {
                            continue 'outer;
                        }
                    }
                    all = Some(vec![b]);
                    break;
                }
            }
        }
        all.and_then(|mut v| v.pop())
    } else {
        None
    };

    // -- microsaccade rows ---------------------------------------------------
    let saccade_rows: Vec<usize> = if cfg.artifacts.microsaccade > 0.0 {
        let k = ((3.0 * cfg.artifacts.microsaccade as f64).round() as usize).max(1);
        let mut rows = Vec::new();
        while rows.len() < k.min(ny) {
            let y = rng.gen_range(0..ny);
            if !rows.contains(&y) {
                rows.push(y);
            }
        }
        rows
    } else {
        Vec::new()
    };

    // -- body fill -----------------------------------------------------------
    let lv = cfg.levels;
    let mut oct = Volume::zeros(nz, nx, ny, cfg.spacing, Modality::Oct)?;
    let mut octa = Volume::zeros(nz, nx, ny, cfg.spacing, Modality::Octa)?;
    for y in 0..ny {
        for x in 0..nx {
            let zs = surf.get(x, y);
            let oc = oct.column_mut(x, y);
            let ac = octa.column_mut(x, y);
            for z in 0..nz {
                if z < zs {
                    oc[z] = lv.vitreous_bg + rng.gen_range(0.0..0.02);
                    ac[z] = rng.gen_range(0.0..OCTA_BACKGROUND);
                } else if z < zs + retina_px {
                    let l = (z - zs) as f64 / retina_px as f64;
                    let layer = if l < 0.22 {
                        1.0
                    } else if l < 0.48 {
                        0.62
                    } else if l < 0.78 {
                        0.85
                    } else {
                        1.12
                    };
                    oc[z] = lv.retina * layer as f32 * rng.gen_range(0.92..1.0);
                    ac[z] = if z - zs < gcc_px {
                        rng.gen_range(0.0..0.18)
                    } else {
                        rng.gen_range(0.0..0.08)
                    };
                } else {
                    oc[z] = lv.choroid * rng.gen_range(0.85..1.15);
                    ac[z] = rng.gen_range(0.08..0.35);
                }
            }
        }
    }

    // -- vessel tubes (kept at or below the per-column interface) -----------
    for v in &vessels {
        for y in 0..ny {
            let xc = v.x_at(y);
            let r = v.radius;
            let xlo = ((xc - r - 1.0).floor() as i64).max(0);
            let xhi = ((xc + r + 1.0).ceil() as i64).min(nx as i64 - 1);
            let zc = (surf.get((xc.round() as i64).clamp(0, nx as i64 - 1) as usize, y)
                + v.depth) as f64;
            let zlo = ((zc - r - 1.0).floor() as i64).max(0);
            let zhi = ((zc + r + 1.0).ceil() as i64).min(nz as i64 - 1);
            for x in xlo..=xhi {
                for z in zlo..=zhi {
                    let d2 = (x as f64 - xc).powi(2) + (z as f64 - zc).powi(2);
                    if d2 <= r * r && (z as usize) >= surf.get(x as usize, y) {
                        let val = lv.vessels * rng.gen_range(0.92..1.0);
                        let cur = octa.at(z as usize, x as usize, y);
                        octa.set(z as usize, x as usize, y, cur.max(val));
                    }
                }
            }
        }
    }

    // -- OCTA-level artifacts, in budget order: additive noise first, then
    //    replacements, so no combination can reach FLOW_THRESHOLD ----------
    if cfg.artifacts.decorrelation_noise > 0.0 {
        let amp = 0.25 * cfg.artifacts.decorrelation_noise;
        for v in octa.data_mut() {
            *v += rng.gen_range(0.0..amp);
        }
        annotations.push(ArtifactAnnotation {
            kind: ArtifactKind::DecorrelationNoise,
            y0: 0,
            y1: ny,
            magnitude: amp,
        });
    }
    if let Some(b) = &hemorrhage {
        let i = cfg.artifacts.hemorrhage_mimic;
        let e_h = ((0.08 * nz as f64).round() as usize).max(2);
        for &(x, y) in &b.pixels {
            let zs = surf.get(x, y);
            for z in zs.saturating_sub(e_h)..zs {
                let c = oct.at(z, x, y);
                oct.set(z, x, y, c.max(0.5 + rng.gen_range(0.0..0.1)));
                octa.set(z, x, y, rng.gen_range(0.2..0.2 + 0.3 * i));
            }
        }
        annotations.push(ArtifactAnnotation {
            kind: ArtifactKind::HemorrhageMimic,
            y0: b.y0,
            y1: b.y1,
            magnitude: i,
        });
    }
    for &row in &saccade_rows {
        let line = 0.45 + 0.10 * cfg.artifacts.microsaccade;
        for x in 0..nx {
            let ac = octa.column_mut(x, row);
            for v in ac.iter_mut() {
                *v = line + rng.gen_range(0.0..0.05);
            }
        }
        annotations.push(ArtifactAnnotation {
            kind: ArtifactKind::Microsaccade,
            y0: row,
            y1: row + 1,
            magnitude: line,
        });
    }

    // -- lesions last: their flow must survive every artifact ---------------
    let mut lesion_bits = Mask2::new(nx, ny);
    for ((blob, shape), &e_flat) in blobs.iter().zip(&shapes).zip(&flat_heights) {
        match shape {
            Morphology::Flat | Morphology::Forward => {
                for &(x, y) in &blob.pixels {
                    let p = blob.bump.get(x, y);
                    let e = match shape {
                        Morphology::Flat => ((e_flat as f64 * p).round() as usize).max(1),
                        _ => ((e_fwd as f64 * p.powf(0.7)).round() as usize).max(1),
                    };
                    let zs = surf.get(x, y);
                    fill_lesion_column(&mut oct, &mut octa, x, y, zs.saturating_sub(e), zs, lv, &mut rng);
                    lesion_bits.set(x, y, true);
                }
            }
            Morphology::Tabletop => {
                let thick = 3.min(e_table - 1);
                // A few stalks tie the plateau down to the interface.
                let interior: Vec<(usize, usize)> = blob
                    .pixels
                    .iter()
                    .copied()
                    .filter(|&(x, y)| blob.bump.get(x, y) > 0.6)
                    .collect();
                let pool = if interior.is_empty() { &blob.pixels } else { &interior };
                let n_stalks = rng.gen_range(2..=3usize).min(pool.len());
                let mut stalks = Vec::new();
                for _ in 0..n_stalks {
                    stalks.push(pool[rng.gen_range(0..pool.len())]);
                }
                for &(x, y) in &blob.pixels {
                    let zs = surf.get(x, y);
                    let ztop = zs.saturating_sub(e_table);
                    fill_lesion_column(&mut oct, &mut octa, x, y, ztop, (ztop + thick).min(zs), lv, &mut rng);
                    lesion_bits.set(x, y, true);
                }
                for &(sx, sy) in &stalks {
                    for (dx, dy) in [(0i64, 0i64), (1, 0), (-1, 0), (0, 1), (0, -1)] {
                        let (x, y) = (sx as i64 + dx, sy as i64 + dy);
                        if x < 0 || y < 0 || x >= nx as i64 || y >= ny as i64 {
                            continue;
                        }
                        let (x, y) = (x as usize, y as usize);
                        if !blob.contains(x, y) {
                            continue;
                        }
                        let zs = surf.get(x, y);
                        let from = zs.saturating_sub(e_table) + thick;
                        fill_lesion_column(&mut oct, &mut octa, x, y, from.min(zs), zs, lv, &mut rng);
                    }
                }
            }
        }
    }

    for v in oct.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    for v in octa.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    // -- truth ---------------------------------------------------------------
    let lesions = LesionMask::from_mask(lesion_bits, cfg.spacing);
    let mut morphologies = Vec::with_capacity(lesions.components.len());
    for comp in &lesions.components {
        let (x, y) = comp.pixels[0];
        let idx = blobs
            .iter()
            .position(|b| b.contains(x, y))
            .ok_or_else(|| config_err!("lesion component matches no footprint"))?;
        morphologies.push(shapes[idx]);
    }

    Ok((
        oct,
        octa,
        PhantomTruth {
            vri: surf,
            lesions,
            morphologies,
            artifacts: annotations,
            flow_threshold: FLOW_THRESHOLD,
        },
    ))
}

fn fill_lesion_column(
    oct: &mut Volume,
    octa: &mut Volume,
    x: usize,
    y: usize,
    z0: usize,
    z1: usize,
    lv: SignalLevels,
    rng: &mut ChaCha8Rng,
) {
    for z in z0..z1 {
        let c = oct.at(z, x, y);
        oct.set(z, x, y, c.max(0.55 + rng.gen_range(0.0..0.1)));
        octa.set(z, x, y, (lv.lesion_flow + rng.gen_range(0.0..0.1)).min(1.0));
    }
}

// ============================================================
// Dataset
// ============================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFiles {
    pub oct: String,
    pub octa: String,
    pub vri: String,
    pub lesions: String,
    pub truth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    pub positive: bool,
    pub n_lesions: usize,
    pub artifacts: Vec<ArtifactKind>,
    pub seed: u64,
    pub files: CaseFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub template: PhantomConfig,
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split_cases(&self, split: Split) -> Vec<&CaseEntry> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }
}

/// Sidecar JSON that carries everything the OVOL masks cannot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub id: String,
    pub seed: u64,
    pub flow_threshold: f32,
    pub morphologies: Vec<Morphology>,
    pub artifacts: Vec<ArtifactAnnotation>,
    pub config: PhantomConfig,
    pub vri_file: String,
    pub lesions_file: String,
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scenario schedule within a split: 5 of every 8 cases carry lesions with
/// cycling shape mixes and one rotating artifact; the 3 negatives all get
/// a protrusion plus decorrelation noise, half of them a hemorrhage mimic,
/// and every third a microsaccade — the confounds a detector must survive.
fn schedule_case(template: &PhantomConfig, j: usize, neg_idx: usize) -> (bool, PhantomConfig) {
    let mut cfg = template.clone();
    cfg.artifacts = ArtifactFlags::default();
    let positive = j % 8 < 5;
    if positive {
        cfg.n_lesions = 1 + (j % 3);
        cfg.morphologies = Some(match j % 3 {
            0 => vec![Morphology::Flat],
            1 => vec![Morphology::Tabletop, Morphology::Forward],
            _ => vec![Morphology::Flat, Morphology::Tabletop, Morphology::Forward],
        });
        match (j + j / 8) % 4 {
            0 => {}
            1 => cfg.artifacts.vessel_protrusion = 0.8,
            2 => cfg.artifacts.decorrelation_noise = 0.6,
            _ => cfg.artifacts.microsaccade = 0.7,
        }
    } else {
        cfg.n_lesions = 0;
        cfg.morphologies = None;
        cfg.artifacts.vessel_protrusion = 0.8;
        cfg.artifacts.decorrelation_noise = 0.5;
        if neg_idx % 2 == 0 {
            cfg.artifacts.hemorrhage_mimic = 0.8;
        }
        if neg_idx % 3 == 2 {
            cfg.artifacts.microsaccade = 0.6;
        }
    }
    (positive, cfg)
}

fn artifact_kinds(flags: &ArtifactFlags) -> Vec<ArtifactKind> {
    let mut out = Vec::new();
    if flags.vessel_protrusion > 0.0 {
        out.push(ArtifactKind::VesselProtrusion);
    }
    if flags.microsaccade > 0.0 {
        out.push(ArtifactKind::Microsaccade);
    }
    if flags.decorrelation_noise > 0.0 {
        out.push(ArtifactKind::DecorrelationNoise);
    }
    if flags.hemorrhage_mimic > 0.0 {
        out.push(ArtifactKind::HemorrhageMimic);
    }
    out
}

/// Generate a train/test dataset on disk and return its manifest. Case
/// geometry and signal levels come from the template; lesion counts and
/// artifact mixes follow the internal schedule.
pub fn generate_dataset(
    template: &PhantomConfig,
    n_train: usize,
    n_test: usize,
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    if n_train == 0 || n_test == 0 {
        return Err(config_err!(
            "dataset needs at least one case per split, got {n_train}/{n_test}"
        ));
    }
    std::fs::create_dir_all(dir)?;
    let mut cases = Vec::new();
    let mut neg_seen = [0usize; 2];
    for gi in 0..n_train + n_test {
        let (split, j) = if gi < n_train {
            (Split::Train, gi)
        } else {
            (Split::Test, gi - n_train)
        };
        let si = if split == Split::Train { 0 } else { 1 };
        let (positive, mut cfg) = schedule_case(template, j, neg_seen[si]);
        if !positive {
            neg_seen[si] += 1;
        }
        cfg.seed = splitmix64(seed ^ (gi as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));

        let id = format!("case{gi:03}");
        let files = CaseFiles {
            oct: format!("{id}_oct.ovol"),
            octa: format!("{id}_octa.ovol"),
            vri: format!("{id}_vri.ovol"),
            lesions: format!("{id}_lesions.ovol"),
            truth: format!("truth_{id}.json"),
        };

        let (oct, octa, truth) = generate_phantom(&cfg)?;
        ovol::save_volume(&oct, &dir.join(&files.oct))?;
        ovol::save_volume(&octa, &dir.join(&files.octa))?;
        let vri_mask = surface_to_mask(&truth.vri, cfg.nz)?;
        ovol::save_volume(&vri_mask.to_volume(cfg.spacing)?, &dir.join(&files.vri))?;
        ovol::save_volume(
            &truth.lesions.to_volume(cfg.spacing)?,
            &dir.join(&files.lesions),
        )?;
        let tf = TruthFile {
            id: id.clone(),
            seed: cfg.seed,
            flow_threshold: truth.flow_threshold,
            morphologies: truth.morphologies.clone(),
            artifacts: truth.artifacts.clone(),
            config: cfg.clone(),
            vri_file: files.vri.clone(),
            lesions_file: files.lesions.clone(),
        };
        std::fs::write(dir.join(&files.truth), serde_json::to_string_pretty(&tf)?)?;

        cases.push(CaseEntry {
            id,
            split,
            positive,
            n_lesions: cfg.n_lesions,
            artifacts: artifact_kinds(&cfg.artifacts),
            seed: cfg.seed,
            files,
        });
    }
    let manifest = DatasetManifest {
        seed,
        n_train,
        n_test,
        template: template.clone(),
        cases,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A case read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub id: String,
    pub oct: Volume,
    pub octa: Volume,
    pub truth: PhantomTruth,
}

pub fn load_case(dir: &Path, entry: &CaseEntry) -> Result<LoadedCase> {
    let oct = ovol::load_volume(&dir.join(&entry.files.oct))?;
    let octa = ovol::load_volume(&dir.join(&entry.files.octa))?;
    let vri_vol = ovol::load_volume(&dir.join(&entry.files.vri))?;
    let lesion_vol = ovol::load_volume(&dir.join(&entry.files.lesions))?;
    let text = std::fs::read_to_string(dir.join(&entry.files.truth))?;
    let tf: TruthFile = serde_json::from_str(&text)?;
    Ok(LoadedCase {
        id: entry.id.clone(),
        oct,
        octa,
        truth: PhantomTruth {
            vri: mask_to_surface(&VriMask::from_volume(&vri_vol)),
            lesions: LesionMask::from_volume(&lesion_vol)?,
            morphologies: tf.morphologies,
            artifacts: tf.artifacts,
            flow_threshold: tf.flow_threshold,
        },
    })
}

// ============================================================
// Tests
// ============================================================
