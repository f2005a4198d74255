//! Volumetric data model and axis conventions.
//!
//! A [`Volume`] has shape (Z, X, Y): Z is the axial depth index (0 = top of
//! the scan, toward the vitreous), X the A-scan index within a B-scan, Y the
//! B-scan index. Voxels are stored Z-fastest, `idx = (y*X + x)*Z + z`, so an
//! A-scan column is one contiguous slice — surface search and en-face
//! projection walk straight runs of memory, and the on-disk payload order is
//! the in-memory order.

use crate::error::{bounds_err, config_err, shape_err, Result};
use crate::image::{Image, Mask2};

// ============================================================
// Modality and spacing
// ============================================================

/// What the payload of a volume container means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Oct,
    Octa,
    /// Binary vitreoretinal-interface mask ({0.0, 1.0} payload).
    VriMask,
    /// Binary en-face lesion mask (Z = 1, {0.0, 1.0} payload).
    LesionMask,
}

impl Modality {
    pub fn to_byte(self) -> u8 {
        match self {
            Modality::Oct => 0,
            Modality::Octa => 1,
            Modality::VriMask => 2,
            Modality::LesionMask => 3,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Modality::Oct),
            1 => Ok(Modality::Octa),
            2 => Ok(Modality::VriMask),
            3 => Ok(Modality::LesionMask),
            _ => Err(crate::error::format_err!("unknown modality byte {b}")),
        }
    }
}

/// Voxel spacing in µm per pixel: (axial, lateral-x, lateral-y).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Spacing {
    pub axial_um: f32,
    pub x_um: f32,
    pub y_um: f32,
}

impl Spacing {
    pub fn new(axial_um: f32, x_um: f32, y_um: f32) -> Result<Self> {
        if !(axial_um > 0.0 && x_um > 0.0 && y_um > 0.0) {
            return Err(config_err!(
                "spacings must be positive, got ({axial_um}, {x_um}, {y_um})"
            ));
        }
        Ok(Spacing {
            axial_um,
            x_um,
            y_um,
        })
    }

    /// En-face pixel area in mm².
    pub fn pixel_area_mm2(&self) -> f64 {
        (self.x_um as f64 / 1000.0) * (self.y_um as f64 / 1000.0)
    }
}

// ============================================================
// Volume
// ============================================================

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    nz: usize,
    nx: usize,
    ny: usize,
    spacing: Spacing,
    modality: Modality,
    data: Vec<f32>,
}

impl Volume {
    pub fn zeros(nz: usize, nx: usize, ny: usize, spacing: Spacing, modality: Modality) -> Result<Self> {
        if nz == 0 || nx == 0 || ny == 0 {
            return Err(config_err!("volume dims must be >= 1, got ({nz}, {nx}, {ny})"));
        }
        Ok(Volume {
            nz,
            nx,
            ny,
            spacing,
            modality,
            data: vec![0.0; nz * nx * ny],
        })
    }

    pub fn from_vec(
        nz: usize,
        nx: usize,
        ny: usize,
        spacing: Spacing,
        modality: Modality,
        data: Vec<f32>,
    ) -> Result<Self> {
        if nz == 0 || nx == 0 || ny == 0 {
            return Err(config_err!("volume dims must be >= 1, got ({nz}, {nx}, {ny})"));
        }
        if data.len() != nz * nx * ny {
            return Err(shape_err!(
                "volume ({nz}, {nx}, {ny}) wants {} voxels, got {}",
                nz * nx * ny,
                data.len()
            ));
        }
        Ok(Volume {
            nz,
            nx,
            ny,
            spacing,
            modality,
            data,
        })
    }

    pub fn nz(&self) -> usize {
        self.nz
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nz, self.nx, self.ny)
    }
    pub fn spacing(&self) -> Spacing {
        self.spacing
    }
    pub fn modality(&self) -> Modality {
        self.modality
    }
    pub fn set_modality(&mut self, m: Modality) {
        self.modality = m;
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, z: usize, x: usize, y: usize) -> usize {
        (y * self.nx + x) * self.nz + z
    }

    #[inline]
    pub fn at(&self, z: usize, x: usize, y: usize) -> f32 {
        self.data[(y * self.nx + x) * self.nz + z]
    }

    #[inline]
    pub fn set(&mut self, z: usize, x: usize, y: usize, v: f32) {
        self.data[(y * self.nx + x) * self.nz + z] = v;
    }

    /// Contiguous A-scan column at (x, y), length Z.
    #[inline]
    pub fn column(&self, x: usize, y: usize) -> &[f32] {
        let base = (y * self.nx + x) * self.nz;
        &self.data[base..base + self.nz]
    }

    #[inline]
    pub fn column_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let base = (y * self.nx + x) * self.nz;
        &mut self.data[base..base + self.nz]
    }

    /// B-scan at index y as an image with width = X, height = Z
    /// (so image columns are A-scans).
    pub fn bscan(&self, y: usize) -> Image<f32> {
        let mut img = Image::zeros(self.nx, self.nz);
        for x in 0..self.nx {
            let col = self.column(x, y);
            for (z, &v) in col.iter().enumerate() {
                img.set(x, z, v);
            }
        }
        img
    }

    pub fn same_dims(&self, other: &Volume) -> bool {
        self.dims() == other.dims()
    }
}

// ============================================================
// VRI surface and mask
// ============================================================

/// Per-column depth of the first retina voxel; shape (X, Y), stored
/// row-major with `idx = y*X + x`. The sentinel value Z marks a column with
/// no retina at all.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VriSurface {
    nx: usize,
    ny: usize,
    z: Vec<usize>,
}

impl VriSurface {
    pub fn filled(nx: usize, ny: usize, z: usize) -> Self {
        VriSurface {
            nx,
            ny,
            z: vec![z; nx * ny],
        }
    }

    pub fn from_vec(nx: usize, ny: usize, z: Vec<usize>) -> Result<Self> {
        if z.len() != nx * ny {
            return Err(shape_err!(
                "surface ({nx}, {ny}) wants {} entries, got {}",
                nx * ny,
                z.len()
            ));
        }
        Ok(VriSurface { nx, ny, z })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn values(&self) -> &[usize] {
        &self.z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> usize {
        self.z[y * self.nx + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize) {
        self.z[y * self.nx + x] = z;
    }
}

/// Binary per-voxel labels, shape (Z, X, Y): 0 = vitreous (above the VRI),
/// 1 = retina (at/below). Same Z-fastest layout as [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VriMask {
    nz: usize,
    nx: usize,
    ny: usize,
    labels: Vec<bool>,
}

impl VriMask {
    pub fn new(nz: usize, nx: usize, ny: usize) -> Self {
        VriMask {
            nz,
            nx,
            ny,
            labels: vec![false; nz * nx * ny],
        }
    }

    pub fn from_vec(nz: usize, nx: usize, ny: usize, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != nz * nx * ny {
            return Err(shape_err!(
                "mask ({nz}, {nx}, {ny}) wants {} labels, got {}",
                nz * nx * ny,
                labels.len()
            ));
        }
        Ok(VriMask {
            nz,
            nx,
            ny,
            labels,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nz, self.nx, self.ny)
    }

    #[inline]
    pub fn get(&self, z: usize, x: usize, y: usize) -> bool {
        self.labels[(y * self.nx + x) * self.nz + z]
    }

    #[inline]
    pub fn set(&mut self, z: usize, x: usize, y: usize, v: bool) {
        self.labels[(y * self.nx + x) * self.nz + z] = v;
    }

    #[inline]
    pub fn column(&self, x: usize, y: usize) -> &[bool] {
        let base = (y * self.nx + x) * self.nz;
        &self.labels[base..base + self.nz]
    }

    /// Pack into a {0.0, 1.0} volume container for file I/O.
    pub fn to_volume(&self, spacing: Spacing) -> Result<Volume> {
        Volume::from_vec(
            self.nz,
            self.nx,
            self.ny,
            spacing,
            Modality::VriMask,
            self.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Interpret a volume payload as binary labels (> 0.5 is retina).
    pub fn from_volume(v: &Volume) -> Self {
        VriMask {
            nz: v.nz(),
            nx: v.nx(),
            ny: v.ny(),
            labels: v.data().iter().map(|&f| f > 0.5).collect(),
        }
    }
}

/// Fit the best step function to each column of a binary mask: find the z*
/// minimizing the Hamming distance to (0 above z*, 1 at/below z*), breaking
/// ties toward the smallest z*. Robust against isolated misclassified
/// voxels, unlike a first-transition scan.
pub fn mask_to_surface(m: &VriMask) -> VriSurface {
    let (nz, nx, ny) = m.dims();
    let mut surf = VriSurface::filled(nx, ny, nz);
    for y in 0..ny {
        for x in 0..nx {
            let col = m.column(x, y);
            // ones[k] = number of retina labels among col[0..k]
            let total_ones: usize = col.iter().filter(|&&b| b).count();
            let mut ones_before = 0usize;
            let mut best_z = 0usize;
            let mut best_cost = usize::MAX;
            for zstar in 0..=nz {
                // cost = ones above the step + zeros at/below it
                let zeros_after = (nz - zstar) - (total_ones - ones_before);
                let cost = ones_before + zeros_after;
                if cost < best_cost {
                    best_cost = cost;
                    best_z = zstar;
                }
                if zstar < nz && col[zstar] {
                    ones_before += 1;
                }
            }
            surf.set(x, y, best_z);
        }
    }
    surf
}

/// Expand a surface back into per-voxel labels: retina at every z >= z[x,y].
pub fn surface_to_mask(s: &VriSurface, depth: usize) -> Result<VriMask> {
    let (nx, ny) = (s.nx(), s.ny());
    if let Some(&bad) = s.values().iter().find(|&&z| z > depth) {
        return Err(bounds_err!(
            "surface value {bad} exceeds volume depth {depth}"
        ));
    }
    let mut m = VriMask::new(depth, nx, ny);
    for y in 0..ny {
        for x in 0..nx {
            let z0 = s.get(x, y);
            for z in z0..depth {
                m.set(z, x, y, true);
            }
        }
    }
    Ok(m)
}

// ============================================================
// En-face lesion mask
// ============================================================

/// One 8-connected lesion component on the en-face grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionComponent {
    pub area_px: usize,
    pub area_mm2: f64,
    /// Pixel-coordinate centroid (x, y).
    pub centroid: (f64, f64),
    pub pixels: Vec<(usize, usize)>,
}

/// Binary en-face lesion mask, shape (X, Y), with its component summary.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionMask {
    pub mask: Mask2,
    pub components: Vec<LesionComponent>,
}

impl LesionMask {
    pub fn from_mask(mask: Mask2, spacing: Spacing) -> Self {
        let px_area = spacing.pixel_area_mm2();
        let components = mask
            .components()
            .into_iter()
            .map(|pixels| {
                let n = pixels.len();
                let sx: f64 = pixels.iter().map(|&(x, _)| x as f64).sum();
                let sy: f64 = pixels.iter().map(|&(_, y)| y as f64).sum();
                LesionComponent {
                    area_px: n,
                    area_mm2: n as f64 * px_area,
                    centroid: (sx / n as f64, sy / n as f64),
                    pixels,
                }
            })
            .collect();
        LesionMask { mask, components }
    }

    pub fn total_area_px(&self) -> usize {
        self.components.iter().map(|c| c.area_px).sum()
    }

    /// Pack into a Z=1 volume container for file I/O.
    pub fn to_volume(&self, spacing: Spacing) -> Result<Volume> {
        Volume::from_vec(
            1,
            self.mask.width(),
            self.mask.height(),
            spacing,
            Modality::LesionMask,
            self.mask
                .data()
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        if v.nz() != 1 {
            return Err(shape_err!("lesion mask volume must have Z=1, got Z={}", v.nz()));
        }
        let mask = Mask2::from_vec(
            v.nx(),
            v.ny(),
            v.data().iter().map(|&f| f > 0.5).collect(),
        )?;
        Ok(Self::from_mask(mask, v.spacing()))
    }
}

// ============================================================
// Triplet extraction
// ============================================================

/// Stack three consecutive B-scans from each modality into six channels:
/// `[OCT(y-1), OCT(y), OCT(y+1), OCTA(y-1), OCTA(y), OCTA(y+1)]`.
/// Out-of-range neighbours replicate the edge B-scan rather than zero-fill.
pub fn extract_triplet(v_oct: &Volume, v_octa: &Volume, y: usize) -> Result<[Image<f32>; 6]> {
    if !v_oct.same_dims(v_octa) {
        return Err(shape_err!(
            "modality shape mismatch: OCT {:?} vs OCTA {:?}",
            v_oct.dims(),
            v_octa.dims()
        ));
    }
    if y >= v_oct.ny() {
        return Err(bounds_err!("B-scan index {y} out of range (Y={})", v_oct.ny()));
    }
    let clamp = |i: isize| -> usize { i.clamp(0, v_oct.ny() as isize - 1) as usize };
    let ys = [clamp(y as isize - 1), y, clamp(y as isize + 1)];
    Ok([
        v_oct.bscan(ys[0]),
        v_oct.bscan(ys[1]),
        v_oct.bscan(ys[2]),
        v_octa.bscan(ys[0]),
        v_octa.bscan(ys[1]),
        v_octa.bscan(ys[2]),
    ])
}
