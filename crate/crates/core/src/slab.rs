//! En-face slab projections over the vitreoretinal interface.
//!
//! Five maximum-intensity projections feed the stage-2 network: OCT and
//! OCTA over the vitreous slab `[0, z)`, OCT and OCTA over a thin
//! sub-interface band `[z, z+d)` (the GCC band, 80 µm deep), and a
//! vessel-suppressed OCTA channel obtained by subtracting a scaled GCC
//! projection from the vitreous projection. The interface voxel itself
//! belongs to the retina, so the vitreous slab is half-open at `z`.

use crate::error::{bounds_err, config_err, shape_err, Result};
use crate::image::Image;
use crate::preprocess::normalize_channel;
use crate::scalar::Scalar;
use crate::volume::{Modality, Volume, VriSurface};

/// Axial depth of the sub-interface band in micrometres.
pub const GCC_BAND_UM: f64 = 80.0;

/// Default scale for vessel-shadow subtraction.
pub const DEFAULT_SUBTRACT_K: f32 = 0.8;

// ==== depth conversion =======================================================

/// Band depth in voxels for a given axial spacing (µm/px), rounded
/// half-away-from-zero.
pub fn gcc_depth_px(axial_um: f32) -> usize {
    (GCC_BAND_UM / axial_um as f64).round() as usize
}

// ==== projections ============================================================

fn check_aligned(v: &Volume, s: &VriSurface) -> Result<()> {
    if v.nx() != s.nx() || v.ny() != s.ny() {
        return Err(shape_err!(
            "surface {}x{} does not match volume {}x{}",
            s.nx(),
            s.ny(),
            v.nx(),
            v.ny()
        ));
    }
    for (i, &z) in s.values().iter().enumerate() {
        if z > v.nz() {
            return Err(bounds_err!(
                "surface z={} exceeds depth {} at column {}",
                z,
                v.nz(),
                i
            ));
        }
    }
    Ok(())
}

fn project_range(
    v: &Volume,
    s: &VriSurface,
    range: impl Fn(usize) -> (usize, usize),
) -> Result<Image<f32>> {
    check_aligned(v, s)?;
    let mut out = Image::zeros(v.nx(), v.ny());
    for y in 0..v.ny() {
        for x in 0..v.nx() {
            let (z0, z1) = range(s.get(x, y));
            let (lo, hi) = (z0.min(v.nz()), z1.min(v.nz()));
            let col = v.column(x, y);
            let m = col[lo..hi].iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            out.set(x, y, if hi > lo { m } else { 0.0 });
        }
    }
    Ok(out)
}

/// Maximum projection over the vitreous slab `[0, z)`. Columns whose
/// surface sits at the top of the volume (`z = 0`) project to 0.
pub fn project_vitreous(v: &Volume, s: &VriSurface) -> Result<Image<f32>> {
    project_range(v, s, |z| (0, z))
}

/// Maximum projection over the sub-interface band `[z, min(z+d, Z))`,
/// where `d` is [`gcc_depth_px`] of the volume's axial spacing.
pub fn project_gcc(v: &Volume, s: &VriSurface) -> Result<Image<f32>> {
    let d = gcc_depth_px(v.spacing().axial_um);
    project_range(v, s, |z| (z, z.saturating_add(d)))
}

/// Vessel-shadow suppression: `max(0, vitreous − k·gcc)` elementwise.
pub fn subtract_octa<T: Scalar>(vitreous: &Image<T>, gcc: &Image<T>, k: T) -> Result<Image<T>> {
    if vitreous.width() != gcc.width() || vitreous.height() != gcc.height() {
        return Err(shape_err!(
            "projection shapes differ: {}x{} vs {}x{}",
            vitreous.width(),
            vitreous.height(),
            gcc.width(),
            gcc.height()
        ));
    }
    if k < T::zero() {
        return Err(config_err!("subtraction scale must be non-negative"));
    }
    let mut out = vitreous.clone();
    for (o, g) in out.data_mut().iter_mut().zip(gcc.data()) {
        *o = (*o - k * *g).max(T::zero());
    }
    Ok(out)
}

// ==== stack ==================================================================

/// Where a stack came from: enough to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct StackProvenance {
    pub oct_id: String,
    pub octa_id: String,
    pub surface_id: String,
    pub k: f32,
}

/// The five raw en-face projections for one eye, plus provenance.
///
/// Values are raw projection intensities; [`EnFaceStack::to_network_input`]
/// applies the per-channel normalization the networks expect. The
/// subtracted channel is always computed from raw projections — z-scored
/// signals change sign, which would make "suppression by subtraction"
/// meaningless.
#[derive(Debug, Clone)]
pub struct EnFaceStack {
    pub oct_vitreous: Image<f32>,
    pub octa_vitreous: Image<f32>,
    pub oct_gcc: Image<f32>,
    pub octa_gcc: Image<f32>,
    pub octa_subtracted: Image<f32>,
    pub provenance: StackProvenance,
}

impl EnFaceStack {
    pub fn width(&self) -> usize {
        self.oct_vitreous.width()
    }

    pub fn height(&self) -> usize {
        self.oct_vitreous.height()
    }

    /// Channels in network order.
    pub fn channels(&self) -> [&Image<f32>; 5] {
        [
            &self.oct_vitreous,
            &self.octa_vitreous,
            &self.oct_gcc,
            &self.octa_gcc,
            &self.octa_subtracted,
        ]
    }

    /// Normalized copies of the five channels, in network order.
    pub fn to_network_input(&self) -> [Image<f32>; 5] {
        self.channels().map(|c| normalize_channel(c))
    }
}

/// Build the five projections from aligned OCT/OCTA volumes and a surface.
pub fn build_stack(
    oct: &Volume,
    octa: &Volume,
    surface: &VriSurface,
    k: f32,
    provenance: StackProvenance,
) -> Result<EnFaceStack> {
    if oct.modality() != Modality::Oct || octa.modality() != Modality::Octa {
        return Err(config_err!(
            "build_stack expects an OCT and an OCTA volume, got {:?}/{:?}",
            oct.modality(),
            octa.modality()
        ));
    }
    if !oct.same_dims(octa) {
        return Err(shape_err!(
            "OCT {:?} and OCTA {:?} dimensions differ",
            oct.dims(),
            octa.dims()
        ));
    }
    let octa_vitreous = project_vitreous(octa, surface)?;
    let octa_gcc = project_gcc(octa, surface)?;
    let octa_subtracted = subtract_octa(&octa_vitreous, &octa_gcc, k)?;
    Ok(EnFaceStack {
        oct_vitreous: project_vitreous(oct, surface)?,
        octa_vitreous,
        oct_gcc: project_gcc(oct, surface)?,
        octa_gcc,
        octa_subtracted,
        provenance,
    })
}

// ==== tests ==================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_volume(nz: usize, nx: usize, ny: usize, seed: u64, modality: Modality) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..nz * nx * ny).map(|_| rng.gen_range(-1.0..4.0)).collect();
        Volume::from_vec(
            nz,
            nx,
            ny,
            Spacing::new(3.05, 40.0, 40.0).unwrap(),
            modality,
            data,
        )
        .unwrap()
    }

    fn rand_surface(nx: usize, ny: usize, nz: usize, seed: u64) -> VriSurface {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VriSurface::from_vec(nx, ny, (0..nx * ny).map(|_| rng.gen_range(0..=nz)).collect())
            .unwrap()
    }

    fn brute_force_max(v: &Volume, x: usize, y: usize, z0: usize, z1: usize) -> f32 {
        let mut best = f32::NEG_INFINITY;
        let mut any = false;
        for z in z0..z1.min(v.nz()) {
            best = best.max(v.at(z, x, y));
            any = true;
        }
        if any {
            best
        } else {
            0.0
        }
    }

    #[test]
    fn gcc_depth_matches_device_resolutions() {
        assert_eq!(gcc_depth_px(3.05), 26);
        assert_eq!(gcc_depth_px(2.00), 40);
    }

    #[test]
    fn surface_at_top_projects_to_zero() {
        let v = rand_volume(10, 4, 3, 1, Modality::Octa);
        let s = VriSurface::filled(4, 3, 0);
        let img = project_vitreous(&v, &s).unwrap();
        assert!(img.data().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn surface_at_bottom_projects_full_depth() {
        let v = rand_volume(10, 4, 3, 2, Modality::Octa);
        let s = VriSurface::filled(4, 3, 10);
        let img = project_vitreous(&v, &s).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(img.get(x, y), brute_force_max(&v, x, y, 0, 10));
            }
        }
    }

    #[test]
    fn vitreous_projection_matches_brute_force_exactly() {
        let v = rand_volume(17, 9, 7, 3, Modality::Octa);
        let s = rand_surface(9, 7, 17, 4);
        let img = project_vitreous(&v, &s).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                assert_eq!(img.get(x, y), brute_force_max(&v, x, y, 0, s.get(x, y)));
            }
        }
    }

    #[test]
    fn gcc_projection_matches_brute_force_exactly() {
        let v = rand_volume(30, 8, 6, 5, Modality::Oct);
        let s = rand_surface(8, 6, 30, 6);
        let d = gcc_depth_px(v.spacing().axial_um);
        let img = project_gcc(&v, &s).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let z0 = s.get(x, y);
                assert_eq!(img.get(x, y), brute_force_max(&v, x, y, z0, z0 + d));
            }
        }
    }

    #[test]
    fn raising_surface_never_shrinks_vitreous_max() {
        let v = rand_volume(20, 6, 5, 7, Modality::Octa);
        let lo = rand_surface(6, 5, 10, 8);
        let mut hi = lo.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for y in 0..5 {
            for x in 0..6 {
                hi.set(x, y, lo.get(x, y) + rng.gen_range(0..=10));
            }
        }
        let a = project_vitreous(&v, &lo).unwrap();
        let b = project_vitreous(&v, &hi).unwrap();
        for (pa, pb) in a.data().iter().zip(b.data()) {
            // Empty-slab columns project to the 0 sentinel, which a deeper
            // all-negative slab may legitimately undercut; skip those.
            if *pa != 0.0 {
                assert!(pb >= pa, "deeper slab lost signal: {pa} -> {pb}");
            }
        }
    }

    #[test]
    fn surface_beyond_depth_is_rejected() {
        let v = rand_volume(10, 4, 3, 10, Modality::Octa);
        let s = VriSurface::filled(4, 3, 11);
        assert!(matches!(project_vitreous(&v, &s), Err(Error::Bounds(_))));
    }

    #[test]
    fn mismatched_surface_is_rejected() {
        let v = rand_volume(10, 4, 3, 11, Modality::Octa);
        let s = VriSurface::filled(5, 3, 0);
        assert!(matches!(project_vitreous(&v, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn subtraction_with_zero_scale_is_identity() {
        let v = rand_volume(10, 5, 4, 12, Modality::Octa);
        let s = rand_surface(5, 4, 10, 13);
        let vit = project_vitreous(&v, &s).unwrap();
        let gcc = project_gcc(&v, &s).unwrap();
        let out = subtract_octa(&vit, &gcc, 0.0).unwrap();
        assert_eq!(out.data(), vit.data());
    }

    #[test]
    fn subtraction_of_scaled_self_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let gcc = Image::from_vec(5, 4, (0..20).map(|_| rng.gen_range(0.0..3.0f32)).collect())
            .unwrap();
        // vit == k·gcc with the product rounded exactly as the subtraction
        // will recompute it.
        let vit = gcc.map(|p| 0.8f32 * p);
        let out = subtract_octa(&vit, &gcc, 0.8).unwrap();
        assert!(out.data().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn subtraction_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let vit = Image::from_vec(7, 5, (0..35).map(|_| rng.gen_range(0.0..3.0f32)).collect())
            .unwrap();
        let gcc = Image::from_vec(7, 5, (0..35).map(|_| rng.gen_range(0.0..3.0f32)).collect())
            .unwrap();
        let out = subtract_octa(&vit, &gcc, 0.8).unwrap();
        for i in 0..35 {
            let want = (vit.data()[i] - 0.8 * gcc.data()[i]).max(0.0);
            assert_eq!(out.data()[i], want);
            assert!(out.data()[i] >= 0.0 && out.data()[i] <= vit.data()[i]);
        }
    }

    #[test]
    fn stack_builds_all_channels_and_echoes_provenance() {
        let oct = rand_volume(12, 6, 5, 17, Modality::Oct);
        let octa = rand_volume(12, 6, 5, 18, Modality::Octa);
        let s = rand_surface(6, 5, 12, 19);
        let prov = StackProvenance {
            oct_id: "case3/oct".into(),
            octa_id: "case3/octa".into(),
            surface_id: "case3/vri".into(),
            k: 0.8,
        };
        let stack = build_stack(&oct, &octa, &s, 0.8, prov.clone()).unwrap();
        assert_eq!(stack.provenance, prov);
        assert_eq!(stack.width(), 6);
        assert_eq!(stack.height(), 5);
        for c in stack.channels() {
            assert_eq!((c.width(), c.height()), (6, 5));
        }
        assert!(stack.octa_subtracted.data().iter().all(|&p| p >= 0.0));
        // Subtraction happens on the raw projections.
        let want =
            subtract_octa(&stack.octa_vitreous, &stack.octa_gcc, 0.8).unwrap();
        assert_eq!(stack.octa_subtracted.data(), want.data());
        let norm = stack.to_network_input();
        assert_eq!(norm.len(), 5);
    }

    #[test]
    fn stack_rejects_swapped_modalities() {
        let oct = rand_volume(12, 6, 5, 20, Modality::Oct);
        let octa = rand_volume(12, 6, 5, 21, Modality::Octa);
        let s = rand_surface(6, 5, 12, 22);
        let prov = StackProvenance {
            oct_id: String::new(),
            octa_id: String::new(),
            surface_id: String::new(),
            k: 0.8,
        };
        assert!(matches!(
            build_stack(&octa, &oct, &s, 0.8, prov),
            Err(Error::Config(_))
        ));
    }
}
