//! Lesion change across ordered visits of one eye: membrane area, refined
//! vessel area, and vessel density within the membrane. Visits are
//! quantified independently — no inter-visit registration.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::image::Mask2;
use crate::volume::{LesionMask, Spacing};

/// Per-visit measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimepointRecord {
    pub membrane_area_mm2: f64,
    pub vessel_area_mm2: f64,
    /// Vessel pixels inside the membrane / membrane pixels; 0 when the
    /// membrane is empty.
    pub vessel_density: f64,
}

pub fn quantify_timepoint(
    mask: &LesionMask,
    vessels: &Mask2,
    spacing: Spacing,
) -> Result<TimepointRecord> {
    if !mask.mask.same_shape(vessels) {
        return Err(shape_err!(
            "membrane {}x{} vs vessel mask {}x{}",
            mask.mask.width(),
            mask.mask.height(),
            vessels.width(),
            vessels.height()
        ));
    }
    let px = spacing.pixel_area_mm2();
    let membrane_px = mask.mask.count();
    let inside = mask
        .mask
        .data()
        .iter()
        .zip(vessels.data())
        .filter(|(&m, &v)| m && v)
        .count();
    Ok(TimepointRecord {
        membrane_area_mm2: membrane_px as f64 * px,
        vessel_area_mm2: vessels.count() as f64 * px,
        vessel_density: if membrane_px == 0 {
            0.0
        } else {
            inside as f64 / membrane_px as f64
        },
    })
}

/// One row of the progression report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub visit_time_months: f64,
    pub membrane_area_mm2: f64,
    pub vessel_area_mm2: f64,
    pub vessel_density: f64,
    /// Membrane area change vs baseline.
    pub delta_area_mm2: f64,
    /// Membrane area rate over the preceding interval; 0 at baseline.
    pub rate_mm2_per_month: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressionSeries {
    pub visits: Vec<VisitRecord>,
}

impl ProgressionSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "visit_time_months,membrane_area_mm2,vessel_area_mm2,vessel_density,delta_area_mm2,rate_mm2_per_month\n",
        );
        for v in &self.visits {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                v.visit_time_months,
                v.membrane_area_mm2,
                v.vessel_area_mm2,
                v.vessel_density,
                v.delta_area_mm2,
                v.rate_mm2_per_month
            ));
        }
        out
    }
}

/// Fold ordered (visit time in months, record) pairs into the report.
pub fn progression_series(points: &[(f64, TimepointRecord)]) -> Result<ProgressionSeries> {
    if points.len() < 2 {
        return Err(config_err!(
            "progression needs >= 2 timepoints, got {}",
            points.len()
        ));
    }
    for w in points.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(config_err!(
                "visit times must strictly increase: {} then {}",
                w[0].0,
                w[1].0
            ));
        }
    }
    let baseline = points[0].1.membrane_area_mm2;
    let mut visits = Vec::with_capacity(points.len());
    for (i, (t, rec)) in points.iter().enumerate() {
        let rate = if i == 0 {
            0.0
        } else {
            let (tp, prev) = (&points[i - 1].0, &points[i - 1].1);
            (rec.membrane_area_mm2 - prev.membrane_area_mm2) / (t - tp)
        };
        visits.push(VisitRecord {
            visit_time_months: *t,
            membrane_area_mm2: rec.membrane_area_mm2,
            vessel_area_mm2: rec.vessel_area_mm2,
            vessel_density: rec.vessel_density,
            delta_area_mm2: rec.membrane_area_mm2 - baseline,
            rate_mm2_per_month: rate,
        });
    }
    Ok(ProgressionSeries { visits })
}
