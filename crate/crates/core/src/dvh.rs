//! Dose-volume histograms, predictive-variance bands and DVH criteria.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::{PredictionBundle, UncertaintyKind};
use crate::error::{Error, Result};
use crate::phantom::{PatientCase, PTV_COUNT, ROI_NAMES};
use crate::tensor::Grid;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

/// How per-voxel standard deviation is formed from the uncertainty maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandForm {
    /// `sqrt(U_alea + U_epis)`, the law-of-total-variance form.
    #[default]
    AdditiveVariance,
    /// `sqrt(U_alea^2 + U_epis^2)`, taking the variance maps literally.
    CaptionQuadrature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DvhConfig {
    pub max_gy: f64,
    pub step_gy: f64,
    pub band_form: BandForm,
}

impl Default for DvhConfig {
    fn default() -> Self {
        DvhConfig {
            max_gy: 80.0,
            step_gy: 0.5,
            band_form: BandForm::AdditiveVariance,
        }
    }
}

impl DvhConfig {
    pub fn dose_grid(&self) -> Result<Vec<f64>> {
        if !(self.step_gy > 0.0 && self.max_gy > 0.0) {
            return Err(Error::Config(format!("invalid DVH grid {self:?}")));
        }
        let steps = (self.max_gy / self.step_gy).round() as usize;
        Ok((0..=steps).map(|k| k as f64 * self.step_gy).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DvhCurve {
    pub roi: String,
    pub dose_gy: Vec<f64>,
    pub volume_pct: Vec<f64>,
    pub band_low_pct: Option<Vec<f64>>,
    pub band_high_pct: Option<Vec<f64>>,
}

fn roi_values(dose: &[f32], mask: &[f32]) -> Result<Vec<f64>> {
    if dose.len() != mask.len() {
        return Err(Error::InvalidArgument(format!(
            "dose has {} voxels, mask {}",
            dose.len(),
            mask.len()
        )));
    }
    let values: Vec<f64> = dose
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m != 0.0)
        .map(|(&d, _)| d as f64)
        .collect();
    if values.is_empty() {
        return Err(Error::InvalidArgument("ROI is empty".into()));
    }
    Ok(values)
}

fn cumulative(values: &mut [f64], grid: &[f64]) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    grid.iter()
        .map(|&d| {
            let below = values.partition_point(|&v| v < d);
            100.0 * (values.len() - below) as f64 / n
        })
        .collect()
}

/// Percentage of ROI voxels receiving at least each grid dose.
pub fn dvh(roi: &str, dose: &[f32], mask: &[f32], grid: &[f64]) -> Result<DvhCurve> {
    let mut values = roi_values(dose, mask)?;
    Ok(DvhCurve {
        roi: roi.to_string(),
        dose_gy: grid.to_vec(),
        volume_pct: cumulative(&mut values, grid),
        band_low_pct: None,
        band_high_pct: None,
    })
}

/// Per-voxel predictive standard deviation in Gy.
///
/// Bundles carrying aleatoric and epistemic maps combine them per `form`;
/// bundles with a single sample variance use its square root.
pub fn predictive_std(bundle: &PredictionBundle, form: BandForm) -> Result<Grid> {
    for (kind, map) in bundle.uncertainties() {
        if map.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "{} uncertainty has negative or NaN entries",
                kind.as_str()
            )));
        }
    }
    match (bundle.aleatoric(), bundle.epistemic()) {
        (Some(a), Some(e)) => Ok(a.zip_map(e, |a, e| {
            let (a, e) = (a as f64, e as f64);
            match form {
                BandForm::AdditiveVariance => (a + e).sqrt() as f32,
                BandForm::CaptionQuadrature => (a * a + e * e).sqrt() as f32,
            }
        })?),
        _ => {
            let var = bundle
                .uncertainty(UncertaintyKind::Sample)
                .unwrap_or(&bundle.uncertainties()[0].1);
            Ok(var.map(|v| (v as f64).sqrt() as f32))
        }
    }
}

/// Nominal DVH of the predicted dose plus curves for `dose -/+ 1.96 sigma`
/// (the lower edge clamped at 0 Gy).
pub fn dvh_with_band(roi: &str, bundle: &PredictionBundle, mask: &[f32], grid: &[f64], form: BandForm) -> Result<DvhCurve> {
    let sigma = predictive_std(bundle, form)?;
    let dose = bundle.dose.data();
    let lo: Vec<f32> = dose
        .iter()
        .zip(sigma.data())
        .map(|(&d, &s)| (d as f64 - Z95 * s as f64).max(0.0) as f32)
        .collect();
    let hi: Vec<f32> = dose
        .iter()
        .zip(sigma.data())
        .map(|(&d, &s)| (d as f64 + Z95 * s as f64) as f32)
        .collect();
    let mut curve = dvh(roi, dose, mask, grid)?;
    curve.band_low_pct = Some(cumulative(&mut roi_values(&lo, mask)?, grid));
    curve.band_high_pct = Some(cumulative(&mut roi_values(&hi, mask)?, grid));
    Ok(curve)
}

impl DvhCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dose_gy,volume_pct,band_low_pct,band_high_pct\n");
        for i in 0..self.dose_gy.len() {
            let band = |b: &Option<Vec<f64>>| b.as_ref().map(|v| v[i].to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.dose_gy[i],
                self.volume_pct[i],
                band(&self.band_low_pct),
                band(&self.band_high_pct)
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Integral of `band_high - band_low` over the dose grid (trapezoids).
    pub fn band_area(&self) -> f64 {
        let (Some(lo), Some(hi)) = (&self.band_low_pct, &self.band_high_pct) else {
            return 0.0;
        };
        (1..self.dose_gy.len())
            .map(|i| {
                let w = self.dose_gy[i] - self.dose_gy[i - 1];
                0.5 * w * ((hi[i] - lo[i]) + (hi[i - 1] - lo[i - 1]))
            })
            .sum()
    }
}

/// Dose received by at least `x` percent of the ROI, interpolating linearly
/// between sorted voxel doses.
pub fn dose_at_volume(values: &[f64], x_pct: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&x_pct) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (100.0 - x_pct) / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Criteria for one ROI: `D_mean` and `D_0.1cc` (taken as the maximum) for
/// organs at risk, `D1`, `D95` and `D99` for targets.
pub fn roi_criteria(values: &[f64], is_target: bool) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    if is_target {
        [1.0, 95.0, 99.0]
            .iter()
            .filter_map(|&x| dose_at_volume(values, x))
            .collect()
    } else {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        vec![mean, max]
    }
}

/// Mean absolute difference of all DVH criteria between predicted and
/// reference doses, over every non-empty ROI of every case.
pub fn dvh_score(predicted: &[Grid], cases: &[PatientCase]) -> Result<f64> {
    if predicted.len() != cases.len() || cases.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} cases",
            predicted.len(),
            cases.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (pred, case) in predicted.iter().zip(cases) {
        pred.expect_shape(case.dose.shape(), &format!("prediction for {}", case.id))?;
        for r in 0..ROI_NAMES.len() {
            let mask = case.roi(r);
            let Ok(p) = roi_values(pred.data(), mask) else {
                continue;
            };
            let t = roi_values(case.dose.data(), mask)?;
            let is_target = r < PTV_COUNT;
            for (a, b) in roi_criteria(&p, is_target).iter().zip(roi_criteria(&t, is_target)) {
                total += (a - b).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("every ROI is empty; DVH score undefined".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::Provenance;
    use crate::tensor::Shape;

    fn grid() -> Vec<f64> {
        DvhConfig::default().dose_grid().unwrap()
    }

    #[test]
    fn basic_curves() {
        let g = grid();
        assert_eq!(g.len(), 161);
        let c = dvh("x", &[40.0, 60.0], &[1.0, 1.0], &g).unwrap();
        assert_eq!(c.volume_pct[0], 100.0);
        assert_eq!(c.volume_pct[100], 50.0);
        let single = dvh("x", &[50.0], &[1.0], &g).unwrap();
        assert_eq!(single.volume_pct[100], 100.0);
        assert_eq!(single.volume_pct[101], 0.0);
        assert!(dvh("x", &[1.0], &[0.0], &g).is_err());
    }

    #[test]
    fn band_edges_for_unit_sigma() {
        let shape = Shape::new(1, 1, 1, 1);
        let b = PredictionBundle::new(
            Provenance::Evidential,
            Grid::full(shape, 50.0),
            vec![
                (UncertaintyKind::Epistemic, Grid::full(shape, 0.25)),
                (UncertaintyKind::Aleatoric, Grid::full(shape, 0.75)),
            ],
        )
        .unwrap();
        // edges at 48.04 and 51.96; probe either side of each
        let g = [48.0, 48.03, 48.05, 51.95, 51.97];
        let c = dvh_with_band("x", &b, &[1.0], &g, BandForm::AdditiveVariance).unwrap();
        assert_eq!(c.band_low_pct.unwrap(), vec![100.0, 100.0, 0.0, 0.0, 0.0]);
        assert_eq!(c.band_high_pct.unwrap(), vec![100.0, 100.0, 100.0, 100.0, 0.0]);
    }

    #[test]
    fn predictive_std_examples() {
        let shape = Shape::new(1, 1, 1, 1);
        let make = |a: f32, e: f32| {
            PredictionBundle::new(
                Provenance::Evidential,
                Grid::full(shape, 10.0),
                vec![
                    (UncertaintyKind::Epistemic, Grid::full(shape, e)),
                    (UncertaintyKind::Aleatoric, Grid::full(shape, a)),
                ],
            )
            .unwrap()
        };
        let s = |b: &PredictionBundle| predictive_std(b, BandForm::AdditiveVariance).unwrap().data()[0];
        assert_eq!(s(&make(0.0, 0.0)), 0.0);
        assert_eq!(s(&make(1.0, 3.0)), 2.0);
        assert!(predictive_std(&make(-1.0, 3.0), BandForm::AdditiveVariance).is_err());
        let q = predictive_std(&make(3.0, 4.0), BandForm::CaptionQuadrature).unwrap();
        assert_eq!(q.data()[0], 5.0);
    }

    #[test]
    fn criteria_examples() {
        let values: Vec<f64> = (1..=10).map(|k| 10.0 * k as f64).collect();
        assert_eq!(roi_criteria(&values, false)[0], 55.0);
        assert_eq!(roi_criteria(&values, false)[1], 100.0);
        assert_eq!(dose_at_volume(&values, 100.0), Some(10.0));
        assert_eq!(dose_at_volume(&values, 0.0), Some(100.0));
    }
}
