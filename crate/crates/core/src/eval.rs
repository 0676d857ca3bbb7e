//! Uncertainty/error association metrics, threshold curves, noise
//! sensitivity and per-ROI statistics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::bundle::{PredictionBundle, Provenance, UncertaintyKind};
use crate::error::{Error, Result};
use crate::phantom::{PatientCase, ROI_NAMES};
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Histogram bins per axis for mutual information.
    pub mi_bins: usize,
    /// Histogram bins for the KL-from-uniform statistic.
    pub kl_bins: usize,
    /// Number of percentile thresholds on each threshold curve.
    pub threshold_count: usize,
    pub noise_sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mi_bins: 64,
            kl_bins: 64,
            threshold_count: 100,
            noise_sigma: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mi_bins < 2 || self.kl_bins < 2 || self.threshold_count < 1 {
            return Err(Error::Config(format!("invalid eval settings {self:?}")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("invalid noise sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided p-value from the t approximation with `n - 2` degrees of
    /// freedom.
    pub p_value: f64,
    pub n: usize,
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average-rank ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "spearman inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("spearman needs 3 or more samples, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("spearman inputs must be finite".into()));
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::Degenerate("spearman of a constant sample".into()))?;
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Spearman { rho, p_value, n })
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let b = ((v - lo) / (hi - lo) * bins as f64) as usize;
    b.min(bins - 1)
}

fn range(values: &[f64], what: &str) -> Result<(f64, f64)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Degenerate(format!("{what} has a degenerate range [{lo}, {hi}]")));
    }
    Ok((lo, hi))
}

/// Mutual information in nats from an equal-width 2-D histogram spanning
/// the observed ranges.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "mutual information needs equal non-empty inputs, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    let (xl, xh) = range(x, "x")?;
    let (yl, yh) = range(y, "y")?;
    let mut joint = vec![0u64; bins * bins];
    let mut px = vec![0u64; bins];
    let mut py = vec![0u64; bins];
    for (&a, &b) in x.iter().zip(y) {
        let i = bin_index(a, xl, xh, bins);
        let j = bin_index(b, yl, yh, bins);
        joint[i * bins + j] += 1;
        px[i] += 1;
        py[j] += 1;
    }
    let n = x.len() as f64;
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (px[i] as f64 * py[j] as f64)).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSample {
    pub threshold: f64,
    /// `None` when no voxel survives the threshold.
    pub median_error: Option<f64>,
    pub retained_fraction: f64,
}

/// Median error over samples with uncertainty at most each threshold.
pub fn threshold_curve(errors: &[f64], uncertainty: &[f64], thresholds: &[f64]) -> Result<Vec<ThresholdSample>> {
    if errors.len() != uncertainty.len() || errors.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "threshold curve needs matching non-empty inputs, got {} and {}",
            errors.len(),
            uncertainty.len()
        )));
    }
    if thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("thresholds must be strictly increasing".into()));
    }
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| uncertainty[a].total_cmp(&uncertainty[b]).then(a.cmp(&b)));
    let n = errors.len() as f64;
    let mut prefix = Vec::with_capacity(errors.len());
    let mut taken = 0;
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        while taken < order.len() && uncertainty[order[taken]] <= t {
            prefix.push(errors[order[taken]]);
            taken += 1;
        }
        let mut scratch = prefix.clone();
        out.push(ThresholdSample {
            threshold: t,
            median_error: stats::median(&mut scratch),
            retained_fraction: taken as f64 / n,
        });
    }
    Ok(out)
}

/// Strictly increasing thresholds at the `1/count, ..., count/count`
/// quantiles of `values` (duplicates dropped).
pub fn percentile_thresholds(values: &[f64], count: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(count);
    if sorted.is_empty() {
        return out;
    }
    for k in 1..=count {
        let idx = ((k as f64 / count as f64) * sorted.len() as f64).ceil() as usize;
        let t = sorted[idx.clamp(1, sorted.len()) - 1];
        if out.last().is_none_or(|&last| t > last) {
            out.push(t);
        }
    }
    out
}

/// Divides thresholds and median errors by their maxima.
pub fn normalize_curve(curve: &[ThresholdSample]) -> Vec<ThresholdSample> {
    let tmax = curve.iter().map(|s| s.threshold).fold(0.0, f64::max);
    let emax = curve
        .iter()
        .filter_map(|s| s.median_error)
        .fold(0.0, f64::max);
    curve
        .iter()
        .map(|s| ThresholdSample {
            threshold: if tmax > 0.0 { s.threshold / tmax } else { s.threshold },
            median_error: s.median_error.map(|e| if emax > 0.0 { e / emax } else { e }),
            retained_fraction: s.retained_fraction,
        })
        .collect()
}

/// Means of the defined median errors over consecutive windows of
/// `window` samples.
pub fn window_means(curve: &[ThresholdSample], window: usize) -> Vec<f64> {
    curve
        .chunks(window.max(1))
        .filter_map(|chunk| {
            let vals: Vec<f64> = chunk.iter().filter_map(|s| s.median_error).collect();
            stats::mean(&vals)
        })
        .collect()
}

/// Values divided by their maximum.
pub fn normalize_by_max(values: &[f64]) -> Result<Vec<f64>> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::Degenerate(
            "uncertainty map has no positive values; normalization undefined".into(),
        ));
    }
    Ok(values.iter().map(|v| v / max).collect())
}

/// Empirical CDF evaluated at `points`.
pub fn ecdf(values: &[f64], points: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    points
        .iter()
        .map(|&p| sorted.partition_point(|&v| v <= p) as f64 / n)
        .collect()
}

/// KL divergence (nats) of the Laplace-smoothed histogram of `values`
/// (expected in `[0, 1]`) from the uniform density.
pub fn kl_from_uniform(values: &[f64], bins: usize) -> f64 {
    let mut counts = vec![1.0f64; bins];
    for &v in values {
        counts[bin_index(v.clamp(0.0, 1.0), 0.0, 1.0, bins)] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| {
            let p = c / total;
            p * (p * bins as f64).ln()
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSensitivity {
    pub label: String,
    pub kl_clean: f64,
    pub kl_noisy: f64,
    /// `(kl_noisy - kl_clean) / kl_clean`.
    pub fractional_change: f64,
    pub ecdf_points: Vec<f64>,
    pub ecdf_clean: Vec<f64>,
    pub ecdf_noisy: Vec<f64>,
}

/// Compares max-normalized uncertainty distributions before and after
/// noise injection.
pub fn noise_sensitivity(label: &str, clean: &[f64], noisy: &[f64], bins: usize) -> Result<NoiseSensitivity> {
    let clean = normalize_by_max(clean)?;
    let noisy = normalize_by_max(noisy)?;
    let kl_clean = kl_from_uniform(&clean, bins);
    let kl_noisy = kl_from_uniform(&noisy, bins);
    let points: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
    Ok(NoiseSensitivity {
        label: label.to_string(),
        kl_clean,
        kl_noisy,
        fractional_change: (kl_noisy - kl_clean) / kl_clean,
        ecdf_clean: ecdf(&clean, &points),
        ecdf_noisy: ecdf(&noisy, &points),
        ecdf_points: points,
    })
}

/// Valid-voxel samples pooled over cases.
#[derive(Clone, Debug, Default)]
pub struct Pooled {
    pub errors: Vec<f64>,
    pub uncertainty: Vec<f64>,
}

/// Pools `|dose - truth|` and one uncertainty map over valid voxels.
pub fn pool(bundles: &[PredictionBundle], cases: &[PatientCase], kind: UncertaintyKind) -> Result<Pooled> {
    check_pairs(bundles, cases)?;
    let mut out = Pooled::default();
    for (b, c) in bundles.iter().zip(cases) {
        let u = b
            .uncertainty(kind)
            .ok_or_else(|| Error::InvalidArgument(format!("bundle lacks a {} map", kind.as_str())))?;
        for i in 0..c.dose.len() {
            if c.valid.data()[i] != 0.0 {
                out.errors.push((b.dose.data()[i] as f64 - c.dose.data()[i] as f64).abs());
                out.uncertainty.push(u.data()[i] as f64);
            }
        }
    }
    Ok(out)
}

fn check_pairs(bundles: &[PredictionBundle], cases: &[PatientCase]) -> Result<()> {
    if bundles.len() != cases.len() || bundles.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} bundles for {} cases",
            bundles.len(),
            cases.len()
        )));
    }
    for (b, c) in bundles.iter().zip(cases) {
        b.dose.expect_shape(c.dose.shape(), &format!("prediction for {}", c.id))?;
    }
    Ok(())
}

/// Statistics of one uncertainty map within one ROI.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiUncertainty {
    pub kind: UncertaintyKind,
    pub mean: f64,
    /// `None` when the correlation is undefined (too few or constant samples).
    pub spearman: Option<Spearman>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiRow {
    pub roi: String,
    pub voxels: usize,
    pub mean_error: f64,
    pub uncertainties: Vec<RoiUncertainty>,
}

impl RoiRow {
    pub fn mean_uncertainty(&self, kind: UncertaintyKind) -> Option<f64> {
        self.uncertainties.iter().find(|u| u.kind == kind).map(|u| u.mean)
    }
}

/// Per-ROI means and correlations pooled over every case. ROIs that are
/// empty in every case are skipped and reported in the second value.
pub fn roi_table(bundles: &[PredictionBundle], cases: &[PatientCase]) -> Result<(Vec<RoiRow>, Vec<String>)> {
    check_pairs(bundles, cases)?;
    let kinds: Vec<UncertaintyKind> = bundles[0].uncertainties().iter().map(|(k, _)| *k).collect();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (r, name) in ROI_NAMES.iter().enumerate() {
        let mut errors = Vec::new();
        let mut us: Vec<Vec<f64>> = vec![Vec::new(); kinds.len()];
        for (b, c) in bundles.iter().zip(cases) {
            let mask = c.roi(r);
            for (i, &m) in mask.iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                errors.push((b.dose.data()[i] as f64 - c.dose.data()[i] as f64).abs());
                for (k, kind) in kinds.iter().enumerate() {
                    let map = b.uncertainty(*kind).ok_or_else(|| {
                        Error::InvalidArgument(format!("bundle lacks a {} map", kind.as_str()))
                    })?;
                    us[k].push(map.data()[i] as f64);
                }
            }
        }
        if errors.is_empty() {
            warnings.push(format!("ROI {name} is empty in every case; row omitted"));
            continue;
        }
        let uncertainties = kinds
            .iter()
            .zip(&us)
            .map(|(&kind, u)| RoiUncertainty {
                kind,
                mean: stats::mean(u).unwrap_or(0.0),
                spearman: spearman(u, &errors).ok(),
            })
            .collect();
        rows.push(RoiRow {
            roi: name.to_string(),
            voxels: errors.len(),
            mean_error: stats::mean(&errors).unwrap_or(0.0),
            uncertainties,
        });
    }
    Ok((rows, warnings))
}

/// Spearman between per-ROI mean uncertainty and per-ROI mean error.
pub fn cross_roi_spearman(rows: &[RoiRow], kind: UncertaintyKind) -> Result<Spearman> {
    let (u, e): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.mean_uncertainty(kind).map(|u| (u, r.mean_error)))
        .unzip();
    spearman(&u, &e)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KindMetrics {
    pub kind: UncertaintyKind,
    pub u_avg: f64,
    pub spearman_voxel: Option<Spearman>,
    pub spearman_patient: Option<Spearman>,
    pub mutual_information: Option<f64>,
    pub threshold_curve: Vec<ThresholdSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub family: Provenance,
    pub mae_gy: f64,
    pub kinds: Vec<KindMetrics>,
    pub roi_rows: Vec<RoiRow>,
    pub cross_roi: Option<Spearman>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn kind(&self, kind: UncertaintyKind) -> Option<&KindMetrics> {
        self.kinds.iter().find(|k| k.kind == kind)
    }
}

/// Computes every metric for one model family on one set of cases.
pub fn evaluate(bundles: &[PredictionBundle], cases: &[PatientCase], cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    check_pairs(bundles, cases)?;
    let family = bundles[0].provenance;
    let kinds: Vec<UncertaintyKind> = bundles[0].uncertainties().iter().map(|(k, _)| *k).collect();
    let mut warnings = Vec::new();
    let mut metrics = Vec::new();
    let mut mae_gy = 0.0;
    for kind in kinds {
        let pooled = pool(bundles, cases, kind)?;
        mae_gy = stats::mean(&pooled.errors)
            .ok_or_else(|| Error::Degenerate("no valid voxels in the evaluation set".into()))?;
        let note = |what: &str, e: &Error, warnings: &mut Vec<String>| {
            warnings.push(format!("{family} {}: {what} undefined: {e}", kind.as_str()));
        };
        let spearman_voxel = spearman(&pooled.uncertainty, &pooled.errors)
            .map_err(|e| note("voxelwise spearman", &e, &mut warnings))
            .ok();
        let mut per_case_u = Vec::new();
        let mut per_case_e = Vec::new();
        for (b, c) in bundles.iter().zip(cases) {
            let single = pool(std::slice::from_ref(b), std::slice::from_ref(c), kind)?;
            if let (Some(u), Some(e)) = (stats::mean(&single.uncertainty), stats::mean(&single.errors)) {
                per_case_u.push(u);
                per_case_e.push(e);
            }
        }
        let spearman_patient = spearman(&per_case_u, &per_case_e)
            .map_err(|e| note("patient-average spearman", &e, &mut warnings))
            .ok();
        let mutual_information = mutual_information(&pooled.uncertainty, &pooled.errors, cfg.mi_bins)
            .map_err(|e| note("mutual information", &e, &mut warnings))
            .ok();
        let thresholds = percentile_thresholds(&pooled.uncertainty, cfg.threshold_count);
        let curve = threshold_curve(&pooled.errors, &pooled.uncertainty, &thresholds)?;
        metrics.push(KindMetrics {
            kind,
            u_avg: stats::mean(&pooled.uncertainty).unwrap_or(0.0),
            spearman_voxel,
            spearman_patient,
            mutual_information,
            threshold_curve: curve,
        });
    }
    let (roi_rows, roi_warnings) = roi_table(bundles, cases)?;
    warnings.extend(roi_warnings);
    let primary = if family == Provenance::Evidential {
        UncertaintyKind::Epistemic
    } else {
        UncertaintyKind::Sample
    };
    let cross_roi = cross_roi_spearman(&roi_rows, primary)
        .map_err(|e| warnings.push(format!("{family}: cross-ROI spearman undefined: {e}")))
        .ok();
    Ok(MetricsReport {
        family,
        mae_gy,
        kinds: metrics,
        roi_rows,
        cross_roi,
        warnings,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl MetricsReport {
    /// `key = value` scalar section.
    pub fn scalars(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[{}]", self.family);
        let _ = writeln!(s, "mae_gy = {}", self.mae_gy);
        for k in &self.kinds {
            let name = k.kind.as_str();
            let _ = writeln!(s, "u_avg_{name} = {}", k.u_avg);
            let _ = writeln!(s, "spearman_voxel_{name} = {}", opt(k.spearman_voxel.map(|r| r.rho)));
            let _ = writeln!(s, "spearman_voxel_{name}_p = {}", opt(k.spearman_voxel.map(|r| r.p_value)));
            let _ = writeln!(s, "spearman_patient_{name} = {}", opt(k.spearman_patient.map(|r| r.rho)));
            let _ = writeln!(s, "spearman_patient_{name}_p = {}", opt(k.spearman_patient.map(|r| r.p_value)));
            let _ = writeln!(s, "mutual_information_{name} = {}", opt(k.mutual_information));
        }
        let _ = writeln!(s, "cross_roi_spearman = {}", opt(self.cross_roi.map(|r| r.rho)));
        let _ = writeln!(s, "cross_roi_spearman_p = {}", opt(self.cross_roi.map(|r| r.p_value)));
        for w in &self.warnings {
            let _ = writeln!(s, "# warning: {w}");
        }
        s
    }

    pub fn threshold_csv(&self) -> String {
        let mut s = String::from("kind,threshold,median_error,retained_fraction,threshold_norm,median_error_norm\n");
        for k in &self.kinds {
            let norm = normalize_curve(&k.threshold_curve);
            for (a, b) in k.threshold_curve.iter().zip(&norm) {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    k.kind.as_str(),
                    a.threshold,
                    opt(a.median_error),
                    a.retained_fraction,
                    b.threshold,
                    opt(b.median_error)
                );
            }
        }
        s
    }

    pub fn roi_csv(&self) -> String {
        let mut s = String::from("roi,voxels,mean_error_gy");
        let kinds: Vec<UncertaintyKind> = self.kinds.iter().map(|k| k.kind).collect();
        for kind in &kinds {
            let n = kind.as_str();
            let _ = write!(s, ",mean_u_{n},spearman_{n},spearman_{n}_p");
        }
        s.push('\n');
        for row in &self.roi_rows {
            let _ = write!(s, "{},{},{}", row.roi, row.voxels, row.mean_error);
            for u in &row.uncertainties {
                let _ = write!(
                    s,
                    ",{},{},{}",
                    u.mean,
                    opt(u.spearman.map(|r| r.rho)),
                    opt(u.spearman.map(|r| r.p_value))
                );
            }
            s.push('\n');
        }
        s
    }

    /// Writes `metrics.txt`, `threshold_curve.csv` and `roi_table.csv`
    /// into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("metrics.txt"), &self.scalars())?;
        write_text(&dir.join("threshold_curve.csv"), &self.threshold_csv())?;
        write_text(&dir.join("roi_table.csv"), &self.roi_csv())
    }
}

impl NoiseSensitivity {
    pub fn ecdf_csv(&self) -> String {
        let mut s = String::from("value,ecdf_clean,ecdf_noisy\n");
        for ((p, a), b) in self.ecdf_points.iter().zip(&self.ecdf_clean).zip(&self.ecdf_noisy) {
            let _ = writeln!(s, "{p},{a},{b}");
        }
        s
    }
}

/// Writes `ecdf_<label>.csv` for each entry plus `noise_summary.csv`.
pub fn write_noise_results(dir: &Path, results: &[NoiseSensitivity]) -> Result<()> {
    let mut summary = String::from("type,kl_clean,kl_noisy,fractional_change\n");
    for r in results {
        write_text(&dir.join(format!("ecdf_{}.csv", r.label)), &r.ecdf_csv())?;
        let _ = writeln!(summary, "{},{},{},{}", r.label, r.kl_clean, r.kl_noisy, r.fractional_change);
    }
    write_text(&dir.join("noise_summary.csv"), &summary)
}
