mod common;

use evdose::bundle::{PredictionBundle, Provenance, UncertaintyKind};
use evdose::dvh::{dvh, dvh_score, dvh_with_band, predictive_std, roi_criteria, BandForm, DvhConfig};
use evdose::eval::{
    cross_roi_spearman, ecdf, evaluate, kl_from_uniform, mutual_information, noise_sensitivity, roi_table, spearman,
    threshold_curve, EvalConfig,
};
use evdose::evidential::NigVoxel;
use evdose::phantom::{generate_case, PatientCase};
use evdose::tensor::{Grid, Shape};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn case() -> PatientCase {
    generate_case("p0", 8, 5).unwrap()
}

fn bundle_for(c: &PatientCase, shift: f32, alea: f32, epis: f32) -> PredictionBundle {
    let dose = c.dose.map(|d| d + shift);
    let s = dose.shape();
    PredictionBundle::new(
        Provenance::Evidential,
        dose,
        vec![
            (UncertaintyKind::Epistemic, Grid::full(s, epis)),
            (UncertaintyKind::Aleatoric, Grid::full(s, alea)),
        ],
    )
    .unwrap()
}

#[test]
fn spearman_tabulated_examples() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert!((spearman(&x, &x).unwrap().rho - 1.0).abs() < 1e-10);
    let rev: Vec<f64> = x.iter().rev().copied().collect();
    assert!((spearman(&x, &rev).unwrap().rho + 1.0).abs() < 1e-10);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap().rho + 0.5).abs() < 1e-10);
    assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn mutual_information_identity_and_independence() {
    let x: Vec<f64> = (0..400).map(|i| (i % 4) as f64).collect();
    let mi = mutual_information(&x, &x, 4).unwrap();
    assert!((mi - 4f64.ln()).abs() < 1e-10, "{mi}");

    let mut r = common::rng(31);
    let a: Vec<f64> = (0..100_000).map(|_| r.random::<f64>()).collect();
    let b: Vec<f64> = (0..100_000).map(|_| r.random::<f64>()).collect();
    // Under independence 2n * MI is approximately chi-square with
    // (bins - 1)^2 degrees of freedom, which fixes the estimator's mean and
    // spread.
    let n = a.len() as f64;
    let dof = 63.0f64 * 63.0;
    let (mean, sd) = (dof / (2.0 * n), (2.0 * dof).sqrt() / (2.0 * n));
    let mi = mutual_information(&a, &b, 64).unwrap();
    assert!((mi - mean).abs() < 4.0 * sd, "independent MI {mi}, expected {mean} +/- {sd}");
    let coarse = mutual_information(&a, &b, 8).unwrap();
    assert!(coarse < 0.001, "8-bin MI {coarse}");
    let ab = mutual_information(&a, &b, 64).unwrap();
    let ba = mutual_information(&b, &a, 64).unwrap();
    assert!((ab - ba).abs() < 1e-12);
}

#[test]
fn kl_and_ecdf_oracles() {
    let mut r = common::rng(32);
    let u: Vec<f64> = (0..100_000).map(|_| r.random::<f64>()).collect();
    assert!(kl_from_uniform(&u, 64) <= 0.01);
    let points = [0.0, 0.5, u.iter().copied().fold(0.0, f64::max)];
    assert_eq!(ecdf(&u, &points)[2], 1.0);
    let same = noise_sensitivity("x", &u, &u, 64).unwrap();
    assert_eq!(same.fractional_change, 0.0);
}

#[test]
fn threshold_curve_oracles() {
    let c = threshold_curve(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[2.0, 3.0]).unwrap();
    assert_eq!(c[0].median_error, Some(1.5));
    assert_eq!(c[1].median_error, Some(2.0));
    assert_eq!(c[1].retained_fraction, 1.0);

    let mut r = common::rng(33);
    let e: Vec<f64> = (0..5000).map(|_| r.random::<f64>() * 10.0).collect();
    let t: Vec<f64> = (1..=50).map(|k| k as f64 * 0.2).collect();
    let curve = threshold_curve(&e, &e, &t).unwrap();
    let meds: Vec<f64> = curve.iter().filter_map(|s| s.median_error).collect();
    assert!(meds.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn roi_table_single_voxel_is_degenerate() {
    let mut c = case();
    let s = c.dose.shape();
    c.rois = Grid::zeros(s.with_channels(10));
    let target = c.rois.index([3, 0, 0, 0]);
    c.rois.data_mut()[target] = 1.0;
    let mut dose = c.dose.clone();
    dose.data_mut()[0] += 1.0;
    let b = PredictionBundle::new(
        Provenance::Evidential,
        dose,
        vec![(UncertaintyKind::Epistemic, Grid::full(s, 2.0)), (UncertaintyKind::Aleatoric, Grid::full(s, 0.5))],
    )
    .unwrap();
    let (rows, warnings) = roi_table(&[b], &[c]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(warnings.len(), 9);
    let row = &rows[0];
    assert_eq!(row.mean_error, 1.0);
    assert_eq!(row.mean_uncertainty(UncertaintyKind::Epistemic), Some(2.0));
    assert!(row.uncertainties.iter().all(|u| u.spearman.is_none()));
}

#[test]
fn roi_table_is_invariant_to_duplicating_cases() {
    let c = case();
    let mut r = common::rng(34);
    let s = c.dose.shape();
    let b = PredictionBundle::new(
        Provenance::Dropout,
        c.dose.map(|d| d + 1.0),
        vec![(UncertaintyKind::Sample, common::random_grid(&mut r, s, 0.0, 3.0))],
    )
    .unwrap();
    let (one, _) = roi_table(std::slice::from_ref(&b), std::slice::from_ref(&c)).unwrap();
    let (two, _) = roi_table(&[b.clone(), b], &[c.clone(), c]).unwrap();
    assert_eq!(one.len(), two.len());
    for (a, b) in one.iter().zip(&two) {
        assert!((a.mean_error - b.mean_error).abs() < 1e-12);
        for (ua, ub) in a.uncertainties.iter().zip(&b.uncertainties) {
            assert!((ua.mean - ub.mean).abs() < 1e-12 * ua.mean.abs().max(1.0));
            match (ua.spearman, ub.spearman) {
                (Some(x), Some(y)) => assert!((x.rho - y.rho).abs() < 1e-12),
                (None, None) => {}
                other => panic!("definedness changed: {other:?}"),
            }
        }
    }
    assert!(cross_roi_spearman(&one, UncertaintyKind::Sample).is_ok());
}

#[test]
fn evaluate_reports_every_kind() {
    let c = case();
    let b = bundle_for(&c, 2.0, 0.5, 1.5);
    let report = evaluate(&[b], &[c], &EvalConfig::default()).unwrap();
    assert!((report.mae_gy - 2.0).abs() < 1e-6);
    assert!(report.kind(UncertaintyKind::Epistemic).is_some());
    assert!(report.kind(UncertaintyKind::Aleatoric).is_some());
    assert!(report.scalars().contains("mae_gy"));
}

#[test]
fn dvh_examples() {
    let grid: Vec<f64> = vec![0.0, 50.0];
    let curve = dvh("x", &[40.0, 60.0], &[1.0, 1.0], &grid).unwrap();
    assert_eq!(curve.volume_pct, vec![100.0, 50.0]);
    let single = dvh("y", &[50.0], &[1.0], &[0.0, 50.0, 50.5]).unwrap();
    assert_eq!(single.volume_pct, vec![100.0, 100.0, 0.0]);
    assert!(dvh("z", &[1.0], &[0.0], &grid).is_err());
}

#[test]
fn dvh_score_examples() {
    let c = case();
    assert_eq!(dvh_score(std::slice::from_ref(&c.dose), std::slice::from_ref(&c)).unwrap(), 0.0);
    let shifted = c.dose.map(|d| d + 1.0);
    let s = dvh_score(&[shifted], &[c]).unwrap();
    assert!((s - 1.0).abs() < 1e-5, "{s}");
    let doses: Vec<f64> = (1..=10).map(|k| 10.0 * k as f64).collect();
    assert_eq!(roi_criteria(&doses, false)[0], 55.0);
}

#[test]
fn band_contains_the_nominal_curve() {
    let c = case();
    let mut r = common::rng(35);
    let s = c.dose.shape();
    let b = PredictionBundle::new(
        Provenance::Evidential,
        c.dose.clone(),
        vec![
            (UncertaintyKind::Epistemic, common::random_grid(&mut r, s, 0.0, 9.0)),
            (UncertaintyKind::Aleatoric, common::random_grid(&mut r, s, 0.0, 9.0)),
        ],
    )
    .unwrap();
    let grid = DvhConfig::default().dose_grid().unwrap();
    for form in [BandForm::AdditiveVariance, BandForm::CaptionQuadrature] {
        for roi in 0..10 {
            let mask = c.roi(roi);
            if mask.iter().all(|&m| m == 0.0) {
                continue;
            }
            let curve = dvh_with_band("r", &b, mask, &grid, form).unwrap();
            let (lo, hi) = (curve.band_low_pct.unwrap(), curve.band_high_pct.unwrap());
            for i in 0..grid.len() {
                assert!(lo[i] <= curve.volume_pct[i] && curve.volume_pct[i] <= hi[i]);
            }
        }
    }
    let flat = bundle_for(&c, 0.0, 0.0, 0.0);
    let curve = dvh_with_band("r", &flat, c.roi(0), &grid, BandForm::AdditiveVariance).unwrap();
    assert_eq!(curve.band_low_pct.as_ref(), Some(&curve.volume_pct));
    assert_eq!(curve.band_high_pct.as_ref(), Some(&curve.volume_pct));
}

#[test]
fn predictive_std_matches_hierarchical_sampling() {
    use evdose::evidential::{logit_to_dose, sigmoid};
    let (gamma, nu, alpha, beta) = (0.3, 2.0, 6.0, 0.02);
    let voxel = NigVoxel::new(gamma, nu, alpha, beta).unwrap();
    let field = evdose::evidential::NigField {
        gamma: Grid::full(Shape::new(1, 1, 1, 1), gamma as f32),
        nu: Grid::full(Shape::new(1, 1, 1, 1), nu as f32),
        alpha: Grid::full(Shape::new(1, 1, 1, 1), alpha as f32),
        beta: Grid::full(Shape::new(1, 1, 1, 1), beta as f32),
    };
    let bundle = field.to_physical().unwrap();
    let delta = predictive_std(&bundle, BandForm::AdditiveVariance).unwrap().data()[0] as f64;

    // The band maps the logit variance to Gy through the local slope of the
    // dose map, so the oracle samples the logit hierarchy and propagates
    // each draw through that same linearization.
    let slope = 100.0 / 0.9 * sigmoid(gamma) * (1.0 - sigmoid(gamma));
    let mut r = common::rng(36);
    let mut w = common::Welford::default();
    for _ in 0..1_000_000 {
        let (mu, s) = common::sample_nig(&mut r, gamma, nu, alpha, beta);
        let l = Normal::new(mu, s.sqrt()).unwrap().sample(&mut r);
        let d = logit_to_dose(gamma) + slope * (l - gamma);
        w.push((d - logit_to_dose(gamma)).powi(2));
    }
    let m = voxel.moments().unwrap();
    let var = delta * delta;
    let z = (w.mean() - var).abs() / w.std_error();
    assert!(z < 3.0, "sampled {} vs {var}: {z:.2} standard errors", w.mean());
    assert!((var - m.predictive_variance() * slope * slope).abs() / var < 1e-5);
}
