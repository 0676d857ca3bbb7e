//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 9 10`.

mod common;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use evdose::bundle::UncertaintyKind;
use evdose::eval::{mutual_information, spearman, threshold_curve, window_means, MetricsReport, NoiseSensitivity};
use evdose::evidential::NigVoxel;
use evdose::experiment::{self, EvalOptions, ExperimentConfig, Family, NetSection};
use evdose::loss::{LossConfig, LossVariant};
use evdose::phantom::PhantomConfig;
use evdose::train::{EpochRecord, TrainConfig, TrainTrace};
use evdose::unet::{NetConfig, Network};
use evdose::Error;
use rand::Rng;

use common::report;

fn criterion_1() -> bool {
    let start = Instant::now();
    let mut cases = common::gradcheck_suite(101);
    cases.extend(common::gradcheck_suite(102));
    let elapsed = start.elapsed();
    let worst = cases.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    let pass = cases.len() >= 20 && worst.rel_error < 1e-3 && elapsed.as_secs_f64() < 60.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{} configurations, worst relative error {:.2e} ({}), {:.1} s",
            cases.len(),
            worst.rel_error,
            worst.name,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> bool {
    let draws = 60;
    let worst = common::student_t_quadrature_check(202, draws);
    report(
        2,
        "Student-t marginal vs double quadrature",
        worst < 1e-4,
        &format!("{draws} draws, worst relative error {worst:.2e}"),
    )
}

fn worst_z(checks: &[common::McCheck]) -> &common::McCheck {
    checks.iter().max_by(|a, b| a.z.total_cmp(&b.z)).unwrap()
}

fn criterion_3() -> bool {
    let checks = common::nig_moment_checks(303, 10, 1_000_000);
    let w = worst_z(&checks);
    report(
        3,
        "NIG moments vs Monte Carlo",
        checks.iter().all(|c| c.z < 3.0),
        &format!("{} comparisons, worst {:.2} SE ({})", checks.len(), w.z, w.label),
    )
}

fn criterion_4() -> bool {
    let checks = common::total_variance_checks(404, 10, 1_000_000);
    let w = worst_z(&checks);
    let mut r = common::rng(405);
    let mut worst_rel = 0.0f64;
    for _ in 0..10_000 {
        let nu = r.random_range(1e-3..10.0);
        let alpha = 1.0 + r.random_range(1e-3..9.0);
        let beta = r.random_range(1e-3..10.0);
        let m = NigVoxel::new(0.0, nu, alpha, beta).unwrap().moments().unwrap();
        let closed = beta / (alpha - 1.0) * (1.0 + 1.0 / nu);
        worst_rel = worst_rel.max((m.predictive_variance() - closed).abs() / closed);
    }
    let pass = checks.iter().all(|c| c.z < 3.0) && worst_rel <= 4.0 * f64::EPSILON;
    report(
        4,
        "total variance decomposition",
        pass,
        &format!(
            "sampling worst {:.2} SE over {} sets; closed form max relative deviation {:.1e}",
            w.z,
            checks.len(),
            worst_rel
        ),
    )
}

/// Validation MAE per epoch; a divergence appends a non-finite entry.
fn val_trace(result: Result<TrainTrace, Error>) -> Result<Vec<f64>, String> {
    let values = |t: &TrainTrace| t.records.iter().map(|r| r.val_mae.unwrap_or(f64::NAN)).collect::<Vec<_>>();
    match result {
        Ok(t) => Ok(values(&t)),
        Err(Error::Diverged { trace, .. }) => {
            let mut v = values(&trace);
            v.push(f64::INFINITY);
            Ok(v)
        }
        Err(e) => Err(e.to_string()),
    }
}

/// First epoch (1-based) whose value is non-finite or more than twice the
/// median of the preceding epochs.
fn first_excursion(trace: &[f64]) -> Option<usize> {
    for k in 0..trace.len() {
        if !trace[k].is_finite() {
            return Some(k + 1);
        }
        if k > 0 {
            let mut prev = trace[..k].to_vec();
            let med = evdose::stats::median(&mut prev).unwrap();
            if trace[k] > 2.0 * med {
                return Some(k + 1);
            }
        }
    }
    None
}

fn loss_stability_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        phantom: PhantomConfig {
            grid_extent: 32,
            train: 40,
            val: 8,
            test: 1,
            ..PhantomConfig::default()
        },
        net: NetSection {
            depth: 3,
            filters: vec![4, 8, 16],
            bottleneck_filters: 32,
            dropout: vec![0.10, 0.15, 0.20],
            bottleneck_dropout: 0.25,
            ..NetSection::default()
        },
        train: TrainConfig {
            epochs: 100,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.set_seed(0);
    cfg
}

fn progress(label: &str, r: &EpochRecord) {
    if r.epoch.is_multiple_of(10) {
        eprintln!(
            "  [{label}] epoch {} train MAE {:.3} val MAE {}",
            r.epoch,
            r.train_mae,
            r.val_mae.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
        );
    }
}

fn criterion_5() -> bool {
    let start = Instant::now();
    let mut cfg = loss_stability_config();
    let dir = tempfile::tempdir().unwrap();
    cfg.out_dir = dir.path().to_path_buf();
    let ds = evdose::phantom::generate(&cfg.phantom).unwrap();
    let train = experiment::prepare(&ds.train).unwrap();
    let val = experiment::prepare(&ds.val).unwrap();
    let mut traces = Vec::new();
    for variant in [LossVariant::Refined, LossVariant::Original] {
        cfg.loss = LossConfig {
            variant,
            ..LossConfig::default()
        };
        let result = experiment::run_train_prepared(&cfg, &train, &val, Family::Evidential, &|l, r| {
            progress(&format!("{l} {}", experiment::variant_name(variant)), r)
        })
        .map(|mut o| o.traces.remove(0));
        match val_trace(result) {
            Ok(t) => traces.push(t),
            Err(e) => return report(5, "loss stability", false, &format!("training failed: {e}")),
        }
    }
    let (refined, original) = (&traces[0], &traces[1]);
    let refined_final = *refined.last().unwrap();
    let original_final = *original.last().unwrap();
    let refined_finite = refined.iter().all(|v| v.is_finite());
    let excursion = first_excursion(original);
    // a strictly lower refined final MAE already satisfies the "or worse final" branch
    let pass = refined_finite && refined_final < original_final;
    report(
        5,
        "loss stability (refined vs original)",
        pass,
        &format!(
            "{} epochs at 32^3 on 40 cases, {:.0} s; refined final val MAE {:.3} Gy (all finite: {refined_finite}); \
original final {:.3} Gy, excursion at epoch {}",
            refined.len(),
            start.elapsed().as_secs_f64(),
            refined_final,
            original_final,
            excursion.map(|e| e.to_string()).unwrap_or_else(|| "none".into())
        ),
    )
}

/// Shared experiment for criteria 6 to 8: all three families trained on the
/// same 16^3 phantom set and evaluated on its test split.
struct Comparison {
    _dir: tempfile::TempDir,
    reports: Vec<MetricsReport>,
    noise: Vec<NoiseSensitivity>,
}

fn comparison_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        phantom: PhantomConfig {
            grid_extent: 16,
            ..PhantomConfig::default()
        },
        net: NetSection {
            depth: 3,
            filters: vec![4, 8, 16],
            bottleneck_filters: 32,
            dropout: vec![0.10, 0.15, 0.20],
            bottleneck_dropout: 0.25,
            ..NetSection::default()
        },
        train: TrainConfig {
            epochs: 100,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.set_seed(1);
    cfg
}

fn comparison() -> &'static Result<Comparison, String> {
    static CELL: OnceLock<Result<Comparison, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = comparison_config(dir.path());
        let ds = experiment::run_generate(&cfg).map_err(|e| e.to_string())?;
        for family in Family::ALL {
            experiment::run_train(&cfg, &ds, family, &progress).map_err(|e| format!("{}: {e}", family.as_str()))?;
        }
        let out = experiment::run_eval(&cfg, &ds, &Family::ALL, EvalOptions::all()).map_err(|e| e.to_string())?;
        eprintln!("  comparison experiment finished in {:.0} s", start.elapsed().as_secs_f64());
        Ok(Comparison {
            _dir: dir,
            reports: out.reports,
            noise: out.noise,
        })
    })
}

fn criterion_6() -> bool {
    let c = match comparison() {
        Ok(c) => c,
        Err(e) => return report(6, "uncertainty-error correlation", false, e),
    };
    let ev = &c.reports[0];
    let epis = ev.kind(UncertaintyKind::Epistemic).and_then(|k| k.spearman_voxel);
    let alea = ev.kind(UncertaintyKind::Aleatoric).and_then(|k| k.spearman_voxel);
    let (Some(e), Some(a)) = (epis, alea) else {
        return report(6, "uncertainty-error correlation", false, "correlation undefined");
    };
    let pass = e.rho > 0.0 && e.p_value < 0.01 && e.rho > a.rho;
    report(
        6,
        "uncertainty-error correlation",
        pass,
        &format!(
            "r_s(U_epis, D_e) = {:.4} (p = {:.2e}, n = {}), r_s(U_alea, D_e) = {:.4}",
            e.rho, e.p_value, e.n, a.rho
        ),
    )
}

fn non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

fn criterion_7() -> bool {
    let mut r = common::rng(707);
    let errors: Vec<f64> = (0..20_000).map(|_| r.random::<f64>() * 20.0).collect();
    let thresholds = evdose::eval::percentile_thresholds(&errors, 100);
    let exact = threshold_curve(&errors, &errors, &thresholds).unwrap();
    let exact_meds: Vec<f64> = exact.iter().filter_map(|s| s.median_error).collect();
    let synthetic_ok = exact_meds.len() == thresholds.len() && non_decreasing(&exact_meds);

    let c = match comparison() {
        Ok(c) => c,
        Err(e) => return report(7, "threshold-curve monotonicity", false, e),
    };
    let mut pass = synthetic_ok;
    let mut details = vec![format!("synthetic U = |error| exact: {synthetic_ok}")];
    for rep in &c.reports {
        let kind = rep
            .kind(UncertaintyKind::Epistemic)
            .or_else(|| rep.kind(UncertaintyKind::Sample))
            .unwrap();
        let smooth = window_means(&kind.threshold_curve, 10);
        let ok = smooth.len() >= 2 && non_decreasing(&smooth);
        pass &= ok;
        let shown: Vec<String> = smooth.iter().map(|v| format!("{v:.2}")).collect();
        details.push(format!("{} ({}): {ok} [{}]", rep.family, kind.kind.as_str(), shown.join(" ")));
    }
    if let Some(a) = c.reports[0].kind(UncertaintyKind::Aleatoric) {
        let ok = non_decreasing(&window_means(&a.threshold_curve, 10));
        details.push(format!("evidential (aleatoric, informational): {ok}"));
    }
    report(7, "threshold-curve monotonicity", pass, &details.join("; "))
}

fn criterion_8() -> bool {
    let c = match comparison() {
        Ok(c) => c,
        Err(e) => return report(8, "noise-sensitivity ordering", false, e),
    };
    let change = |label: &str| c.noise.iter().find(|n| n.label == label).map(|n| n.fractional_change);
    let (Some(alea), Some(epis), Some(drop), Some(ens)) =
        (change("aleatoric"), change("epistemic"), change("dropout"), change("ensemble"))
    else {
        return report(8, "noise-sensitivity ordering", false, "missing noise results");
    };
    let pass = alea.abs() > epis.abs() && ens.abs() > drop.abs();
    report(
        8,
        "noise-sensitivity ordering",
        pass,
        &format!(
            "fractional KL change: aleatoric {alea:+.4}, epistemic {epis:+.4}, ensemble {ens:+.4}, dropout {drop:+.4}"
        ),
    )
}

fn criterion_9() -> bool {
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let rev: Vec<f64> = x.iter().rev().copied().collect();
    check(spearman(&x, &x).unwrap().rho, 1.0);
    check(spearman(&x, &rev).unwrap().rho, -1.0);
    check(spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap().rho, -0.5);
    let quarters: Vec<f64> = (0..1000).map(|i| (i % 4) as f64).collect();
    check(mutual_information(&quarters, &quarters, 4).unwrap(), 4f64.ln());
    let mut r = common::rng(909);
    let a: Vec<f64> = (0..100_000).map(|_| r.random::<f64>()).collect();
    let b: Vec<f64> = (0..100_000).map(|_| r.random::<f64>()).collect();
    let ab = mutual_information(&a, &b, 64).unwrap();
    check(ab, mutual_information(&b, &a, 64).unwrap());
    let exact = worst < 1e-10;
    // plug-in estimator under independence: 2n MI ~ chi-square((bins-1)^2)
    let dof = 63.0f64 * 63.0;
    let n = a.len() as f64;
    let (mean, sd) = (dof / (2.0 * n), (2.0 * dof).sqrt() / (2.0 * n));
    let independent = (ab - mean).abs() < 4.0 * sd;
    report(
        9,
        "metric oracles",
        exact && independent,
        &format!(
            "tabulated examples max deviation {worst:.1e}; independent MI {ab:.5} vs plug-in expectation {mean:.5} +/- {sd:.5}"
        ),
    )
}

fn criterion_10() -> bool {
    let start = Instant::now();
    let net = Network::build(NetConfig::full_scale());
    let elapsed = start.elapsed().as_secs_f64();
    let Ok(net) = net else {
        return report(10, "parameter count", false, "full-scale network failed to build");
    };
    let count = net.parameter_count();
    let rel = (count as f64 - 6e6).abs() / 6e6;
    report(
        10,
        "parameter count",
        rel <= 0.2 && elapsed < 10.0,
        &format!("{count} parameters ({:.1}% from 6e6), built in {elapsed:.2} s", 100.0 * rel),
    )
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism_run(out: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        phantom: PhantomConfig {
            grid_extent: 8,
            train: 4,
            val: 2,
            test: 3,
            ..PhantomConfig::default()
        },
        net: NetSection {
            depth: 2,
            filters: vec![2, 4],
            bottleneck_filters: 8,
            dropout: vec![0.1, 0.2],
            bottleneck_dropout: 0.2,
            ..NetSection::default()
        },
        train: TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.set_seed(11);
    let ds = experiment::run_generate(&cfg).map_err(|e| e.to_string())?;
    for family in Family::ALL {
        experiment::run_train(&cfg, &ds, family, &|_, _| {}).map_err(|e| e.to_string())?;
    }
    experiment::run_eval(&cfg, &ds, &Family::ALL, EvalOptions::all()).map_err(|e| e.to_string())?;
    Ok(files_under(out))
}

fn criterion_11() -> bool {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let runs = determinism_run(a.path()).and_then(|x| determinism_run(b.path()).map(|y| (x, y)));
    let (x, y) = match runs {
        Ok(v) => v,
        Err(e) => return report(11, "determinism", false, &e),
    };
    let reports = x.iter().filter(|(p, _)| p.starts_with("reports")).count();
    let differing: Vec<String> = x
        .iter()
        .zip(&y)
        .filter(|(p, q)| p != q)
        .map(|(p, _)| p.0.display().to_string())
        .collect();
    let pass = x.len() == y.len() && differing.is_empty() && reports > 0;
    report(
        11,
        "determinism",
        pass,
        &format!(
            "{} files ({} report files) compared across two runs, {} differ{}",
            x.len(),
            reports,
            differing.len(),
            differing.first().map(|d| format!(", e.g. {d}")).unwrap_or_default()
        ),
    )
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, fn() -> bool); 11] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        ran += 1;
        if !run() {
            failed.push(id);
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
