//! End-to-end experiment: configuration, on-disk layout and the
//! generate / train / eval stages used by the command-line tool.
//!
//! Everything is written below `out_dir`:
//!
//! ```text
//! data/{train,val,test}.manifest, data/<split>/<id>_<part>.evdv
//! models/evidential/<variant>/{model.evdw,trace.csv}
//! models/dropout/{model.evdw,trace.csv}
//! models/ensemble/{member_<k>.evdw,trace_member_<k>.csv}
//! reports/summary.csv, reports/<family>/..., reports/noise/...,
//! reports/heatmaps/<family>/..., reports/dvh/<family>/<case>/<roi>.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{ensemble_predict, mc_dropout_predict, DropoutConfig, EnsembleConfig};
use crate::bundle::{PredictionBundle, Provenance, UncertaintyKind};
use crate::dvh::{dvh_score, dvh_with_band, DvhConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, noise_sensitivity, pool, write_noise_results, EvalConfig, MetricsReport, NoiseSensitivity};
use crate::exec;
use crate::io;
use crate::loss::{LossConfig, LossVariant};
use crate::phantom::{self, add_ct_noise, Dataset, PatientCase, PhantomConfig, ROI_NAMES};
use crate::tensor::Grid;
use crate::train::{train_observed, EpochRecord, Objective, PreparedCase, TrainConfig, TrainTrace};
use crate::unet::{HeadKind, Mode, NetConfig, Network};

/// Backbone settings shared by every model family. The grid extent comes
/// from the phantom section; head and seed are set per family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub input_channels: usize,
    pub depth: usize,
    pub filters: Vec<usize>,
    pub bottleneck_filters: usize,
    pub dropout: Vec<f32>,
    pub bottleneck_dropout: f32,
    pub head_hidden: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        let d = NetConfig::desk();
        NetSection {
            input_channels: d.input_channels,
            depth: d.depth,
            filters: d.filters,
            bottleneck_filters: d.bottleneck_filters,
            dropout: d.dropout,
            bottleneck_dropout: d.bottleneck_dropout,
            head_hidden: d.head_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Test cases exported as heatmaps (the first `n`).
    pub heatmap_cases: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { heatmap_cases: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub phantom: PhantomConfig,
    pub net: NetSection,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub dropout: DropoutConfig,
    pub ensemble: EnsembleConfig,
    pub eval: EvalConfig,
    pub dvh: DvhConfig,
    pub report: ReportSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("evdose-out"),
            phantom: PhantomConfig::default(),
            net: NetSection::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            dropout: DropoutConfig::default(),
            ensemble: EnsembleConfig::default(),
            eval: EvalConfig::default(),
            dvh: DvhConfig::default(),
            report: ReportSection::default(),
        };
        cfg.set_seed(0);
        cfg
    }
}

/// Model family selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Evidential,
    Dropout,
    Ensemble,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Evidential, Family::Dropout, Family::Ensemble];

    pub fn as_str(&self) -> &'static str {
        self.provenance().as_str()
    }

    pub fn provenance(&self) -> Provenance {
        match self {
            Family::Evidential => Provenance::Evidential,
            Family::Dropout => Provenance::Dropout,
            Family::Ensemble => Provenance::Ensemble,
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Family::Evidential => 1,
            Family::Dropout => 2,
            Family::Ensemble => 3,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evidential" => Ok(Family::Evidential),
            "dropout" => Ok(Family::Dropout),
            "ensemble" => Ok(Family::Ensemble),
            other => Err(Error::Config(format!(
                "unknown model family {other:?} (expected evidential, dropout or ensemble)"
            ))),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks each section and the cross-section compatibility of grid
    /// extent and network depth.
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.dropout.validate()?;
        self.ensemble.member_seeds(0)?;
        self.eval.validate()?;
        self.dvh.dose_grid()?;
        self.net_config(Family::Evidential, 0).validate()?;
        if !self.phantom.grid_extent.is_multiple_of(1 << self.net.depth.min(30)) {
            return Err(Error::Config(format!(
                "phantom grid extent {} is not divisible by 2^{} (network depth)",
                self.phantom.grid_extent, self.net.depth
            )));
        }
        Ok(())
    }

    /// Replaces the seed everywhere it feeds a random stream. Seeds written
    /// inside individual sections are overwritten.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = seed;
        self.train.seed = exec::derive_seed(seed, 0x5452);
        self.dropout.seed = exec::derive_seed(seed, 0x4d43);
    }

    pub fn net_config(&self, family: Family, seed: u64) -> NetConfig {
        NetConfig {
            input_channels: self.net.input_channels,
            grid_extent: self.phantom.grid_extent,
            depth: self.net.depth,
            filters: self.net.filters.clone(),
            bottleneck_filters: self.net.bottleneck_filters,
            dropout: self.net.dropout.clone(),
            bottleneck_dropout: self.net.bottleneck_dropout,
            head_hidden: self.net.head_hidden,
            head: match family {
                Family::Evidential => HeadKind::Evidential,
                _ => HeadKind::Point,
            },
            seed,
        }
    }

    pub fn paths(&self) -> Paths {
        Paths {
            root: self.out_dir.clone(),
        }
    }

    /// Initialization seeds for the networks of `family`.
    pub fn init_seeds(&self, family: Family) -> Result<Vec<u64>> {
        let base = exec::derive_seed(self.seed, 0x494e_4954 + family.tag());
        match family {
            Family::Ensemble => self.ensemble.member_seeds(base),
            _ => Ok(vec![base]),
        }
    }
}

/// File layout below the output directory.
#[derive(Clone, Debug)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn models(&self, family: Family) -> PathBuf {
        self.root.join("models").join(family.as_str())
    }

    pub fn evidential_dir(&self, variant: LossVariant) -> PathBuf {
        self.models(Family::Evidential).join(variant_name(variant))
    }

    /// Checkpoint paths of a family, one per network.
    pub fn checkpoints(&self, family: Family, variant: LossVariant, members: usize) -> Vec<PathBuf> {
        match family {
            Family::Evidential => vec![self.evidential_dir(variant).join("model.evdw")],
            Family::Dropout => vec![self.models(family).join("model.evdw")],
            Family::Ensemble => (0..members)
                .map(|k| self.models(family).join(format!("member_{k}.evdw")))
                .collect(),
        }
    }

    pub fn traces(&self, family: Family, variant: LossVariant, members: usize) -> Vec<PathBuf> {
        match family {
            Family::Evidential => vec![self.evidential_dir(variant).join("trace.csv")],
            Family::Dropout => vec![self.models(family).join("trace.csv")],
            Family::Ensemble => (0..members)
                .map(|k| self.models(family).join(format!("trace_member_{k}.csv")))
                .collect(),
        }
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

pub fn variant_name(v: LossVariant) -> &'static str {
    match v {
        LossVariant::Original => "original",
        LossVariant::Refined => "refined",
    }
}

/// Generates the phantom dataset and writes it under `data/`.
pub fn run_generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dataset = phantom::generate(&cfg.phantom)?;
    io::write_dataset(&cfg.paths().data(), &dataset)?;
    Ok(dataset)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dataset = io::read_dataset(&cfg.paths().data())?;
    let e = cfg.phantom.grid_extent;
    if let Some(case) = dataset.train.first() {
        if case.extent() != [e; 3] {
            return Err(Error::Config(format!(
                "dataset extent {:?} does not match configured grid extent {e}",
                case.extent()
            )));
        }
    }
    Ok(dataset)
}

/// Outcome of training one family.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub family: Family,
    pub checkpoints: Vec<PathBuf>,
    pub traces: Vec<TrainTrace>,
}

pub fn prepare(cases: &[PatientCase]) -> Result<Vec<PreparedCase>> {
    cases.iter().map(PreparedCase::new).collect()
}

/// Trains every network of `family`, writing checkpoints and trace CSVs.
/// On divergence the partial trace is still written.
pub fn run_train(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    family: Family,
    log: &(dyn Fn(&str, &EpochRecord) + Sync),
) -> Result<TrainOutcome> {
    let train_cases = prepare(&dataset.train)?;
    let val_cases = prepare(&dataset.val)?;
    run_train_prepared(cfg, &train_cases, &val_cases, family, log)
}

pub fn run_train_prepared(
    cfg: &ExperimentConfig,
    train_cases: &[PreparedCase],
    val_cases: &[PreparedCase],
    family: Family,
    log: &(dyn Fn(&str, &EpochRecord) + Sync),
) -> Result<TrainOutcome> {
    let seeds = cfg.init_seeds(family)?;
    let paths = cfg.paths();
    let checkpoints = paths.checkpoints(family, cfg.loss.variant, seeds.len());
    let trace_paths = paths.traces(family, cfg.loss.variant, seeds.len());
    let results = exec::map_indexed(seeds.len(), |k| -> Result<TrainTrace> {
        let mut net = Network::build(cfg.net_config(family, seeds[k]))?;
        let objective = Objective::for_head(net.config().head, &cfg.loss);
        let train_cfg = TrainConfig {
            seed: exec::derive_seed(cfg.train.seed, family.tag() * 1000 + k as u64),
            ..cfg.train.clone()
        };
        let label = if seeds.len() > 1 {
            format!("{}[{k}]", family.as_str())
        } else {
            family.as_str().to_string()
        };
        let mut observer = |r: &EpochRecord| log(&label, r);
        match train_observed(&mut net, train_cases, val_cases, &train_cfg, objective, &mut observer) {
            Ok(trace) => {
                io::save_checkpoint(&checkpoints[k], &net)?;
                trace.write_csv(&trace_paths[k])?;
                Ok(trace)
            }
            Err(Error::Diverged { epoch, reason, trace }) => {
                if let Some(parent) = trace_paths[k].parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                trace.write_csv(&trace_paths[k])?;
                Err(Error::Diverged { epoch, reason, trace })
            }
            Err(e) => Err(e),
        }
    });
    let traces = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(TrainOutcome {
        family,
        checkpoints,
        traces,
    })
}

/// Loads the checkpoints of `family`, naming the family if any is missing.
pub fn load_family(cfg: &ExperimentConfig, family: Family) -> Result<Vec<Network>> {
    let members = cfg.init_seeds(family)?.len();
    let nets = cfg
        .paths()
        .checkpoints(family, cfg.loss.variant, members)
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "{} model checkpoint missing: {}",
                    family.as_str(),
                    p.display()
                )));
            }
            io::load_checkpoint(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let expected = cfg.net_config(family, 0);
    for net in &nets {
        let got = NetConfig { seed: 0, ..net.config().clone() };
        if got != expected {
            return Err(Error::Config(format!(
                "{} checkpoint does not match the configured network",
                family.as_str()
            )));
        }
    }
    Ok(nets)
}

/// Predicts one case with a family's trained networks.
pub fn predict(cfg: &ExperimentConfig, family: Family, nets: &[Network], input: &Grid) -> Result<PredictionBundle> {
    match family {
        Family::Evidential => nets[0].forward(input, Mode::Infer, 0)?.to_physical(),
        Family::Dropout => mc_dropout_predict(&nets[0], input, &cfg.dropout),
        Family::Ensemble => ensemble_predict(nets, input),
    }
}

pub fn predict_all(cfg: &ExperimentConfig, family: Family, nets: &[Network], cases: &[PatientCase]) -> Result<Vec<PredictionBundle>> {
    exec::map_indexed(cases.len(), |i| predict(cfg, family, nets, &cases[i].input()))
        .into_iter()
        .collect()
}

/// Test cases with CT noise, seeded per case.
pub fn noisy_cases(cfg: &ExperimentConfig, cases: &[PatientCase]) -> Result<Vec<PatientCase>> {
    let base = exec::derive_seed(cfg.seed, 0x4e4f_4953);
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| add_ct_noise(c, cfg.eval.noise_sigma, exec::derive_seed(base, i as u64)))
        .collect()
}

/// Uncertainty types compared in the noise test, labelled as in the
/// output file names.
pub fn noise_types(family: Family) -> Vec<(&'static str, UncertaintyKind)> {
    match family {
        Family::Evidential => vec![
            ("aleatoric", UncertaintyKind::Aleatoric),
            ("epistemic", UncertaintyKind::Epistemic),
        ],
        Family::Dropout => vec![("dropout", UncertaintyKind::Sample)],
        Family::Ensemble => vec![("ensemble", UncertaintyKind::Sample)],
    }
}

/// Compares uncertainty distributions on clean and noisy predictions.
pub fn noise_results(
    cfg: &ExperimentConfig,
    family: Family,
    clean: &[PredictionBundle],
    noisy: &[PredictionBundle],
    cases: &[PatientCase],
) -> Result<Vec<NoiseSensitivity>> {
    noise_types(family)
        .into_iter()
        .map(|(label, kind)| {
            let a = pool(clean, cases, kind)?;
            let b = pool(noisy, cases, kind)?;
            noise_sensitivity(label, &a.uncertainty, &b.uncertainty, cfg.eval.kl_bins)
        })
        .collect()
}

/// Which optional artifacts `run_eval` produces.
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub metrics: bool,
    pub noise: bool,
    pub dvh: bool,
    pub heatmaps: bool,
}

impl EvalOptions {
    pub fn all() -> Self {
        EvalOptions {
            metrics: true,
            noise: true,
            dvh: true,
            heatmaps: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub reports: Vec<MetricsReport>,
    pub noise: Vec<NoiseSensitivity>,
    pub dvh_scores: Vec<(Family, f64)>,
    pub written: Vec<PathBuf>,
}

/// Evaluates the requested families on the test split and writes the
/// reports.
pub fn run_eval(cfg: &ExperimentConfig, dataset: &Dataset, families: &[Family], options: EvalOptions) -> Result<EvalOutcome> {
    let cases = &dataset.test;
    if cases.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let nets: Vec<(Family, Vec<Network>)> = families
        .iter()
        .map(|&f| Ok((f, load_family(cfg, f)?)))
        .collect::<Result<_>>()?;
    let reports_dir = cfg.paths().reports();
    let mut outcome = EvalOutcome {
        reports: Vec::new(),
        noise: Vec::new(),
        dvh_scores: Vec::new(),
        written: Vec::new(),
    };
    let noisy = if options.noise {
        Some(noisy_cases(cfg, cases)?)
    } else {
        None
    };
    for (family, family_nets) in &nets {
        let bundles = predict_all(cfg, *family, family_nets, cases)?;
        let fam_dir = reports_dir.join(family.as_str());
        if options.metrics {
            let report = evaluate(&bundles, cases, &cfg.eval)?;
            report.write(&fam_dir)?;
            outcome.written.push(fam_dir.join("metrics.txt"));
            outcome.reports.push(report);
        }
        if let Some(noisy) = &noisy {
            let noisy_bundles = predict_all(cfg, *family, family_nets, noisy)?;
            outcome.noise.extend(noise_results(cfg, *family, &bundles, &noisy_bundles, cases)?);
        }
        if options.dvh {
            let doses: Vec<Grid> = bundles.iter().map(|b| b.dose.clone()).collect();
            outcome.dvh_scores.push((*family, dvh_score(&doses, cases)?));
            write_dvh_bands(cfg, *family, &bundles, cases, &reports_dir)?;
        }
        if options.heatmaps {
            write_heatmaps(cfg, *family, &bundles, cases, &reports_dir)?;
        }
    }
    if options.metrics {
        let path = reports_dir.join("summary.csv");
        write_file(&path, &summary_csv(&outcome.reports, &outcome.dvh_scores))?;
        outcome.written.push(path);
    }
    if options.noise {
        let dir = reports_dir.join("noise");
        write_noise_results(&dir, &outcome.noise)?;
        outcome.written.push(dir.join("noise_summary.csv"));
    }
    if options.dvh {
        let path = reports_dir.join("dvh_score.csv");
        let mut s = String::from("family,dvh_score_gy\n");
        for (f, score) in &outcome.dvh_scores {
            let _ = writeln!(s, "{},{score}", f.as_str());
        }
        write_file(&path, &s)?;
        outcome.written.push(path);
    }
    Ok(outcome)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

/// One row per family. The evidential row reports epistemic statistics in
/// the main columns and aleatoric ones in the `_alea` columns.
pub fn summary_csv(reports: &[MetricsReport], dvh_scores: &[(Family, f64)]) -> String {
    let mut s = String::from(
        "family,mae_gy,u_avg,spearman_voxel,spearman_voxel_p,spearman_patient,spearman_patient_p,mutual_information,\
u_avg_alea,spearman_voxel_alea,spearman_voxel_alea_p,spearman_patient_alea,spearman_patient_alea_p,mutual_information_alea,dvh_score_gy\n",
    );
    for r in reports {
        let primary = r
            .kind(UncertaintyKind::Epistemic)
            .or_else(|| r.kind(UncertaintyKind::Sample));
        let cols = |k: Option<&crate::eval::KindMetrics>| -> String {
            match k {
                Some(k) => format!(
                    "{},{},{},{},{},{}",
                    k.u_avg,
                    opt(k.spearman_voxel.map(|x| x.rho)),
                    opt(k.spearman_voxel.map(|x| x.p_value)),
                    opt(k.spearman_patient.map(|x| x.rho)),
                    opt(k.spearman_patient.map(|x| x.p_value)),
                    opt(k.mutual_information)
                ),
                None => "NA,NA,NA,NA,NA,NA".into(),
            }
        };
        let dvh = dvh_scores
            .iter()
            .find(|(f, _)| f.provenance() == r.family)
            .map(|(_, v)| *v);
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.family,
            r.mae_gy,
            cols(primary),
            cols(r.kind(UncertaintyKind::Aleatoric)),
            opt(dvh)
        );
    }
    s
}

/// Writes DVH band CSVs for every non-empty ROI of every case.
pub fn write_dvh_bands(cfg: &ExperimentConfig, family: Family, bundles: &[PredictionBundle], cases: &[PatientCase], reports_dir: &Path) -> Result<()> {
    let grid = cfg.dvh.dose_grid()?;
    for (b, c) in bundles.iter().zip(cases) {
        for (r, name) in ROI_NAMES.iter().enumerate() {
            let mask = c.roi(r);
            if !mask.iter().any(|&m| m != 0.0) {
                continue;
            }
            let curve = dvh_with_band(name, b, mask, &grid, cfg.dvh.band_form)?;
            curve.write_csv(&reports_dir.join("dvh").join(family.as_str()).join(&c.id).join(format!("{name}.csv")))?;
        }
    }
    Ok(())
}

/// Binary PGM (P5) of one axial slice, scaled so the slice maximum is 255.
pub fn encode_pgm(slice: &[f32], height: usize, width: usize) -> Vec<u8> {
    let max = slice.iter().copied().fold(0.0f32, f32::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(slice.iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Central axial slice of a single-channel grid.
pub fn axial_slice(grid: &Grid, depth: usize) -> Vec<f32> {
    let [_, h, w] = grid.shape().spatial();
    grid.data()[depth * h * w..(depth + 1) * h * w].to_vec()
}

/// Error and uncertainty heatmaps of the central axial slice.
pub fn write_heatmaps(cfg: &ExperimentConfig, family: Family, bundles: &[PredictionBundle], cases: &[PatientCase], reports_dir: &Path) -> Result<()> {
    let dir = reports_dir.join("heatmaps").join(family.as_str());
    for (b, c) in bundles.iter().zip(cases).take(cfg.report.heatmap_cases) {
        let [d, h, w] = c.extent();
        let z = d / 2;
        let error = b.dose.zip_map(&c.dose, |p, t| (p - t).abs())?;
        let mut maps = vec![("error", error)];
        for (kind, map) in b.uncertainties() {
            maps.push((kind.as_str(), map.clone()));
        }
        for (name, map) in maps {
            let bytes = encode_pgm(&axial_slice(&map, z), h, w);
            let path = dir.join(format!("{}_{name}.pgm", c.id));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
