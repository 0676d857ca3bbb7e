//! Synthetic head-and-neck phantoms shaped like OpenKBP cases.
//!
//! Each case has a random ellipsoidal body, three disjoint target volumes
//! prescribed 70, 63 and 56 Gy, seven organs at risk and a dose built from
//! nine equiangular coplanar beams. The network input stacks channels in the
//! order of [`CHANNEL_NAMES`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Grid, Shape};

pub const ROI_NAMES: [&str; 10] = [
    "PTV70",
    "PTV63",
    "PTV56",
    "Brainstem",
    "SpinalCord",
    "RightParotid",
    "LeftParotid",
    "Esophagus",
    "Larynx",
    "Mandible",
];

/// Input channel order: CT followed by the ROI masks.
pub const CHANNEL_NAMES: [&str; 11] = [
    "CT",
    "PTV70",
    "PTV63",
    "PTV56",
    "Brainstem",
    "SpinalCord",
    "RightParotid",
    "LeftParotid",
    "Esophagus",
    "Larynx",
    "Mandible",
];

pub const PTV_COUNT: usize = 3;
pub const PRESCRIPTIONS_GY: [f64; PTV_COUNT] = [70.0, 63.0, 56.0];
pub const DOSE_CAP_GY: f64 = 80.0;
pub const BEAM_COUNT: usize = 9;
const MAX_ATTEMPTS: usize = 50;

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientCase {
    pub id: String,
    /// CT intensity in `[0, 1]`, one channel.
    pub ct: Grid,
    /// Ten `{0, 1}` channels in [`ROI_NAMES`] order.
    pub rois: Grid,
    /// Ground-truth dose in Gy, one channel.
    pub dose: Grid,
    /// `{0, 1}` voxel validity, one channel.
    pub valid: Grid,
}

impl PatientCase {
    pub fn extent(&self) -> [usize; 3] {
        self.ct.shape().spatial()
    }

    pub fn roi(&self, index: usize) -> &[f32] {
        self.rois.channel(index)
    }

    /// Stacks CT and ROI masks into the 11-channel network input.
    pub fn input(&self) -> Grid {
        let mut data = Vec::with_capacity(self.ct.len() + self.rois.len());
        data.extend_from_slice(self.ct.data());
        data.extend_from_slice(self.rois.data());
        let shape = self.ct.shape().with_channels(1 + self.rois.shape().channels());
        Grid::from_vec(shape, data).expect("channel sizes agree")
    }

    /// Checks every structural invariant of a case.
    pub fn validate(&self) -> Result<()> {
        let e = self.extent();
        let one = Shape::new(1, e[0], e[1], e[2]);
        self.ct.expect_shape(one, "ct")?;
        self.dose.expect_shape(one, "dose")?;
        self.valid.expect_shape(one, "valid mask")?;
        self.rois.expect_shape(one.with_channels(ROI_NAMES.len()), "roi masks")?;
        let bad = |what: &str| Err(Error::Invariant(format!("case {}: {what}", self.id)));
        if self.ct.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return bad("ct outside [0, 1]");
        }
        let binary = |g: &Grid| g.data().iter().all(|&v| v == 0.0 || v == 1.0);
        if !binary(&self.rois) || !binary(&self.valid) {
            return bad("mask values outside {0, 1}");
        }
        for (&d, &v) in self.dose.data().iter().zip(self.valid.data()) {
            if !d.is_finite() || d < 0.0 || d as f64 > DOSE_CAP_GY {
                return bad("dose outside [0, 80] Gy");
            }
            if v == 0.0 && d != 0.0 {
                return bad("dose outside the valid mask");
            }
        }
        for i in 0..self.ct.len() {
            let hits = (0..PTV_COUNT).filter(|&p| self.roi(p)[i] != 0.0).count();
            if hits > 1 {
                return bad("target volumes overlap");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub grid_extent: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            grid_extent: 32,
            train: 40,
            val: 8,
            test: 16,
            seed: 0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<PatientCase>,
    pub val: Vec<PatientCase>,
    pub test: Vec<PatientCase>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[PatientCase] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_extent < 8 {
            return Err(Error::Config(format!(
                "phantom grid extent {} is below the minimum of 8",
                self.grid_extent
            )));
        }
        if self.train == 0 {
            return Err(Error::Config("phantom training split is empty".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be a finite non-negative number, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Generates every split. Case `k` overall (train, then val, then test)
/// depends only on `(seed, k)`.
pub fn generate(cfg: &PhantomConfig) -> Result<Dataset> {
    cfg.validate()?;
    let counts = [cfg.train, cfg.val, cfg.test];
    let total: usize = counts.iter().sum();
    let mut cases = exec::map_indexed(total, |k| {
        let (split, index) = locate(&counts, k);
        let id = format!("{}_{index:03}", split.as_str());
        let mut case = generate_case(&id, cfg.grid_extent, exec::derive_seed(cfg.seed, k as u64))?;
        if cfg.noise_sigma > 0.0 {
            case = add_ct_noise(&case, cfg.noise_sigma, exec::derive_seed(cfg.seed ^ 0x4e4f_4953, k as u64))?;
        }
        Ok(case)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let test = cases.split_off(cfg.train + cfg.val);
    let val = cases.split_off(cfg.train);
    Ok(Dataset {
        train: cases,
        val,
        test,
    })
}

fn locate(counts: &[usize; 3], mut k: usize) -> (Split, usize) {
    for (split, &n) in Split::ALL.iter().zip(counts) {
        if k < n {
            return (*split, k);
        }
        k -= n;
    }
    unreachable!("index within total")
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum()
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    /// Distance travelled backwards from `p` along `-u` to the surface.
    /// `p` must be inside.
    fn depth(&self, p: [f64; 3], u: [f64; 3]) -> f64 {
        // solve |(p - t u - c) / r|^2 = 1 for t >= 0
        let (mut a, mut b, mut c) = (0.0, 0.0, -1.0);
        for ax in 0..3 {
            let q = (p[ax] - self.center[ax]) / self.radii[ax];
            let v = u[ax] / self.radii[ax];
            a += v * v;
            b += -2.0 * q * v;
            c += q * q;
        }
        let disc = (b * b - 4.0 * a * c).max(0.0);
        ((-b + disc.sqrt()) / (2.0 * a)).max(0.0)
    }
}

fn voxel_center(i: usize, e: [usize; 3]) -> [f64; 3] {
    let w = i % e[2];
    let h = (i / e[2]) % e[1];
    let d = i / (e[1] * e[2]);
    [d as f64 + 0.5, h as f64 + 0.5, w as f64 + 0.5]
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Places a random ellipsoid with radii `frac * extent` whose center lies
/// within the inner `reach` fraction of `body`.
fn inner_ellipsoid(
    rng: &mut ChaCha8Rng,
    body: &Ellipsoid,
    reach: f64,
    radius: (f64, f64),
    extent: f64,
) -> Ellipsoid {
    let center = std::array::from_fn(|a| body.center[a] + reach * body.radii[a] * uniform(rng, -1.0, 1.0) / 3f64.sqrt());
    let radii = std::array::from_fn(|_| (uniform(rng, radius.0, radius.1) * extent).max(1.5));
    Ellipsoid { center, radii }
}

/// Builds one phantom case from a seed, retrying geometry that does not fit.
pub fn generate_case(id: &str, extent: usize, seed: u64) -> Result<PatientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(case) = try_case(id, extent, &mut rng) {
            return Ok(case);
        }
    }
    Err(Error::Invariant(format!(
        "case {id}: no valid geometry after {MAX_ATTEMPTS} attempts at extent {extent}"
    )))
}

fn try_case(id: &str, extent: usize, rng: &mut ChaCha8Rng) -> Option<PatientCase> {
    let e = [extent; 3];
    let n = extent * extent * extent;
    let ef = extent as f64;
    let mid = ef / 2.0;
    let body = Ellipsoid {
        center: std::array::from_fn(|_| mid + uniform(rng, -0.04, 0.04) * ef),
        radii: [
            uniform(rng, 0.40, 0.46) * ef,
            uniform(rng, 0.34, 0.44) * ef,
            uniform(rng, 0.36, 0.45) * ef,
        ],
    };
    let ptvs: Vec<Ellipsoid> = (0..PTV_COUNT)
        .map(|_| inner_ellipsoid(rng, &body, 0.45, (0.07, 0.13), ef))
        .collect();
    let oars: Vec<Ellipsoid> = (0..ROI_NAMES.len() - PTV_COUNT)
        .map(|_| inner_ellipsoid(rng, &body, 0.7, (0.05, 0.11), ef))
        .collect();
    let oar_density: Vec<f64> = (0..oars.len()).map(|_| uniform(rng, -0.12, 0.25)).collect();
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let k = std::array::from_fn(|_| uniform(rng, -1.0, 1.0) * std::f64::consts::TAU / ef);
            (k, uniform(rng, 0.0, std::f64::consts::TAU), uniform(rng, 0.01, 0.04))
        })
        .collect();

    let mut valid = vec![0f32; n];
    let mut rois = vec![0f32; n * ROI_NAMES.len()];
    let mut ct = vec![0f32; n];
    for i in 0..n {
        let p = voxel_center(i, e);
        if !body.contains(p) {
            continue;
        }
        valid[i] = 1.0;
        // earlier targets take precedence so the three stay disjoint
        if let Some(t) = ptvs.iter().position(|el| el.contains(p)) {
            rois[t * n + i] = 1.0;
        }
        let mut value = 0.3;
        for (o, el) in oars.iter().enumerate() {
            if el.contains(p) {
                rois[(PTV_COUNT + o) * n + i] = 1.0;
                value += oar_density[o];
            }
        }
        if rois[i] + rois[n + i] + rois[2 * n + i] > 0.0 {
            value += 0.05;
        }
        for (k, phase, amp) in &waves {
            value += amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin();
        }
        ct[i] = value.clamp(0.0, 1.0) as f32;
    }

    let mut volumes = [0usize; PTV_COUNT];
    for (t, v) in volumes.iter_mut().enumerate() {
        *v = rois[t * n..(t + 1) * n].iter().filter(|&&m| m != 0.0).count();
    }
    if volumes.iter().any(|&v| v < 4) {
        return None;
    }

    let dose = beam_dose(&body, &ptvs, &rois, &valid, e)?;
    let shape = Shape::new(1, extent, extent, extent);
    Some(PatientCase {
        id: id.to_string(),
        ct: Grid::from_vec(shape, ct).ok()?,
        rois: Grid::from_vec(shape.with_channels(ROI_NAMES.len()), rois).ok()?,
        dose: Grid::from_vec(shape, dose).ok()?,
        valid: Grid::from_vec(shape, valid).ok()?,
    })
}

/// Unit beam directions in the axial (height, width) plane.
pub fn beam_directions() -> [[f64; 3]; BEAM_COUNT] {
    std::array::from_fn(|k| {
        let theta = k as f64 * std::f64::consts::TAU / BEAM_COUNT as f64;
        [0.0, theta.sin(), theta.cos()]
    })
}

fn centroid(mask: &[f32], e: [usize; 3]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut count = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if m != 0.0 {
            let p = voxel_center(i, e);
            for a in 0..3 {
                acc[a] += p[a];
            }
            count += 1.0;
        }
    }
    acc.map(|v| v / count)
}

/// Max over targets and beams of prescription-weighted Gaussian lateral
/// profiles with linear depth falloff, rescaled so the median over PTV70 is
/// 70 Gy, capped at 80 Gy and zero outside the body.
fn beam_dose(
    body: &Ellipsoid,
    ptvs: &[Ellipsoid],
    rois: &[f32],
    valid: &[f32],
    e: [usize; 3],
) -> Option<Vec<f32>> {
    let n = valid.len();
    let ef = e[0] as f64;
    let attenuation = 0.5 / ef;
    let dirs = beam_directions();
    let targets: Vec<([f64; 3], f64, f64)> = ptvs
        .iter()
        .enumerate()
        .map(|(t, el)| {
            let width = 0.8 * (el.radii[1] + el.radii[2]) / 2.0 + 1.0;
            (centroid(&rois[t * n..(t + 1) * n], e), width, PRESCRIPTIONS_GY[t] / PRESCRIPTIONS_GY[0])
        })
        .collect();
    let mut raw = vec![0f64; n];
    for i in 0..n {
        if valid[i] == 0.0 {
            continue;
        }
        let p = voxel_center(i, e);
        let depths = dirs.map(|u| body.depth(p, u));
        let mut best = 0.0f64;
        for (c, width, weight) in &targets {
            let rel = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let r2: f64 = rel.iter().map(|v| v * v).sum();
            for (u, depth) in dirs.iter().zip(depths) {
                let along: f64 = rel.iter().zip(u).map(|(a, b)| a * b).sum();
                let lateral2 = (r2 - along * along).max(0.0);
                let profile = (-lateral2 / (2.0 * width * width)).exp();
                let falloff = (1.0 - attenuation * depth).max(0.0);
                best = best.max(weight * profile * falloff);
            }
        }
        raw[i] = best;
    }
    let mut ptv70: Vec<f64> = (0..n).filter(|&i| rois[i] != 0.0).map(|i| raw[i]).collect();
    let med = crate::stats::median(&mut ptv70)?;
    if !(med > 0.0) {
        return None;
    }
    let scale = PRESCRIPTIONS_GY[0] / med;
    Some(
        raw.iter()
            .map(|&r| (r * scale).min(DOSE_CAP_GY) as f32)
            .collect(),
    )
}

/// Adds clamped Gaussian noise to the CT channel only.
pub fn add_ct_noise(case: &PatientCase, sigma: f64, seed: u64) -> Result<PatientCase> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be finite and non-negative, got {sigma}"
        )));
    }
    let mut out = case.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    for v in out.ct.data_mut() {
        *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}
