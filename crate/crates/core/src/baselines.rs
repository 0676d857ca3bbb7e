//! Monte-Carlo dropout and deep-ensemble estimators.

use serde::{Deserialize, Serialize};

use crate::bundle::{PredictionBundle, Provenance, UncertaintyKind};
use crate::error::{Error, Result};
use crate::evidential::logit_to_dose;
use crate::exec;
use crate::tensor::Grid;
use crate::unet::{HeadKind, Mode, Network};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutConfig {
    pub passes: usize,
    pub seed: u64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig { passes: 30, seed: 0 }
    }
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes < 2 {
            return Err(Error::Config(format!(
                "MC dropout needs at least 2 passes, got {}",
                self.passes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub member_count: usize,
    /// Member initialization seeds. When empty they are derived from the
    /// experiment seed.
    pub seeds: Vec<u64>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            member_count: 5,
            seeds: Vec::new(),
        }
    }
}

impl EnsembleConfig {
    /// Seeds to use, deriving them from `base` when none are listed.
    pub fn member_seeds(&self, base: u64) -> Result<Vec<u64>> {
        if self.member_count < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs at least 2 members, got {}",
                self.member_count
            )));
        }
        let seeds: Vec<u64> = if self.seeds.is_empty() {
            (0..self.member_count as u64)
                .map(|k| exec::derive_seed(base, 0x454e_5300 + k))
                .collect()
        } else {
            self.seeds.clone()
        };
        if seeds.len() != self.member_count {
            return Err(Error::Config(format!(
                "{} seeds listed for {} members",
                seeds.len(),
                self.member_count
            )));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::Config("ensemble seeds must be distinct".into()));
        }
        Ok(seeds)
    }
}

/// Per-voxel mean and unbiased variance over `samples`. Each voxel's values
/// are sorted before summation, so the result ignores sample order.
pub fn voxel_mean_variance(samples: &[Grid]) -> Result<(Grid, Grid)> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "variance needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let shape = samples[0].shape();
    for s in samples {
        s.expect_shape(shape, "sample")?;
    }
    let mut mean = Grid::zeros(shape);
    let mut var = Grid::zeros(shape);
    let mut column = vec![0f64; samples.len()];
    for i in 0..shape.len() {
        for (c, s) in column.iter_mut().zip(samples) {
            *c = s.data()[i] as f64;
        }
        let (m, v) = crate::stats::mean_and_variance(&mut column).expect("two or more samples");
        mean.data_mut()[i] = m as f32;
        var.data_mut()[i] = v as f32;
    }
    Ok((mean, var))
}

fn dose_from_logits(logits: &Grid) -> Grid {
    logits.map(|l| logit_to_dose(l as f64) as f32)
}

/// One dose map (Gy) from `net`, with the dropout masks seeded by `seed`.
pub fn predict_dose(net: &Network, input: &Grid, mode: Mode, seed: u64) -> Result<Grid> {
    let logits = match net.config().head {
        HeadKind::Point => net.forward_point(input, mode, seed)?,
        HeadKind::Evidential => net.forward(input, mode, seed)?.gamma,
    };
    Ok(dose_from_logits(&logits))
}

/// Mean and sample variance of the dose over stochastic forward passes.
pub fn mc_dropout_predict(net: &Network, input: &Grid, cfg: &DropoutConfig) -> Result<PredictionBundle> {
    cfg.validate()?;
    let passes = exec::map_indexed(cfg.passes, |p| {
        predict_dose(net, input, Mode::Train, exec::derive_seed(cfg.seed, p as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (mean, var) = voxel_mean_variance(&passes)?;
    PredictionBundle::new(Provenance::Dropout, mean, vec![(UncertaintyKind::Sample, var)])
}

fn strip_seed(cfg: &crate::unet::NetConfig) -> crate::unet::NetConfig {
    crate::unet::NetConfig { seed: 0, ..cfg.clone() }
}

/// Mean and sample variance of the dose across ensemble members, with
/// dropout disabled.
pub fn ensemble_predict(members: &[Network], input: &Grid) -> Result<PredictionBundle> {
    if members.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "an ensemble needs at least 2 members, got {}",
            members.len()
        )));
    }
    let reference = strip_seed(members[0].config());
    if members.iter().any(|m| strip_seed(m.config()) != reference) {
        return Err(Error::InvalidArgument(
            "ensemble members have different network configs".into(),
        ));
    }
    let doses = exec::map_indexed(members.len(), |k| predict_dose(&members[k], input, Mode::Infer, 0))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (mean, var) = voxel_mean_variance(&doses)?;
    PredictionBundle::new(Provenance::Ensemble, mean, vec![(UncertaintyKind::Sample, var)])
}

/// Moments of an equal-weight mixture: the mean of the member means and
/// the total variance `E[var] + Var[mean]` (population form).
pub fn mixture_moments(means: &[f64], variances: &[f64]) -> Result<(f64, f64)> {
    if means.is_empty() || means.len() != variances.len() {
        return Err(Error::InvalidArgument(format!(
            "mixture needs matching non-empty inputs, got {} means and {} variances",
            means.len(),
            variances.len()
        )));
    }
    let n = means.len() as f64;
    let m = means.iter().sum::<f64>() / n;
    let spread = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    let within = variances.iter().sum::<f64>() / n;
    Ok((m, within + spread))
}
