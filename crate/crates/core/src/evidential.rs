//! Normal-inverse-gamma evidential head.
//!
//! The network predicts, per voxel, the four parameters of a
//! normal-inverse-gamma (NIG) prior over the mean `mu` and variance
//! `sigma^2` of a Gaussian on the *logit* of the normalized dose:
//!
//! ```text
//! mu ~ N(gamma, sigma^2 / nu),   sigma^2 ~ InvGamma(alpha, beta)
//! ```
//!
//! Normalized dose is `y = (0.9 D + 10) / 100` for physical dose `D` in Gy,
//! which maps 0 Gy to 0.1 and keeps `y` away from the logit singularities.
//! Uncertainties are `U_a = beta / (alpha - 1)` (aleatoric) and
//! `U_e = beta / (nu (alpha - 1))` (epistemic), converted to Gy^2 with the
//! delta-method factor `((100 / 0.9) y (1 - y))^2`.

use crate::bundle::{PredictionBundle, Provenance, UncertaintyKind};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Grid, NodeId};

/// Lower bound on `gamma`: the logit of the normalized zero dose, `-ln 9`.
pub const GAMMA_FLOOR: f64 = -2.197_224_577_336_219_6;
pub const BETA_FLOOR: f64 = 1e-3;
pub const NU_EPS: f64 = 1e-6;
pub const ALPHA_EPS: f64 = 1e-6;
/// Largest normalized dose fed to the logit.
pub const Y_CEILING: f64 = 1.0 - 1e-6;
pub const MAX_DOSE_GY: f64 = 100.0;

/// NIG parameters of a single voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NigVoxel {
    pub gamma: f64,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Closed-form moments of a voxel's NIG distribution (logit units).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NigMoments {
    pub mean: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

impl NigMoments {
    /// Total predictive variance `E[sigma^2] + Var[mu]`.
    pub fn predictive_variance(&self) -> f64 {
        self.aleatoric + self.epistemic
    }
}

impl NigVoxel {
    /// Accepts any proper NIG (`nu, alpha, beta > 0`); the tighter head
    /// constraints are checked by [`NigField::validate`].
    pub fn new(gamma: f64, nu: f64, alpha: f64, beta: f64) -> Result<Self> {
        let v = NigVoxel {
            gamma,
            nu,
            alpha,
            beta,
        };
        if !(gamma.is_finite() && nu.is_finite() && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite NIG parameters {v:?}")));
        }
        if nu <= 0.0 || alpha <= 0.0 || beta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "NIG needs nu, alpha, beta > 0, got {v:?}"
            )));
        }
        Ok(v)
    }

    /// Mean, aleatoric and epistemic variance. Requires `alpha > 1`.
    pub fn moments(&self) -> Result<NigMoments> {
        if !(self.alpha > 1.0) {
            return Err(Error::Invariant(format!(
                "uncertainties need alpha > 1, got {}",
                self.alpha
            )));
        }
        let aleatoric = self.beta / (self.alpha - 1.0);
        Ok(NigMoments {
            mean: self.gamma,
            aleatoric,
            epistemic: aleatoric / self.nu,
        })
    }
}

/// Physical dose (Gy) to normalized dose in `[0.1, 1.0]`.
pub fn normalize_dose(dose_gy: f64) -> f64 {
    (0.9 * dose_gy + 10.0) / 100.0
}

/// Normalized dose back to Gy.
pub fn denormalize_dose(y: f64) -> f64 {
    (100.0 * y - 10.0) / 0.9
}

pub fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Physical dose to the logit representation the network predicts.
pub fn dose_to_logit(dose_gy: f64) -> Result<f64> {
    if !(0.0..=MAX_DOSE_GY).contains(&dose_gy) {
        return Err(Error::InvalidArgument(format!(
            "dose {dose_gy} Gy outside [0, {MAX_DOSE_GY}]"
        )));
    }
    Ok(logit(normalize_dose(dose_gy).min(Y_CEILING)))
}

/// Inverse of [`dose_to_logit`].
pub fn logit_to_dose(l: f64) -> f64 {
    denormalize_dose(sigmoid(l))
}

/// Delta-method factor converting logit-space variance at logit `l` to Gy^2.
pub fn variance_to_gy2_factor(l: f64) -> f64 {
    let y = sigmoid(l);
    let slope = 100.0 / 0.9 * y * (1.0 - y);
    slope * slope
}

/// Maps raw head outputs to constrained NIG parameters.
pub fn constrain_voxel(raw: [f64; 4]) -> NigVoxel {
    NigVoxel {
        gamma: GAMMA_FLOOR + softplus(raw[0]),
        nu: softplus(raw[1]) + NU_EPS,
        alpha: 1.0 + softplus(raw[2]) + ALPHA_EPS,
        beta: BETA_FLOOR + softplus(raw[3]),
    }
}

/// Per-voxel NIG parameter maps, each single-channel.
#[derive(Clone, Debug, PartialEq)]
pub struct NigField {
    pub gamma: Grid,
    pub nu: Grid,
    pub alpha: Grid,
    pub beta: Grid,
}

/// Logit-space mean and variance maps.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMoments {
    pub mean: Grid,
    pub aleatoric: Grid,
    pub epistemic: Grid,
}

impl NigField {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn voxel(&self, i: usize) -> NigVoxel {
        NigVoxel {
            gamma: self.gamma.data()[i] as f64,
            nu: self.nu.data()[i] as f64,
            alpha: self.alpha.data()[i] as f64,
            beta: self.beta.data()[i] as f64,
        }
    }

    /// Checks every head constraint, naming the first offending voxel.
    pub fn validate(&self) -> Result<()> {
        let shape = self.gamma.shape();
        for (name, g) in [("nu", &self.nu), ("alpha", &self.alpha), ("beta", &self.beta)] {
            g.expect_shape(shape, name)?;
        }
        // f32 storage: compare against the bounds as stored
        let gamma_floor = GAMMA_FLOOR as f32;
        let beta_floor = BETA_FLOOR as f32;
        for i in 0..self.len() {
            let (g, n, a, b) = (
                self.gamma.data()[i],
                self.nu.data()[i],
                self.alpha.data()[i],
                self.beta.data()[i],
            );
            let ok = g.is_finite()
                && n.is_finite()
                && a.is_finite()
                && b.is_finite()
                && g >= gamma_floor
                && n > 0.0
                && a > 1.0
                && b >= beta_floor;
            if !ok {
                return Err(Error::Invariant(format!(
                    "voxel {i}: (gamma, nu, alpha, beta) = ({g}, {n}, {a}, {b}) violates head constraints"
                )));
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> Result<LogitMoments> {
        let mut aleatoric = Grid::zeros(self.gamma.shape());
        let mut epistemic = Grid::zeros(self.gamma.shape());
        for i in 0..self.len() {
            let m = self.voxel(i).moments().map_err(|e| match e {
                Error::Invariant(msg) => Error::Invariant(format!("voxel {i}: {msg}")),
                other => other,
            })?;
            aleatoric.data_mut()[i] = m.aleatoric as f32;
            epistemic.data_mut()[i] = m.epistemic as f32;
        }
        Ok(LogitMoments {
            mean: self.gamma.clone(),
            aleatoric,
            epistemic,
        })
    }

    /// Dose in Gy plus aleatoric/epistemic maps in Gy^2.
    pub fn to_physical(&self) -> Result<PredictionBundle> {
        let m = self.moments()?;
        let shape = self.gamma.shape();
        let mut dose = Grid::zeros(shape);
        let mut alea = Grid::zeros(shape);
        let mut epis = Grid::zeros(shape);
        for i in 0..self.len() {
            let l = self.gamma.data()[i] as f64;
            let factor = variance_to_gy2_factor(l);
            dose.data_mut()[i] = logit_to_dose(l) as f32;
            alea.data_mut()[i] = (factor * m.aleatoric.data()[i] as f64) as f32;
            epis.data_mut()[i] = (factor * m.epistemic.data()[i] as f64) as f32;
        }
        PredictionBundle::new(
            Provenance::Evidential,
            dose,
            vec![
                (UncertaintyKind::Epistemic, epis),
                (UncertaintyKind::Aleatoric, alea),
            ],
        )
    }
}

/// Maps a 4-channel raw output grid to a constrained [`NigField`].
///
/// Channels are `(gamma, nu, alpha, beta)` in that order.
pub fn constrain_raw_outputs(raw: &Grid) -> Result<NigField> {
    if raw.shape().channels() != 4 {
        return Err(Error::InvalidArgument(format!(
            "evidential head needs 4 channels, got {}",
            raw.shape()
        )));
    }
    let mut maps: [Grid; 4] = std::array::from_fn(|c| raw.extract_channel(c));
    let plane = raw.shape().plane();
    for i in 0..plane {
        let v = constrain_voxel(std::array::from_fn(|c| maps[c].data()[i] as f64));
        maps[0].data_mut()[i] = v.gamma as f32;
        maps[1].data_mut()[i] = v.nu as f32;
        maps[2].data_mut()[i] = v.alpha as f32;
        maps[3].data_mut()[i] = v.beta as f32;
    }
    let [gamma, nu, alpha, beta] = maps;
    Ok(NigField {
        gamma,
        nu,
        alpha,
        beta,
    })
}

/// Graph handles of the constrained NIG parameters.
#[derive(Clone, Copy, Debug)]
pub struct NigNodes {
    pub gamma: NodeId,
    pub nu: NodeId,
    pub alpha: NodeId,
    pub beta: NodeId,
}

/// Differentiable version of [`constrain_raw_outputs`].
pub fn constrain_raw_nodes(g: &mut Graph, raw: NodeId) -> Result<NigNodes> {
    if g.shape(raw).channels() != 4 {
        return Err(Error::InvalidArgument(format!(
            "evidential head needs 4 channels, got {}",
            g.shape(raw)
        )));
    }
    let mut param = |c: usize, offset: f64| -> Result<NodeId> {
        let ch = g.channel(raw, c)?;
        let sp = g.softplus(ch)?;
        Ok(g.shift(sp, offset as f32)?)
    };
    Ok(NigNodes {
        gamma: param(0, GAMMA_FLOOR)?,
        nu: param(1, NU_EPS)?,
        alpha: param(2, 1.0 + ALPHA_EPS)?,
        beta: param(3, BETA_FLOOR)?,
    })
}

impl NigNodes {
    pub fn field(&self, g: &Graph) -> NigField {
        NigField {
            gamma: g.value(self.gamma).clone(),
            nu: g.value(self.nu).clone(),
            alpha: g.value(self.alpha).clone(),
            beta: g.value(self.beta).clone(),
        }
    }
}
