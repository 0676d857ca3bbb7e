//! Evidential losses.
//!
//! Integrating the Gaussian likelihood of the target logit `L` against the
//! NIG prior gives a Student-t marginal
//!
//! ```text
//! St(L) = Γ(α+½)/Γ(α) · sqrt(ν/π) · [2β(1+ν)]^α · [ν(L-γ)² + 2β(1+ν)]^-(α+½)
//! ```
//!
//! The *original* loss is its negative log (including the `1/(y(1-y))`
//! logit-normal Jacobian) plus the evidence regularizer. The *refined* loss
//! drops the Jacobian, squashes the density through `f_s(g) = 1/(1+g)` and
//! adds a squared-error term:
//!
//! ```text
//! loss = f_s(St(L)) + λ_KL |L-γ| (2ν+α) + λ_mse (L-γ)²
//! ```
//!
//! `f_s(St) = sigmoid(-ln St)`, which is how it is evaluated here: the
//! density stays in log space throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{logit, NigNodes, NigVoxel};
use crate::tensor::{Graph, Grid, NodeId};

const HALF_LN_PI: f64 = 0.572_364_942_924_700_1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Original,
    Refined,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(LossVariant::Original),
            "refined" => Ok(LossVariant::Refined),
            other => Err(Error::Config(format!(
                "unknown loss variant {other:?} (expected original or refined)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_kl: f64,
    pub lambda_mse: f64,
    #[serde(rename = "loss_variant")]
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_kl: 0.01,
            lambda_mse: 0.05,
            variant: LossVariant::Refined,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0 && self.lambda_mse >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got lambda_kl = {}, lambda_mse = {}",
                self.lambda_kl, self.lambda_mse
            )));
        }
        Ok(())
    }
}

/// Natural log of the Student-t marginal.
pub fn log_student_t_marginal(l_y: f64, v: &NigVoxel) -> Result<f64> {
    let two_b_lambda = 2.0 * v.beta * (1.0 + v.nu);
    let r = l_y - v.gamma;
    let log_gamma_ratio =
        crate::tensor::special::ln_gamma(v.alpha + 0.5) - crate::tensor::special::ln_gamma(v.alpha);
    let value = log_gamma_ratio + 0.5 * v.nu.ln() - HALF_LN_PI + v.alpha * two_b_lambda.ln()
        - (v.alpha + 0.5) * (v.nu * r * r + two_b_lambda).ln();
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Student-t log density not finite at L = {l_y}, {v:?}"
        )));
    }
    Ok(value)
}

pub fn student_t_marginal(l_y: f64, v: &NigVoxel) -> Result<f64> {
    let value = log_student_t_marginal(l_y, v)?.exp();
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Student-t density overflowed at L = {l_y}, {v:?}"
        )));
    }
    Ok(value)
}

/// `|L - γ| (2ν + α)`.
pub fn evidence_regularizer(l_y: f64, v: &NigVoxel) -> f64 {
    (l_y - v.gamma).abs() * (2.0 * v.nu + v.alpha)
}

/// `1 / (1 + g)` given `ln g`, stable for any magnitude.
pub fn squash_from_log(log_g: f64) -> f64 {
    crate::evidential::sigmoid(-log_g)
}

pub fn refined_loss(l_y: f64, v: &NigVoxel, cfg: &LossConfig) -> Result<f64> {
    if cfg.variant != LossVariant::Refined {
        return Err(Error::Config("refined_loss called with the original variant".into()));
    }
    let r = l_y - v.gamma;
    Ok(squash_from_log(log_student_t_marginal(l_y, v)?)
        + cfg.lambda_kl * evidence_regularizer(l_y, v)
        + cfg.lambda_mse * r * r)
}

/// Negative log of the full marginal (with the logit-normal Jacobian) plus
/// the evidence regularizer. `y` is the normalized dose.
pub fn original_loss(y: f64, v: &NigVoxel, cfg: &LossConfig) -> Result<f64> {
    if cfg.variant != LossVariant::Original {
        return Err(Error::Config("original_loss called with the refined variant".into()));
    }
    if !(y > 0.0 && y < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "normalized dose {y} outside the open unit interval"
        )));
    }
    let l_y = logit(y);
    Ok(-log_student_t_marginal(l_y, v)? + (y * (1.0 - y)).ln()
        + cfg.lambda_kl * evidence_regularizer(l_y, v))
}

/// Records the log Student-t density on the graph, voxelwise.
pub fn log_density_node(g: &mut Graph, nig: &NigNodes, target: NodeId) -> Result<NodeId> {
    let alpha_half = g.shift(nig.alpha, 0.5)?;
    let lg_hi = g.lgamma(alpha_half)?;
    let lg_lo = g.lgamma(nig.alpha)?;
    let gamma_ratio = g.sub(lg_hi, lg_lo)?;

    let log_nu = g.log(nig.nu)?;
    let half_log_nu = g.scale(log_nu, 0.5)?;

    let one_plus_nu = g.shift(nig.nu, 1.0)?;
    let b_lambda = g.mul(nig.beta, one_plus_nu)?;
    let two_b_lambda = g.scale(b_lambda, 2.0)?;
    let log_two_b_lambda = g.log(two_b_lambda)?;
    let evidence_term = g.mul(nig.alpha, log_two_b_lambda)?;

    let r = g.sub(target, nig.gamma)?;
    let r2 = g.square(r)?;
    let nu_r2 = g.mul(nig.nu, r2)?;
    let q = g.add(nu_r2, two_b_lambda)?;
    let log_q = g.log(q)?;
    let tail = g.mul(alpha_half, log_q)?;

    let s = g.add(gamma_ratio, half_log_nu)?;
    let s = g.add(s, evidence_term)?;
    let s = g.sub(s, tail)?;
    Ok(g.shift(s, -HALF_LN_PI as f32)?)
}

/// Mean per-voxel loss over voxels where `mask` is non-zero.
///
/// `target_logit` holds the logit of the normalized target dose.
pub fn batch_loss(
    g: &mut Graph,
    nig: &NigNodes,
    target_logit: &Grid,
    mask: &Grid,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    target_logit.expect_shape(g.shape(nig.gamma), "loss target")?;
    mask.expect_shape(target_logit.shape(), "loss mask")?;
    if !mask.data().iter().any(|&m| m != 0.0) {
        return Err(Error::InvalidArgument("loss mask selects no voxels".into()));
    }
    let target = g.constant(target_logit.clone());
    let log_density = log_density_node(g, nig, target)?;

    let r = g.sub(target, nig.gamma)?;
    let abs_r = g.abs(r)?;
    let two_nu = g.scale(nig.nu, 2.0)?;
    let evidence = g.add(two_nu, nig.alpha)?;
    let reg = g.mul(abs_r, evidence)?;
    let reg = g.scale(reg, cfg.lambda_kl as f32)?;

    let per_voxel = match cfg.variant {
        LossVariant::Refined => {
            let neg = g.unary(crate::tensor::Unary::Neg, log_density)?;
            let squashed = g.sigmoid(neg)?;
            let r2 = g.square(r)?;
            let mse = g.scale(r2, cfg.lambda_mse as f32)?;
            let s = g.add(squashed, reg)?;
            g.add(s, mse)?
        }
        LossVariant::Original => {
            // ln(y(1-y)) with y = sigmoid(L) is -softplus(L) - softplus(-L)
            let jacobian = target_logit.map(|l| {
                let l = l as f64;
                (-(crate::evidential::softplus(l) + crate::evidential::softplus(-l))) as f32
            });
            let jacobian = g.constant(jacobian);
            let neg = g.unary(crate::tensor::Unary::Neg, log_density)?;
            let nll = g.add(neg, jacobian)?;
            g.add(nll, reg)?
        }
    };
    Ok(g.masked_mean(per_voxel, mask)?)
}

/// Mean squared logit error over masked voxels, used by the point-estimate
/// baselines.
pub fn squared_error_loss(
    g: &mut Graph,
    prediction: NodeId,
    target_logit: &Grid,
    mask: &Grid,
) -> Result<NodeId> {
    target_logit.expect_shape(g.shape(prediction), "loss target")?;
    let target = g.constant(target_logit.clone());
    let r = g.sub(prediction, target)?;
    let r2 = g.square(r)?;
    Ok(g.masked_mean(r2, mask)?)
}
