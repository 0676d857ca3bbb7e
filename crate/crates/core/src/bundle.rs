use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Grid;

/// Which estimator produced a [`PredictionBundle`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Evidential,
    Dropout,
    Ensemble,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Evidential => "evidential",
            Provenance::Dropout => "dropout",
            Provenance::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kind of a per-voxel uncertainty map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UncertaintyKind {
    /// Expected first-order variance `E[sigma^2]`.
    Aleatoric,
    /// Variance of the first-order mean `Var[mu]`.
    Epistemic,
    /// Sample variance across dropout passes or ensemble members.
    Sample,
}

impl UncertaintyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            UncertaintyKind::Aleatoric => "aleatoric",
            UncertaintyKind::Epistemic => "epistemic",
            UncertaintyKind::Sample => "sample",
        }
    }
}

/// Dose prediction in Gy with variance maps in Gy^2.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub provenance: Provenance,
    pub dose: Grid,
    uncertainties: Vec<(UncertaintyKind, Grid)>,
}

impl PredictionBundle {
    pub fn new(
        provenance: Provenance,
        dose: Grid,
        uncertainties: Vec<(UncertaintyKind, Grid)>,
    ) -> Result<Self> {
        if uncertainties.is_empty() {
            return Err(Error::InvalidArgument(
                "a prediction bundle needs at least one uncertainty map".into(),
            ));
        }
        if dose.shape().channels() != 1 {
            return Err(Error::InvalidArgument(format!(
                "dose must be single-channel, got {}",
                dose.shape()
            )));
        }
        for (kind, map) in &uncertainties {
            map.expect_shape(dose.shape(), kind.as_str())?;
        }
        Ok(PredictionBundle {
            provenance,
            dose,
            uncertainties,
        })
    }

    pub fn uncertainties(&self) -> &[(UncertaintyKind, Grid)] {
        &self.uncertainties
    }

    pub fn uncertainty(&self, kind: UncertaintyKind) -> Option<&Grid> {
        self.uncertainties
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, g)| g)
    }

    pub fn aleatoric(&self) -> Option<&Grid> {
        self.uncertainty(UncertaintyKind::Aleatoric)
    }

    pub fn epistemic(&self) -> Option<&Grid> {
        self.uncertainty(UncertaintyKind::Epistemic)
    }

    /// The map used when a single uncertainty per family is reported:
    /// epistemic for the evidential model, the sample variance otherwise.
    pub fn primary_uncertainty(&self) -> &Grid {
        self.epistemic()
            .or_else(|| self.uncertainty(UncertaintyKind::Sample))
            .unwrap_or(&self.uncertainties[0].1)
    }
}
