//! Adam training loop with per-epoch MAE tracking.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{dose_to_logit, logit_to_dose};
use crate::exec;
use crate::loss::{batch_loss, squared_error_loss, LossConfig};
use crate::phantom::PatientCase;
use crate::tensor::{Graph, Grid, TensorError};
use crate::unet::{evidential_nodes, point_logit_node, HeadKind, Mode, Network};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds the dropout masks; independent of the weight initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with 32-bit moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &[Grid]) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Grid], grads: &[Grid]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.epsilon as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Per-epoch metrics. MAE values are in Gy over valid voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_mae,val_mae\n");
        for r in &self.records {
            let val = r.val_mae.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.train_mae, val));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// A case with its loss target precomputed.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub input: Grid,
    pub target_logit: Grid,
    pub dose: Grid,
    pub valid: Grid,
}

impl PreparedCase {
    pub fn new(case: &PatientCase) -> Result<Self> {
        let mut target = Grid::zeros(case.dose.shape());
        for (t, &d) in target.data_mut().iter_mut().zip(case.dose.data()) {
            *t = dose_to_logit(d as f64)? as f32;
        }
        Ok(PreparedCase {
            input: case.input(),
            target_logit: target,
            dose: case.dose.clone(),
            valid: case.valid.clone(),
        })
    }
}

/// Pooled absolute dose error over valid voxels.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaeAccumulator {
    sum: f64,
    count: usize,
}

impl MaeAccumulator {
    pub fn add(&mut self, predicted_dose: &[f32], truth: &[f32], valid: &[f32]) {
        for ((&p, &t), &v) in predicted_dose.iter().zip(truth).zip(valid) {
            if v != 0.0 {
                self.sum += (p as f64 - t as f64).abs();
                self.count += 1;
            }
        }
    }

    pub fn add_logits(&mut self, logits: &Grid, case: &PreparedCase) {
        let dose: Vec<f32> = logits
            .data()
            .iter()
            .map(|&l| logit_to_dose(l as f64) as f32)
            .collect();
        self.add(&dose, case.dose.data(), case.valid.data());
    }

    pub fn value(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Training objective, picked from the network head.
#[derive(Clone, Copy, Debug)]
pub enum Objective {
    Evidential(LossConfig),
    SquaredError,
}

impl Objective {
    pub fn for_head(head: HeadKind, loss: &LossConfig) -> Self {
        match head {
            HeadKind::Evidential => Objective::Evidential(*loss),
            HeadKind::Point => Objective::SquaredError,
        }
    }
}

struct StepOutput {
    loss: f64,
    logits: Grid,
    grads: Vec<Grid>,
}

fn step(net: &Network, case: &PreparedCase, objective: Objective, seed: u64) -> Result<StepOutput> {
    let mut g = Graph::new(seed);
    let pass = net.record(&mut g, &case.input, Mode::Train, true)?;
    let (loss, logits) = match objective {
        Objective::Evidential(cfg) => {
            let nig = evidential_nodes(&mut g, &pass)?;
            (batch_loss(&mut g, &nig, &case.target_logit, &case.valid, &cfg)?, nig.gamma)
        }
        Objective::SquaredError => {
            let logit = point_logit_node(&mut g, pass.raw)?;
            (squared_error_loss(&mut g, logit, &case.target_logit, &case.valid)?, logit)
        }
    };
    let mut grads = g.backward(loss)?;
    let grads = pass
        .params
        .iter()
        .zip(net.parameters())
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Grid::zeros(p.shape())))
        .collect::<Vec<_>>();
    Ok(StepOutput {
        loss: g.value(loss).data()[0] as f64,
        logits: g.value(logits).clone(),
        grads,
    })
}

/// Infer-mode MAE over `cases`.
pub fn evaluate_mae(net: &Network, cases: &[PreparedCase]) -> Result<Option<f64>> {
    let mut acc = MaeAccumulator::default();
    for case in cases {
        let logits = match net.config().head {
            HeadKind::Evidential => net.forward(&case.input, Mode::Infer, 0)?.gamma,
            HeadKind::Point => net.forward_point(&case.input, Mode::Infer, 0)?,
        };
        acc.add_logits(&logits, case);
    }
    Ok(acc.value())
}

fn is_numerical(e: &Error) -> bool {
    matches!(
        e,
        Error::Tensor(TensorError::NonFinite(_)) | Error::Tensor(TensorError::Domain(_))
    )
}

/// Trains `net` in place, one case per step in dataset order.
pub fn train(
    net: &mut Network,
    train_cases: &[PreparedCase],
    val_cases: &[PreparedCase],
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<TrainTrace> {
    train_observed(net, train_cases, val_cases, cfg, objective, &mut |_| {})
}

/// As [`train`], calling `observer` after each epoch.
pub fn train_observed(
    net: &mut Network,
    train_cases: &[PreparedCase],
    val_cases: &[PreparedCase],
    cfg: &TrainConfig,
    objective: Objective,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainTrace> {
    cfg.validate()?;
    if train_cases.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Objective::Evidential(loss) = objective {
        loss.validate()?;
    }
    let mut adam = Adam::new(cfg, net.parameters());
    let mut trace = TrainTrace::default();
    let diverged = |epoch: usize, reason: String, trace: &TrainTrace| Error::Diverged {
        epoch,
        reason,
        trace: Box::new(trace.clone()),
    };
    let mut step_index = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut mae = MaeAccumulator::default();
        for (i, case) in train_cases.iter().enumerate() {
            let seed = exec::derive_seed(cfg.seed, step_index);
            step_index += 1;
            let out = match step(net, case, objective, seed) {
                Ok(out) => out,
                Err(e) if is_numerical(&e) => {
                    return Err(diverged(epoch, format!("case {i}: {e}"), &trace))
                }
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() {
                return Err(diverged(epoch, format!("case {i}: loss {}", out.loss), &trace));
            }
            if out.grads.iter().any(|g| !g.all_finite()) {
                return Err(diverged(epoch, format!("case {i}: non-finite gradient"), &trace));
            }
            loss_sum += out.loss;
            mae.add_logits(&out.logits, case);
            adam.update(net.parameters_mut(), &out.grads);
            if net.parameters().iter().any(|p| !p.all_finite()) {
                return Err(diverged(epoch, format!("case {i}: non-finite weights"), &trace));
            }
        }
        let val_mae = match evaluate_mae(net, val_cases) {
            Ok(v) => v,
            Err(e) if is_numerical(&e) => {
                return Err(diverged(epoch, format!("validation: {e}"), &trace))
            }
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_cases.len() as f64,
            train_mae: mae.value().unwrap_or(f64::NAN),
            val_mae,
        };
        observer(&record);
        trace.records.push(record);
    }
    Ok(trace)
}
