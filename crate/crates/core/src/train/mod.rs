//! SGD with momentum and weight decay on a milestone schedule, top-k metrics,
//! checkpointed training runs and loss-curve files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::checkpoint::{NamedTensor, OPTIMIZER_PREFIX};
use crate::arch::{Checkpoint, Model};
use crate::data::{batch_count, epoch_order, Dataset, Pipeline};
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Scalar;

mod metrics;

pub use metrics::{evaluate, top_k_hit, MetricReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub milestones: Vec<u64>,
    pub max_iters: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            milestones: vec![32_000, 48_000],
            max_iters: 64_000,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("milestones", "must be strictly increasing"));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.max_iters) {
            return Err(Error::config("milestones", "must be below max_iters"));
        }
        Ok(())
    }
}

/// `lr0 / 10^m` with `m` the number of milestones at or below `iter`.
pub fn lr_at(iter: u64, cfg: &SgdConfig) -> f64 {
    let m = cfg.milestones.iter().filter(|&&s| s <= iter).count();
    cfg.lr0 / 10f64.powi(m as i32)
}

/// Momentum buffers, one per store entry (empty for running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity<T: Scalar> {
    pub bufs: Vec<Vec<T>>,
}

impl<T: Scalar> Velocity<T> {
    pub fn zeros(store: &ParamStore<T>) -> Self {
        Velocity {
            bufs: store
                .entries()
                .iter()
                .map(|e| match e.kind {
                    ParamKind::Trainable => vec![T::zero(); e.value.numel()],
                    ParamKind::Buffer => Vec::new(),
                })
                .collect(),
        }
    }
}

/// One update of every trainable entry:
/// `g' = g + wd p`, `v = momentum v + g'`, `p = p - lr v`.
///
/// All gradients are checked before anything is written. Entries without a
/// gradient are treated as having a zero gradient.
pub fn sgd_step<T: Scalar>(
    store: &mut ParamStore<T>,
    velocity: &mut Velocity<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    iter: u64,
) -> Result<()> {
    for e in store.entries() {
        if let Some(g) = e.value.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFault {
                    op: format!("gradient of {}", e.name),
                    iter: Some(iter),
                });
            }
        }
    }
    let (lr, mu, wd) = (
        T::from_f64_lossy(lr),
        T::from_f64_lossy(momentum),
        T::from_f64_lossy(weight_decay),
    );
    for (e, v) in store.entries_mut().iter_mut().zip(&mut velocity.bufs) {
        if e.kind != ParamKind::Trainable {
            continue;
        }
        let grad = e.value.take_grad();
        let p = e.value.data_mut();
        match &grad {
            Some(g) => {
                for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = mu * *v + (g + wd * *p);
                    *p = *p - lr * *v;
                }
            }
            None => {
                for (p, v) in p.iter_mut().zip(v.iter_mut()) {
                    *v = mu * *v + wd * *p;
                    *p = *p - lr * *v;
                }
            }
        }
    }
    Ok(())
}

/// Model, optimizer state and the number of completed steps.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub velocity: Velocity<T>,
    pub iter: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>) -> Self {
        let velocity = Velocity::zeros(&model.store);
        TrainState {
            model,
            velocity,
            iter: 0,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint(self.iter);
        for (e, v) in self.model.store.entries().iter().zip(&self.velocity.bufs) {
            if e.kind == ParamKind::Trainable {
                ckpt.tensors.push(NamedTensor {
                    name: format!("{OPTIMIZER_PREFIX}momentum.{}", e.name),
                    shape: e.value.shape().to_vec(),
                    data: v.iter().map(|x| x.to_f32().expect("finite")).collect(),
                });
            }
        }
        ckpt
    }

    /// Model, momentum and iteration from a checkpoint; momentum missing
    /// from the file starts at zero.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = Model::from_checkpoint(ckpt)?;
        let mut state = TrainState::new(model);
        state.iter = ckpt.manifest.iteration;
        for (e, v) in state.model.store.entries().iter().zip(&mut state.velocity.bufs) {
            let name = format!("{OPTIMIZER_PREFIX}momentum.{}", e.name);
            if let Some(t) = ckpt.get(&name) {
                if t.data.len() != v.len() {
                    return Err(Error::Checkpoint(format!("`{name}` has the wrong length")));
                }
                *v = t.data.iter().map(|&x| T::from_f32(x).expect("f32")).collect();
            }
        }
        Ok(state)
    }
}

/// One optimizer step's training loss, with test metrics when an
/// evaluation followed that step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRecord {
    /// Zero-based step index; the loss is measured before the update.
    pub iter: u64,
    pub loss: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    /// Steps to reach (never beyond `sgd.max_iters`).
    pub budget: u64,
    /// Data order and augmentation seed.
    pub seed: u64,
    /// Test-set evaluation cadence in steps; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Where `ckpt-<iter>.bin` files go; `None` disables checkpointing.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(sgd: SgdConfig, budget: u64, seed: u64) -> Self {
        TrainConfig {
            sgd,
            budget,
            seed,
            eval_every: 2000,
            checkpoint_dir: None,
        }
    }
}

pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub test: Option<&'a Dataset>,
    pub pipeline: &'a Pipeline,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<CurveRecord>,
    pub evals: Vec<MetricReport>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    /// Evaluation with the highest top-1, earliest on ties.
    pub fn best(&self) -> Option<&MetricReport> {
        self.evals
            .iter()
            .fold(None, |best: Option<&MetricReport>, r| match best {
                Some(b) if b.top1 >= r.top1 => Some(b),
                _ => Some(r),
            })
    }
}

pub fn checkpoint_path(dir: &Path, iter: u64) -> PathBuf {
    dir.join(format!("ckpt-{iter}.bin"))
}

fn save_checkpoint<T: Scalar>(
    state: &TrainState<T>,
    cfg: &TrainConfig,
    out: &mut TrainOutcome,
) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
        let path = checkpoint_path(dir, state.iter);
        state.to_checkpoint().save(&path)?;
        out.checkpoints.push(path);
    }
    Ok(())
}

/// Runs optimizer steps from `state.iter` up to the budget.
///
/// Step `i` trains on batch `i mod B` of epoch `i / B` (B batches per epoch),
/// so the run depends only on the seed and the step index and resuming
/// from a checkpoint replays the uninterrupted run exactly. A numeric fault
/// stops the run without touching checkpoints already written.
pub fn train_loop<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    sink: &mut dyn FnMut(&CurveRecord),
) -> Result<TrainOutcome> {
    cfg.sgd.validate()?;
    let end = cfg.budget.min(cfg.sgd.max_iters);
    let n = data.train.len();
    if n == 0 {
        return Err(Error::config("dataset", "training set is empty"));
    }
    let per_epoch = batch_count(n, cfg.sgd.batch_size) as u64;
    let mut out = TrainOutcome::default();
    let mut order: Option<(u64, Vec<usize>)> = None;

    while state.iter < end {
        let i = state.iter;
        let epoch = i / per_epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(n, epoch, cfg.seed)));
        }
        let ord = &order.as_ref().expect("order").1;
        let b = (i % per_epoch) as usize * cfg.sgd.batch_size;
        let idx = &ord[b..(b + cfg.sgd.batch_size).min(n)];
        let (images, labels) = data.pipeline.train_batch(data.train, idx, epoch);
        let images = images.cast::<T>();

        let step = state
            .model
            .loss_and_grads(&images, &labels)
            .and_then(|loss| {
                if loss.is_finite() {
                    Ok(loss)
                } else {
                    Err(Error::NumericFault {
                        op: "loss".into(),
                        iter: Some(i),
                    })
                }
            })
            .and_then(|loss| {
                sgd_step(
                    &mut state.model.store,
                    &mut state.velocity,
                    lr_at(i, &cfg.sgd),
                    cfg.sgd.momentum,
                    cfg.sgd.weight_decay,
                    i,
                )?;
                Ok(loss)
            });
        let loss = match step {
            Ok(l) => l,
            Err(Error::NumericFault { op, .. }) => {
                state.model.store.zero_grads();
                return Err(Error::NumericFault { op, iter: Some(i) });
            }
            Err(e) => return Err(e),
        };
        state.iter += 1;

        let mut rec = CurveRecord {
            iter: i,
            loss: loss.to_f64().expect("finite"),
            top1: None,
            top5: None,
        };
        let due = cfg.eval_every > 0 && state.iter.is_multiple_of(cfg.eval_every);
        if let (Some(test), true) = (data.test, due || state.iter == end) {
            let report = evaluate(&mut state.model, test, data.pipeline, 500, state.iter)?;
            rec.top1 = Some(report.top1);
            rec.top5 = Some(report.top5);
            out.evals.push(report);
        }
        sink(&rec);
        out.records.push(rec);
        if cfg.sgd.milestones.contains(&state.iter) && state.iter != end {
            save_checkpoint(state, cfg, &mut out)?;
        }
    }
    if !out.records.is_empty() {
        save_checkpoint(state, cfg, &mut out)?;
    }
    Ok(out)
}

/// `iter,loss[,top1,top5]` with a header line; values printed at full
/// precision so parsing recovers them exactly.
pub fn emit_curves(records: &[CurveRecord], path: &Path) -> Result<()> {
    let with_metrics = records.iter().any(|r| r.top1.is_some());
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(
        f,
        "{}",
        if with_metrics {
            "iter,loss,top1,top5"
        } else {
            "iter,loss"
        }
    )?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        if with_metrics {
            writeln!(f, "{},{},{},{}", r.iter, r.loss, opt(r.top1), opt(r.top5))?;
        } else {
            writeln!(f, "{},{}", r.iter, r.loss)?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRecord>> {
    let text = fs::read_to_string(path)?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some("iter,loss") | Some("iter,loss,top1,top5") => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| bad(format!("line {}: `{s}`", n + 2)))
            };
            let opt = |i: usize| -> Result<Option<f64>> {
                match cols.get(i) {
                    Some(s) if !s.is_empty() => num(s).map(Some),
                    _ => Ok(None),
                }
            };
            if cols.len() < 2 {
                return Err(bad(format!("line {}: too few columns", n + 2)));
            }
            Ok(CurveRecord {
                iter: cols[0]
                    .parse()
                    .map_err(|_| bad(format!("line {}: iteration", n + 2)))?,
                loss: num(cols[1])?,
                top1: opt(2)?,
                top5: opt(3)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let c = SgdConfig::default();
        assert_eq!(lr_at(0, &c), 0.1);
        assert_eq!(lr_at(31_999, &c), 0.1);
        assert_eq!(lr_at(32_000, &c), 0.01);
        assert_eq!(lr_at(47_999, &c), 0.01);
        assert_eq!(lr_at(48_000, &c), 0.001);
        assert_eq!(lr_at(63_999, &c), 0.001);
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::default().validate().is_ok());
        let bad = SgdConfig {
            milestones: vec![48_000, 32_000],
            ..SgdConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SgdConfig {
            milestones: vec![64_000],
            ..SgdConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SgdConfig {
            batch_size: 0,
            ..SgdConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
