//! Mini-batch training with Adam and dev-set model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Example, Rejected, TableMap};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::evalharness::evaluate;
use crate::oracles::OracleKind;
use crate::policy::optim::Adam;
use crate::policy::Policy;

/// Keeps the shuffling/dropout stream apart from the initialization stream.
const TRAIN_STREAM: u64 = 0x7261_696e;

pub struct Trainer {
    pub policy: Policy,
    pub kind: OracleKind,
    opt: Adam,
    rng: ChaCha8Rng,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

impl Trainer {
    pub fn new(policy: Policy, kind: OracleKind) -> Self {
        let opt = Adam::new(&policy.params, policy.config.learning_rate, Some(policy.config.grad_clip));
        let rng = ChaCha8Rng::seed_from_u64(policy.config.seed ^ TRAIN_STREAM);
        Trainer {
            policy,
            kind,
            opt,
            rng,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One Adam update on the mean per-example loss of `batch`.
    pub fn train_step(&mut self, batch: &[&Example], tables: &TableMap) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        let mut grads = self.policy.params.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        let use_dropout = self.policy.config.dropout > 0.0;
        let mut total = 0.0;
        for ex in batch {
            let table = tables
                .get(&ex.table_id)
                .ok_or_else(|| Error::contract(format!("missing table {}", ex.table_id)))?;
            let rng = use_dropout.then_some(&mut self.rng);
            total += self
                .policy
                .loss_and_grad(ex, table, self.kind, rng, Some((&mut grads, scale)))?;
        }
        let grad_norm = self.opt.step(&mut self.policy.params, &mut grads);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: total * scale,
            grad_norm,
        })
    }

    /// Shuffled mini-batches for one pass over `n` examples.
    pub fn epoch_order(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        idx
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Evaluate on dev every N steps; `None` evaluates at the end of every epoch.
    pub eval_every: Option<u64>,
    pub decode: DecodeConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            eval_every: None,
            decode: DecodeConfig::default(),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_acc_ex: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_acc_lf: Option<f64>,
}

pub struct FitResult {
    /// Parameters with the best dev execution accuracy (earliest on ties);
    /// the final parameters when there is no dev set.
    pub best: Policy,
    pub best_dev_acc_ex: Option<f64>,
    pub best_step: u64,
    pub final_policy: Policy,
}

type Best = Option<(f64, u64, Policy)>;

#[allow(clippy::too_many_arguments)]
fn dev_check(
    trainer: &Trainer,
    epoch: usize,
    dev: &[Example],
    dev_rejected: &[Rejected],
    tables: &TableMap,
    decode: &DecodeConfig,
    best: &mut Best,
    log: &mut impl FnMut(&LogRecord) -> Result<()>,
) -> Result<()> {
    let report = evaluate(&trainer.policy, dev, dev_rejected, tables, decode, false);
    let acc = report.acc_ex().unwrap_or(0.0);
    log(&LogRecord {
        step: trainer.steps(),
        epoch,
        loss: None,
        grad_norm: None,
        dev_acc_ex: report.acc_ex(),
        dev_acc_lf: report.acc_lf(),
    })?;
    if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
        *best = Some((acc, trainer.steps(), trainer.policy.clone()));
    }
    Ok(())
}

pub fn fit(
    mut trainer: Trainer,
    train: &[Example],
    dev: &[Example],
    dev_rejected: &[Rejected],
    tables: &TableMap,
    opts: &TrainOptions,
    mut log: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<FitResult> {
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let batch_size = trainer.policy.config.batch_size;
    let has_dev = !dev.is_empty() || !dev_rejected.is_empty();
    let mut best: Best = None;
    for epoch in 1..=opts.epochs {
        let order = trainer.epoch_order(train.len());
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let stats = trainer.train_step(&batch, tables)?;
            if !stats.loss.is_finite() {
                return Err(Error::contract(format!("non-finite loss at step {}", stats.step)));
            }
            log(&LogRecord {
                step: stats.step,
                epoch,
                loss: Some(stats.loss),
                grad_norm: Some(stats.grad_norm),
                dev_acc_ex: None,
                dev_acc_lf: None,
            })?;
            if has_dev && opts.eval_every.is_some_and(|n| n > 0 && stats.step % n == 0) {
                dev_check(&trainer, epoch, dev, dev_rejected, tables, &opts.decode, &mut best, &mut log)?;
            }
        }
        if has_dev && opts.eval_every.is_none() {
            dev_check(&trainer, epoch, dev, dev_rejected, tables, &opts.decode, &mut best, &mut log)?;
        }
    }
    let last_step = trainer.steps();
    let final_policy = trainer.policy;
    Ok(match best {
        Some((acc, step, policy)) => FitResult {
            best: policy,
            best_dev_acc_ex: Some(acc),
            best_step: step,
            final_policy,
        },
        None => FitResult {
            best: final_policy.clone(),
            best_dev_acc_ex: None,
            best_step: last_step,
            final_policy,
        },
    })
}
