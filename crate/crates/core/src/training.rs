//! Mini-batch Adam training with validation-perplexity model selection, and
//! decoder pre-training as an unconditional language model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tape, Var};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::perplexity;
use crate::model::{Example, Model};
use crate::params::{Gradients, ParamStore};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub valid_ppl: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TargetReached,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_valid_ppl: f64,
    /// 0 when no epoch improved on the initial parameters.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: usize,
    pub stop: StopReason,
    pub history: Vec<LogRecord>,
}

/// Validation perplexity: total teacher-forced NLL over every supervised
/// token of every task, divided by the token count.
pub fn validation_perplexity(model: &Model, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Precondition("validation set is empty".into()));
    }
    let totals = model.task_nll(examples, batch_size)?;
    let nll: f64 = totals.iter().map(|(_, l, _)| l).sum();
    let tokens: usize = totals.iter().map(|(_, _, n)| n).sum();
    perplexity(nll, tokens)
}

fn optimizer_step(
    model: &mut Model,
    adam: &mut AdamState,
    clip: f64,
    pos: (usize, usize, usize),
    forward: impl for<'a> FnOnce(&Model, &mut Tape<'a>) -> Result<Var>,
) -> Result<f64> {
    let (epoch, step, batch) = pos;
    let (loss, mut grads): (f64, Gradients) = {
        let mut tape = Tape::with_params(&model.store);
        let loss = forward(model, &mut tape)?;
        let value = tape.value(loss).item();
        let diverged = || Error::Diverged {
            epoch,
            step,
            batch,
            loss: value,
        };
        if !value.is_finite() {
            return Err(diverged());
        }
        let back = tape.backward(loss).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(),
            other => other,
        })?;
        (value, tape.param_grads(&back))
    };
    grads.clip_global_norm(clip);
    adam.step(&mut model.store, &grads)?;
    Ok(loss)
}

/// Trains `model` in place and leaves it holding the parameters with the
/// best validation perplexity. `on_epoch` sees every log record as it is
/// produced.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let mut adam = AdamState::new(cfg.adam, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best_ppl = validation_perplexity(model, valid_set, cfg.batch_size)?;
    let mut best_store: ParamStore = model.store.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut steps = 0;
    let mut history = Vec::new();
    let target_hit = |ppl: f64| cfg.target_valid_ppl.is_some_and(|t| ppl <= t);
    let mut stop = if target_hit(best_ppl) {
        StopReason::TargetReached
    } else {
        StopReason::MaxEpochs
    };

    let mut epoch = 0;
    while stop == StopReason::MaxEpochs && epoch < cfg.max_epochs {
        epoch += 1;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();
            loss_sum += optimizer_step(model, &mut adam, cfg.clip_norm, (epoch, steps + 1, b), |m, tape| {
                let out = m.forward(tape, &batch)?;
                out.loss(tape)
            })?;
            steps += 1;
        }
        let ppl = validation_perplexity(model, valid_set, cfg.batch_size)?;
        let improved = ppl < best_ppl;
        if improved {
            best_ppl = ppl;
            best_store = model.store.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        let rec = LogRecord {
            phase: "train".into(),
            epoch,
            step: steps,
            loss: loss_sum / batches.len() as f64,
            valid_ppl: Some(ppl),
            best: improved,
        };
        on_epoch(&rec);
        history.push(rec);
        if target_hit(best_ppl) {
            stop = StopReason::TargetReached;
        } else if stale > cfg.patience {
            stop = StopReason::Patience;
        }
    }
    model.store = best_store;
    Ok(TrainOutcome {
        best_valid_ppl: best_ppl,
        best_epoch,
        epochs_run: epoch,
        steps,
        stop,
        history,
    })
}

/// Pre-trains the definition decoder for `epochs` epochs as a plain
/// language model. Only the decoder head and the special-token rows receive
/// gradient.
pub fn pretrain_decoder(
    model: &mut Model,
    sentences: &[Vec<usize>],
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
    mut on_epoch: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    let sentences: Vec<&[usize]> = sentences.iter().filter(|s| !s.is_empty()).map(Vec::as_slice).collect();
    if sentences.is_empty() {
        return Err(Error::Precondition("language-model corpus is empty".into()));
    }
    let mut adam = AdamState::new(cfg.adam, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut steps = 0;
    let mut history = Vec::new();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut nll = 0.0;
        let mut tokens = 0;
        let mut loss_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&[usize]> = idx.iter().map(|&i| sentences[i]).collect();
            let mut stats = (0.0, 0);
            loss_sum += optimizer_step(model, &mut adam, cfg.clip_norm, (epoch, steps + 1, b), |m, tape| {
                let out = m.lm_forward(tape, &batch)?;
                stats = (tape.value(out.total).item(), out.tokens);
                Ok(out.mean)
            })?;
            nll += stats.0;
            tokens += stats.1;
            steps += 1;
        }
        let rec = LogRecord {
            phase: "pretrain".into(),
            epoch,
            step: steps,
            loss: loss_sum / batches.len() as f64,
            // Running training perplexity over the epoch.
            valid_ppl: Some(perplexity(nll, tokens)?),
            best: false,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// Serializes records as line-delimited JSON.
pub fn log_lines(records: &[LogRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}
