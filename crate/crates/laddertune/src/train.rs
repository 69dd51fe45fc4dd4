//! Training loop shared by every method arm.
//!
//! Metrics leave through a caller-supplied sink as space-separated
//! `key=value` lines, one line per event, so the same loop serves stdout,
//! results files, and tests that parse the stream back.

use crate::backbone::{init_backbone, ModelConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::petl::{apply_method, method_forward, method_name, MethodConfig};
use crate::prune::{fisher_importance, magnitude_importance, prune_init_side, InitStrategy};
use crate::tape::{Elem, GradMap, Reduction, Tape};
use crate::task::{eval_stream, sample_batch, task_name, TaskSpec};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: MethodConfig,
    pub task: TaskSpec,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Mid-run eval cadence in steps; 0 evaluates only before and after.
    pub eval_every: usize,
    pub eval_batches: usize,
    /// Train-loss reporting cadence; 0 reports only the final step.
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(method: MethodConfig, task: TaskSpec) -> Self {
        TrainConfig {
            method,
            task,
            lr: 1e-3,
            steps: 200,
            batch: 8,
            eval_every: 0,
            eval_batches: 4,
            log_every: 0,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.method.validate(model)?;
        self.task.validate_for(model)?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.steps == 0 || self.batch == 0 || self.eval_batches == 0 {
            return Err(Error::Config("steps, batch and eval_batches must be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and argmax accuracy over held-out streams. Parameters are
/// registered frozen so the tape retains nothing.
pub fn evaluate<E: Elem>(
    store: &ParamStore<E>,
    model: &ModelConfig,
    method: &MethodConfig,
    task: &TaskSpec,
    batch: usize,
    batches: usize,
) -> Result<EvalResult> {
    if batch == 0 || batches == 0 {
        return Err(Error::Input("eval batch and batch count must be positive".to_string()));
    }
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    let mut total = 0usize;
    for k in 0..batches {
        let data = sample_batch(task, batch, eval_stream(k as u64))?;
        let mut tape = Tape::new();
        let vars = store.register_frozen(&mut tape)?;
        let logits = method_forward(&mut tape, &vars, model, method, &data)?;
        let loss = tape.cross_entropy(logits, &data.targets, Reduction::Mean)?;
        let lv = tape.value(loss)[0].to_f64();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("eval loss is {lv}")));
        }
        loss_sum += lv;

        let shape = tape.shape(logits);
        let vocab = *shape.last().unwrap();
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        if rows != data.targets.len() {
            return Err(Error::Wiring(format!(
                "logit rows {rows} do not match {} targets",
                data.targets.len()
            )));
        }
        let values = tape.value(logits);
        for (r, &want) in data.targets.iter().enumerate() {
            let row = &values[r * vocab..(r + 1) * vocab];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == want as usize {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(EvalResult {
        loss: loss_sum / batches as f64,
        accuracy: hits as f64 / total as f64,
    })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub initial: EvalResult,
    pub last: EvalResult,
    pub final_train_loss: f64,
    pub steps: usize,
}

impl RunResult {
    /// Eval-loss ratio after/before; the headroom a run actually used.
    pub fn improvement(&self) -> f64 {
        self.last.loss / self.initial.loss
    }
}

fn emit(sink: &mut dyn FnMut(&str), line: &str) {
    sink(line);
}

/// Optimize whatever the store currently marks trainable. The caller has
/// already applied a method (and any pruned initialization); this loop only
/// samples, differentiates and steps. Non-finite losses abort the run.
pub fn train<E: Elem>(
    store: &mut ParamStore<E>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&str),
) -> Result<RunResult> {
    cfg.validate(model)?;
    emit(
        sink,
        &format!(
            "run.method={} run.task={} run.lr={} run.steps={} run.batch={} run.trainable={}",
            method_name(cfg.method.method),
            task_name(cfg.task.task),
            cfg.lr,
            cfg.steps,
            cfg.batch,
            store.trainable_params()
        ),
    );
    let initial = evaluate(store, model, &cfg.method, &cfg.task, cfg.batch, cfg.eval_batches)?;
    emit(sink, &format!("step=0 split=eval loss={:.6} acc={:.4}", initial.loss, initial.accuracy));

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut train_loss = f64::NAN;
    for step in 1..=cfg.steps {
        let data = sample_batch(&cfg.task, cfg.batch, (step - 1) as u64)?;
        let mut tape = Tape::new();
        let vars = store.register_on(&mut tape)?;
        let logits = method_forward(&mut tape, &vars, model, &cfg.method, &data)?;
        let loss = tape.cross_entropy(logits, &data.targets, Reduction::Mean)?;
        train_loss = tape.value(loss)[0].to_f64();
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!("train loss is {train_loss} at step {step}")));
        }
        let grads = tape.backward(loss)?;
        adam.step(store, &grads)?;

        let last = step == cfg.steps;
        if last || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            emit(sink, &format!("step={step} split=train loss={train_loss:.6}"));
        }
        if !last && cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let ev = evaluate(store, model, &cfg.method, &cfg.task, cfg.batch, cfg.eval_batches)?;
            emit(sink, &format!("step={step} split=eval loss={:.6} acc={:.4}", ev.loss, ev.accuracy));
        }
    }

    let last = evaluate(store, model, &cfg.method, &cfg.task, cfg.batch, cfg.eval_batches)?;
    emit(
        sink,
        &format!("step={} split=eval loss={:.6} acc={:.4}", cfg.steps, last.loss, last.accuracy),
    );
    Ok(RunResult {
        initial,
        last,
        final_train_loss: train_loss,
        steps: cfg.steps,
    })
}

/// Apply a method to a clone of a frozen trunk. Side-network methods can
/// replace their fresh blocks with a pruned initialization; `fisher` feeds
/// the Fisher strategy and may be empty otherwise.
pub fn stand_up<E: Elem>(
    trunk: &ParamStore<E>,
    model: &ModelConfig,
    method: &MethodConfig,
    strategy: Option<InitStrategy>,
    fisher: &[TokenBatch],
    seed: u64,
) -> Result<ParamStore<E>> {
    let mut store = trunk.clone();
    apply_method(&mut store, model, method, seed)?;
    if let Some(strategy) = strategy {
        let side = method.side.as_ref().ok_or_else(|| {
            Error::Wiring("pruned initialization without a side network".to_string())
        })?;
        match strategy {
            InitStrategy::Random => {}
            InitStrategy::Magnitude => {
                let imp = magnitude_importance(&store);
                prune_init_side(&mut store, model, side, &imp)?;
            }
            InitStrategy::Fisher => {
                let imp = fisher_importance(model, &store, fisher)?;
                prune_init_side(&mut store, model, side, &imp)?;
            }
        }
    }
    Ok(store)
}

/// Loss on one fixed batch, with gradients on demand: the eval closure
/// shape gradient checking wants.
pub fn probe_loss<E: Elem>(
    store: &ParamStore<E>,
    model: &ModelConfig,
    method: &MethodConfig,
    batch: &TokenBatch,
    with_grads: bool,
) -> Result<(f64, Option<GradMap<E>>)> {
    let mut tape = Tape::new();
    let vars = if with_grads {
        store.register_on(&mut tape)?
    } else {
        store.register_frozen(&mut tape)?
    };
    let logits = method_forward(&mut tape, &vars, model, method, batch)?;
    let loss = tape.cross_entropy(logits, &batch.targets, Reduction::Mean)?;
    let lv = tape.value(loss)[0].to_f64();
    if !with_grads {
        return Ok((lv, None));
    }
    Ok((lv, Some(tape.backward(loss)?)))
}

/// Initialize a fresh backbone and train it end to end. The returned store
/// is frozen: a trunk ready for `apply_method`.
pub fn pretrain<E: Elem>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&str),
) -> Result<(ParamStore<E>, RunResult)> {
    let mut store = init_backbone(model)?;
    apply_method(&mut store, model, &cfg.method, model.seed)?;
    let res = train(&mut store, model, cfg, sink)?;
    store.freeze_all();
    Ok((store, res))
}
