use crate::backbone::{init_backbone, Arch, ModelConfig};
use crate::params::ParamStore;
use crate::petl::{apply_method, Method, MethodConfig};
use crate::task::{Task, TaskSpec};
use crate::train::*;

fn setup(task: Task) -> (ParamStore<f32>, ModelConfig, TaskSpec) {
    let spec = TaskSpec::new(task, 16, 6, 21);
    let model = spec.model_for(2, 32, 2, 64, 8, 13);
    let store = init_backbone(&model).unwrap();
    (store, model, spec)
}

fn full_cfg(task: TaskSpec) -> TrainConfig {
    let mut cfg = TrainConfig::new(MethodConfig::new(Method::Full), task);
    cfg.lr = 3e-3;
    cfg.steps = 120;
    cfg.batch = 16;
    cfg.eval_batches = 2;
    cfg
}

#[test]
fn config_validation_rejects_bad_runs() {
    let (_, model, spec) = setup(Task::Copy);
    let good = full_cfg(spec.clone());
    good.validate(&model).unwrap();
    let mut bad = good.clone();
    bad.lr = 0.0;
    assert!(bad.validate(&model).is_err());
    let mut bad = good.clone();
    bad.steps = 0;
    assert!(bad.validate(&model).is_err());
    let mut bad = good.clone();
    bad.task.task = Task::Parity;
    assert!(bad.validate(&model).is_err(), "parity needs a causal encoder");
    let mut enc = model.clone();
    enc.arch = Arch::Encoder;
    assert!(good.validate(&enc).is_err());
}

#[test]
fn evaluate_is_deterministic() {
    let (mut store, model, spec) = setup(Task::Copy);
    let cfg = MethodConfig::new(Method::Full);
    apply_method(&mut store, &model, &cfg, 1).unwrap();
    let a = evaluate(&store, &model, &cfg, &spec, 4, 3).unwrap();
    let b = evaluate(&store, &model, &cfg, &spec, 4, 3).unwrap();
    assert_eq!(a, b);
    assert!(a.loss.is_finite() && a.loss > 0.0);
    assert!((0.0..=1.0).contains(&a.accuracy));
}

#[test]
fn full_finetuning_learns_copy() {
    let (mut store, model, spec) = setup(Task::Copy);
    let cfg = full_cfg(spec);
    apply_method(&mut store, &model, &cfg.method, 1).unwrap();
    let mut lines = Vec::new();
    let res = train(&mut store, &model, &cfg, &mut |l| lines.push(l.to_string())).unwrap();
    assert!(
        res.last.loss < 0.5 * res.initial.loss,
        "copy should at least halve its loss: {} -> {}",
        res.initial.loss,
        res.last.loss
    );
    assert!(res.last.accuracy > res.initial.accuracy);
    assert_eq!(res.steps, cfg.steps);
    assert!(res.final_train_loss.is_finite());
    assert!(lines[0].starts_with("run.method=full run.task=copy"));
    assert!(lines.iter().any(|l| l.starts_with("step=0 split=eval")));
    assert!(lines.iter().any(|l| l.starts_with("step=120 split=eval")));
}

#[test]
fn metric_stream_is_reproducible() {
    let (store0, model, spec) = setup(Task::Parity);
    let mut cfg = TrainConfig::new(MethodConfig::new(Method::Full), spec);
    cfg.steps = 8;
    cfg.batch = 4;
    cfg.eval_batches = 2;
    cfg.eval_every = 4;
    cfg.log_every = 2;
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut store = store0.clone();
        apply_method(&mut store, &model, &cfg.method, 1).unwrap();
        let mut lines = Vec::new();
        train(&mut store, &model, &cfg, &mut |l| lines.push(l.to_string())).unwrap();
        runs.push(lines);
    }
    assert_eq!(runs[0], runs[1]);
    let evals = runs[0].iter().filter(|l| l.contains("split=eval")).count();
    assert_eq!(evals, 3, "initial, step 4, final");
    let trains = runs[0].iter().filter(|l| l.contains("split=train")).count();
    assert_eq!(trains, 4, "steps 2, 4, 6, 8");
}

#[test]
fn non_finite_loss_aborts_the_run() {
    let (mut store, model, spec) = setup(Task::Copy);
    let cfg = full_cfg(spec);
    apply_method(&mut store, &model, &cfg.method, 1).unwrap();
    store.get_mut("backbone.enc.1.attn.q.w").unwrap().tensor.data_mut()[0] = f32::NAN;
    let err = train(&mut store, &model, &cfg, &mut |_| {}).unwrap_err();
    assert!(matches!(err, crate::error::Error::Numeric(_)), "got {err:?}");
}

#[test]
fn improvement_is_the_loss_ratio() {
    let r = RunResult {
        initial: EvalResult { loss: 2.0, accuracy: 0.1 },
        last: EvalResult { loss: 0.5, accuracy: 0.9 },
        final_train_loss: 0.4,
        steps: 10,
    };
    assert!((r.improvement() - 0.25).abs() < 1e-12);
}
