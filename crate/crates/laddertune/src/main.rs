//! Thin command-line front end over the library. Every knob lives in a
//! flat `key=value` config (file plus `--set` overrides); metrics stream as
//! `key=value` lines to stdout and, with `--out`, to a results file.

use std::fs::File;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use laddertune::ablate::{ablate, parse_suite, AblateConfig};
use laddertune::backbone::{init_backbone, ModelConfig};
use laddertune::checkpoint;
use laddertune::config::Config;
use laddertune::error::{Error, Result};
use laddertune::gradcheck::{jitter_and_check, GradCheckConfig};
use laddertune::memory::{estimate, measure, validate, BatchShape};
use laddertune::params::ParamStore;
use laddertune::petl::{parse_method, Method, MethodConfig};
use laddertune::prune::{init_side_with_strategy, parse_strategy, InitStrategy};
use laddertune::side::{SideConfig, SideMode};
use laddertune::task::{fisher_stream, parse_task, sample_batch, TaskSpec};
use laddertune::train::{pretrain, probe_loss, stand_up, train, TrainConfig};

#[derive(Parser)]
#[command(name = "laddertune", about = "Ladder side-tuning with byte-exact memory accounting", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a fresh backbone on a task and checkpoint the frozen trunk.
    Pretrain(Run),
    /// Fine-tune a checkpointed trunk with one of the method arms.
    Finetune(Run),
    /// Measured vs estimated training-memory report for a method.
    MemoryReport(Run),
    /// Finite-difference gradient verification in float64.
    GradCheck(Run),
    /// Pruned side-network initialization: checkpoint plus kept indices.
    PruneInit(Run),
    /// Seed-averaged ablation suites.
    Ablate(Run),
}

#[derive(Args)]
struct Run {
    /// Flat key=value config file; `#` comments allowed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set side.r=8`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Also append every metric line to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Stdout plus optional results file.
struct Sink {
    file: Option<File>,
}

impl Sink {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        let file = match path {
            Some(p) => Some(File::create(p)?),
            None => None,
        };
        Ok(Sink { file })
    }

    fn line(&mut self, l: &str) {
        println!("{l}");
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{l}");
        }
    }
}

fn load_config(run: &Run) -> Result<Config> {
    let mut cfg = match &run.config {
        Some(p) => Config::from_file(p)?,
        None => Config::empty(),
    };
    cfg.apply_overrides(&run.set)?;
    Ok(cfg)
}

fn task_keys(cfg: &Config, default_name: &str, default_seq: usize) -> Result<TaskSpec> {
    let task = parse_task(&cfg.get_str("task.name", default_name))?;
    Ok(TaskSpec::new(
        task,
        cfg.get_usize("task.vocab", 32)?,
        cfg.get_usize("task.seq", default_seq)?,
        cfg.get_u64("task.seed", 5)?,
    ))
}

/// Desk-scale defaults; the architecture family follows the task.
fn model_keys(cfg: &Config, task: &TaskSpec) -> Result<ModelConfig> {
    let model = task.model_for(
        cfg.get_usize("model.layers", 6)?,
        cfg.get_usize("model.d", 64)?,
        cfg.get_usize("model.heads", 4)?,
        cfg.get_usize("model.dff", 128)?,
        cfg.get_usize("model.max_seq", 24)?,
        cfg.get_u64("model.seed", 7)?,
    );
    model.validate()?;
    task.validate_for(&model)?;
    Ok(model)
}

fn side_keys(cfg: &Config, model: &ModelConfig) -> Result<SideConfig> {
    let mut side = SideConfig::full(model, cfg.get_usize("side.r", 8)?);
    side.temperature = cfg.get_f64("side.temperature", side.temperature)?;
    side.mode = match cfg.get_str("side.mode", "ladder").as_str() {
        "ladder" => SideMode::Ladder,
        "compression" => SideMode::Compression,
        "side-tuning" => SideMode::SideTuning,
        other => return Err(Error::Config(format!("unknown side mode `{other}`"))),
    };
    let keep_enc = cfg.get_usize_list("side.keep_enc", &side.keep_enc)?;
    let keep_dec = cfg.get_usize_list("side.keep_dec", &side.keep_dec)?;
    side = side.drop_layers(keep_enc, keep_dec)?;
    side.validate(model)?;
    Ok(side)
}

fn method_keys(cfg: &Config, model: &ModelConfig) -> Result<MethodConfig> {
    let method = parse_method(&cfg.get_str("method.name", "lst"))?;
    let mut mc = if method == Method::Lst {
        MethodConfig::lst(side_keys(cfg, model)?)
    } else {
        MethodConfig::new(method)
    };
    mc.adapter_h = cfg.get_usize("method.adapter_h", mc.adapter_h)?;
    mc.lora_k = cfg.get_usize("method.lora_k", mc.lora_k)?;
    mc.prompt_len = cfg.get_usize("method.prompt_len", mc.prompt_len)?;
    mc.freeze_prefix = cfg.get_usize("method.freeze_prefix", 0)?;
    mc.validate(model)?;
    Ok(mc)
}

fn train_keys(cfg: &Config, method: MethodConfig, task: TaskSpec) -> Result<TrainConfig> {
    let mut tc = TrainConfig::new(method, task);
    tc.lr = cfg.get_f64("train.lr", 1e-3)?;
    tc.steps = cfg.get_usize("train.steps", 500)?;
    tc.batch = cfg.get_usize("train.batch", 8)?;
    tc.eval_every = cfg.get_usize("train.eval_every", 0)?;
    tc.eval_batches = cfg.get_usize("train.eval_batches", 4)?;
    tc.log_every = cfg.get_usize("train.log_every", 50)?;
    Ok(tc)
}

/// Load `io.checkpoint` when given, otherwise initialize a fresh trunk.
fn trunk(cfg: &Config, model: &ModelConfig, sink: &mut Sink) -> Result<ParamStore<f32>> {
    let path = cfg.get_str("io.checkpoint", "");
    if path.is_empty() {
        sink.line("trunk=fresh");
        let mut store = init_backbone(model)?;
        store.freeze_all();
        return Ok(store);
    }
    sink.line(&format!("trunk={path}"));
    let store: ParamStore<f32> = checkpoint::load(path.as_ref())?;
    let emb = store.get("backbone.embedding")?;
    if emb.tensor.shape() != [model.vocab, model.d_model] {
        return Err(Error::Wiring(format!(
            "checkpoint embedding is {:?}, model wants [{}, {}]",
            emb.tensor.shape(),
            model.vocab,
            model.d_model
        )));
    }
    Ok(store)
}

fn fisher_batches(cfg: &Config, task: &TaskSpec, strategy: Option<InitStrategy>) -> Result<Vec<laddertune::backbone::TokenBatch>> {
    let n = cfg.get_usize("side.fisher_samples", 16)?;
    if strategy != Some(InitStrategy::Fisher) {
        return Ok(Vec::new());
    }
    (0..n).map(|k| sample_batch(task, 1, fisher_stream(k as u64))).collect()
}

fn cmd_pretrain(run: &Run) -> Result<()> {
    let cfg = load_config(run)?;
    let mut sink = Sink::open(&run.out)?;
    let task = task_keys(&cfg, "cued", 10)?;
    let model = model_keys(&cfg, &task)?;
    let tc = train_keys(&cfg, MethodConfig::new(Method::Full), task)?;
    let save = cfg.get_str("io.save", "");
    cfg.finish()?;
    let (store, res) = pretrain::<f32>(&model, &tc, &mut |l| sink.line(l))?;
    sink.line(&format!(
        "pretrain.final_loss={:.6} pretrain.final_acc={:.4}",
        res.last.loss, res.last.accuracy
    ));
    if !save.is_empty() {
        checkpoint::save(&store, save.as_ref())?;
        sink.line(&format!("saved={save}"));
    }
    Ok(())
}

fn cmd_finetune(run: &Run) -> Result<()> {
    let cfg = load_config(run)?;
    let mut sink = Sink::open(&run.out)?;
    let task = task_keys(&cfg, "copy", 10)?;
    let model = model_keys(&cfg, &task)?;
    let method = method_keys(&cfg, &model)?;
    let strategy = if method.method == Method::Lst {
        Some(parse_strategy(&cfg.get_str("side.init", "random"))?)
    } else {
        None
    };
    let fisher = fisher_batches(&cfg, &task, strategy)?;
    let seed = cfg.get_u64("init.seed", 1)?;
    let tc = train_keys(&cfg, method, task)?;
    let base = trunk(&cfg, &model, &mut sink)?;
    let do_save = cfg.get_str("io.save", "");
    cfg.finish()?;
    let mut store = stand_up(&base, &model, &tc.method, strategy, &fisher, seed)?;
    let res = train(&mut store, &model, &tc, &mut |l| sink.line(l))?;
    sink.line(&format!(
        "finetune.initial_loss={:.6} finetune.final_loss={:.6} finetune.final_acc={:.4}",
        res.initial.loss, res.last.loss, res.last.accuracy
    ));
    if !do_save.is_empty() {
        checkpoint::save(&store, do_save.as_ref())?;
        sink.line(&format!("saved={do_save}"));
    }
    Ok(())
}

fn cmd_memory_report(run: &Run) -> Result<()> {
    let cfg = load_config(run)?;
    let mut sink = Sink::open(&run.out)?;
    let task = task_keys(&cfg, "copy", 10)?;
    let model = model_keys(&cfg, &task)?;
    let method = method_keys(&cfg, &model)?;
    let batch_size = cfg.get_usize("train.batch", 32)?;
    let paper_mode = cfg.get_bool("memory.paper_mode", false)?;
    let seed = cfg.get_u64("init.seed", 1)?;
    let base = trunk(&cfg, &model, &mut sink)?;
    cfg.finish()?;

    let store = stand_up(&base, &model, &method, None, &[], seed)?;
    let batch = sample_batch(&task, batch_size, 0)?;
    let measured = measure(&store, &model, &method, &batch)?;
    let shape = BatchShape::of(&batch);
    let estimated = estimate(&model, &method, &shape, std::mem::size_of::<f32>(), paper_mode)?;

    println!("measured (tape):\n{}", measured.render());
    println!("estimated{}:\n{}", if paper_mode { " (paper mode)" } else { "" }, estimated.render());
    for l in measured.machine_lines() {
        sink.line(&format!("measured.{l}"));
    }
    for l in estimated.machine_lines() {
        sink.line(&format!("estimated.{l}"));
    }
    for c in validate(&estimated, &measured) {
        sink.line(&format!(
            "check.{}={} measured={} rel_err={:.6}",
            c.category, c.estimated, c.measured, c.rel_err
        ));
    }
    Ok(())
}

fn cmd_grad_check(run: &Run) -> Result<()> {
    let mut cfg = load_config(run)?;
    // The float64 check runs on a deliberately tiny model; the desk-scale
    // reduction default of 8 would leave a one-unit side width there.
    if cfg.get_str("side.r", "").is_empty() {
        cfg.set("side.r", "2");
    }
    let mut sink = Sink::open(&run.out)?;
    let spec = TaskSpec::new(
        parse_task(&cfg.get_str("task.name", "copy"))?,
        cfg.get_usize("task.vocab", 16)?,
        cfg.get_usize("task.seq", 4)?,
        cfg.get_u64("task.seed", 5)?,
    );
    let model = spec.model_for(
        cfg.get_usize("model.layers", 2)?,
        cfg.get_usize("model.d", 8)?,
        cfg.get_usize("model.heads", 2)?,
        cfg.get_usize("model.dff", 16)?,
        cfg.get_usize("model.max_seq", 6)?,
        cfg.get_u64("model.seed", 7)?,
    );
    spec.validate_for(&model)?;
    let method = method_keys(&cfg, &model)?;
    let batch_size = cfg.get_usize("train.batch", 2)?;
    let tol = cfg.get_f64("gradcheck.tol", 1e-4)?;
    let jitter = cfg.get_f64("gradcheck.jitter", 0.02)?;
    let mut gc = GradCheckConfig::default();
    gc.step = cfg.get_f64("gradcheck.step", gc.step)?;
    gc.samples_per_param = cfg.get_usize("gradcheck.samples", gc.samples_per_param)?;
    gc.seed = cfg.get_u64("gradcheck.seed", gc.seed)?;
    let seed = cfg.get_u64("init.seed", 1)?;
    cfg.finish()?;

    let base: ParamStore<f64> = {
        let mut s = init_backbone(&model)?;
        s.freeze_all();
        s
    };
    let mut store = stand_up(&base, &model, &method, None, &[], seed)?;
    let batch = sample_batch(&spec, batch_size, 0)?;
    let report = jitter_and_check(&mut store, jitter, &gc, |s, g| {
        probe_loss(s, &model, &method, &batch, g)
    })?;
    for p in &report.per_param {
        sink.line(&format!("param={} max_rel={:.3e} coords={}", p.name, p.max_rel, p.coords_checked));
    }
    sink.line(&format!(
        "gradcheck.max_rel={:.3e} gradcheck.worst={} gradcheck.tol={tol:.1e}",
        report.max_rel, report.worst_param
    ));
    if !report.passes(tol) {
        return Err(Error::Numeric(format!(
            "gradient check failed: max rel err {:.3e} at `{}`",
            report.max_rel, report.worst_param
        )));
    }
    sink.line("gradcheck.pass=1");
    Ok(())
}

fn cmd_prune_init(run: &Run) -> Result<()> {
    let cfg = load_config(run)?;
    let mut sink = Sink::open(&run.out)?;
    let task = task_keys(&cfg, "copy", 10)?;
    let model = model_keys(&cfg, &task)?;
    let side = side_keys(&cfg, &model)?;
    let strategy = parse_strategy(&cfg.get_str("side.init", "magnitude"))?;
    let fisher = fisher_batches(&cfg, &task, Some(strategy))?;
    let seed = cfg.get_u64("init.seed", 1)?;
    let report_path = cfg.get_str("io.report", "");
    let mut store = trunk(&cfg, &model, &mut sink)?;
    let save = cfg.get_str("io.save", "");
    cfg.finish()?;

    let samples = if fisher.is_empty() { None } else { Some(fisher.as_slice()) };
    let report = init_side_with_strategy(&mut store, &model, &side, strategy, seed, samples)?;
    match report {
        None => sink.line("prune.report=none (random initialization keeps no indices)"),
        Some(rep) => {
            let text = rep.render();
            if report_path.is_empty() {
                print!("{text}");
            } else {
                std::fs::write(&report_path, &text)?;
                sink.line(&format!("prune.report={report_path}"));
            }
        }
    }
    if !save.is_empty() {
        checkpoint::save(&store, save.as_ref())?;
        sink.line(&format!("saved={save}"));
    }
    Ok(())
}

fn cmd_ablate(run: &Run) -> Result<()> {
    let cfg = load_config(run)?;
    let mut sink = Sink::open(&run.out)?;
    let suite = parse_suite(&cfg.get_str("ablate.suite", "init"))?;
    let task = task_keys(&cfg, "reverse", 10)?;
    let model = model_keys(&cfg, &task)?;
    let mut ac = AblateConfig::new(suite, task.clone(), 2 * model.layers);
    ac.seeds = cfg
        .get_usize_list("ablate.seeds", &[1, 2, 3])?
        .into_iter()
        .map(|s| s as u64)
        .collect();
    ac.r = cfg.get_usize("side.r", ac.r)?;
    ac.lr = cfg.get_f64("train.lr", ac.lr)?;
    ac.steps = cfg.get_usize("train.steps", ac.steps)?;
    ac.batch = cfg.get_usize("train.batch", ac.batch)?;
    ac.eval_batches = cfg.get_usize("train.eval_batches", ac.eval_batches)?;
    ac.fisher_samples = cfg.get_usize("side.fisher_samples", ac.fisher_samples)?;
    ac.drop_n = cfg.get_usize_list("ablate.drop_n", &ac.drop_n)?;
    ac.r_values = cfg.get_usize_list("ablate.r_values", &ac.r_values)?;

    // A trunk pretrained on the transfer pairing's base task; default is
    // the cued mixture so both copy and reverse behaviors are present.
    let pre = if cfg.get_str("io.checkpoint", "").is_empty() {
        let base = TaskSpec::new(
            parse_task(&cfg.get_str("pretrain.task", "cued"))?,
            task.vocab,
            task.seq,
            cfg.get_u64("pretrain.seed", 4)?,
        );
        let mut pt = TrainConfig::new(MethodConfig::new(Method::Full), base);
        pt.lr = cfg.get_f64("pretrain.lr", 3e-3)?;
        pt.steps = cfg.get_usize("pretrain.steps", 400)?;
        pt.batch = ac.batch;
        pt.eval_batches = ac.eval_batches;
        sink.line("trunk=fresh-pretrained");
        let (store, res) = pretrain::<f32>(&model, &pt, &mut |_| {})?;
        sink.line(&format!("pretrain.final_loss={:.6}", res.last.loss));
        store
    } else {
        trunk(&cfg, &model, &mut sink)?
    };
    cfg.finish()?;

    let table = ablate(&pre, &model, &ac, &mut |l| sink.line(l))?;
    print!("{}", table.render());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Pretrain(r) => cmd_pretrain(r),
        Cmd::Finetune(r) => cmd_finetune(r),
        Cmd::MemoryReport(r) => cmd_memory_report(r),
        Cmd::GradCheck(r) => cmd_grad_check(r),
        Cmd::PruneInit(r) => cmd_prune_init(r),
        Cmd::Ablate(r) => cmd_ablate(r),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
