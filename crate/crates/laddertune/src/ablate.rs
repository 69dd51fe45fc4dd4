//! Ablation suites: seed-averaged comparison tables.
//!
//! Each suite turns one question into a row set: which side initialization
//! wins, whether the ladder earns its keep against shortcut wirings, how
//! dropping side layers trades against freezing backbone layers, and how
//! the reduction factor moves the accuracy/memory point. Every cell reports
//! mean and standard deviation over the seed list plus the measured
//! retained bytes and trainable-parameter count of its arm.

use crate::backbone::{ModelConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::memory::measure;
use crate::params::ParamStore;
use crate::petl::{Method, MethodConfig};
use crate::prune::{strategy_name, InitStrategy};
use crate::side::{interleaved_keep, SideConfig, SideMode};
use crate::task::{eval_stream, fisher_stream, sample_batch, TaskSpec};
use crate::train::{stand_up, train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Side-network initialization: random vs magnitude vs fisher pruning.
    Init,
    /// Wiring: standalone compression vs final-gate side-tuning vs ladder.
    Shortcuts,
    /// Side-layer dropping against freezing backbone prefixes.
    DropVsFreeze,
    /// Reduction-factor sweep of the full ladder.
    RSweep,
}

pub const ALL_SUITES: [Suite; 4] = [Suite::Init, Suite::Shortcuts, Suite::DropVsFreeze, Suite::RSweep];

pub fn suite_name(s: Suite) -> &'static str {
    match s {
        Suite::Init => "init",
        Suite::Shortcuts => "shortcuts",
        Suite::DropVsFreeze => "drop-vs-freeze",
        Suite::RSweep => "r-sweep",
    }
}

pub fn parse_suite(s: &str) -> Result<Suite> {
    ALL_SUITES
        .into_iter()
        .find(|&x| suite_name(x) == s)
        .ok_or_else(|| Error::Config(format!("unknown suite `{s}`")))
}

#[derive(Debug, Clone)]
pub struct AblateConfig {
    pub suite: Suite,
    /// Transfer target; arms fine-tune a shared pretrained trunk on it.
    pub task: TaskSpec,
    pub seeds: Vec<u64>,
    /// Reduction factor for side arms outside the r-sweep.
    pub r: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub eval_batches: usize,
    /// Single-row batches drawn for Fisher importance.
    pub fisher_samples: usize,
    /// Total dropped/frozen layer counts for the drop-vs-freeze suite.
    pub drop_n: Vec<usize>,
    /// Reduction factors for the r-sweep suite.
    pub r_values: Vec<usize>,
}

impl AblateConfig {
    pub fn new(suite: Suite, task: TaskSpec, total_layers: usize) -> Self {
        AblateConfig {
            suite,
            task,
            seeds: vec![1, 2, 3],
            r: 4,
            lr: 3e-3,
            steps: 300,
            batch: 8,
            eval_batches: 4,
            fisher_samples: 8,
            drop_n: vec![0, total_layers / 2, total_layers],
            r_values: vec![2, 4, 8],
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.task.validate_for(model)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".to_string()));
        }
        if self.suite == Suite::DropVsFreeze {
            if !model.is_enc_dec() {
                return Err(Error::Config(
                    "drop-vs-freeze splits drops across both stacks; use an encoder-decoder".to_string(),
                ));
            }
            if self.drop_n.iter().any(|n| n % 2 != 0) {
                return Err(Error::Config("drop-vs-freeze needs even layer counts".to_string()));
            }
        }
        if self.suite == Suite::RSweep && self.r_values.is_empty() {
            return Err(Error::Config("r-sweep needs at least one factor".to_string()));
        }
        Ok(())
    }
}

/// One arm of a suite: a method plus how its side network starts.
#[derive(Debug, Clone)]
struct Arm {
    name: String,
    method: MethodConfig,
    strategy: Option<InitStrategy>,
}

fn lst_arm(name: String, side: SideConfig, strategy: InitStrategy) -> Arm {
    Arm { name, method: MethodConfig::lst(side), strategy: Some(strategy) }
}

fn build_arms(model: &ModelConfig, cfg: &AblateConfig) -> Result<Vec<Arm>> {
    let mut arms = Vec::new();
    match cfg.suite {
        Suite::Init => {
            for strategy in [InitStrategy::Random, InitStrategy::Magnitude, InitStrategy::Fisher] {
                arms.push(lst_arm(
                    strategy_name(strategy).to_string(),
                    SideConfig::full(model, cfg.r),
                    strategy,
                ));
            }
        }
        Suite::Shortcuts => {
            for (name, mode) in [
                ("compression", SideMode::Compression),
                ("side-tuning", SideMode::SideTuning),
                ("lst", SideMode::Ladder),
            ] {
                let mut side = SideConfig::full(model, cfg.r);
                side.mode = mode;
                arms.push(lst_arm(name.to_string(), side, InitStrategy::Magnitude));
            }
        }
        Suite::DropVsFreeze => {
            let l = model.layers;
            for &n in &cfg.drop_n {
                let keep = interleaved_keep(l, l - n / 2)?;
                let side = SideConfig::full(model, cfg.r).drop_layers(keep.clone(), keep)?;
                arms.push(lst_arm(format!("lst.drop{n}"), side, InitStrategy::Magnitude));
                for method in [Method::Full, Method::Adapter] {
                    let mut mc = MethodConfig::new(method);
                    mc.freeze_prefix = n;
                    arms.push(Arm {
                        name: format!("{}.freeze{n}", crate::petl::method_name(method)),
                        method: mc,
                        strategy: None,
                    });
                }
            }
        }
        Suite::RSweep => {
            for &r in &cfg.r_values {
                arms.push(lst_arm(
                    format!("lst.r{r}"),
                    SideConfig::full(model, r),
                    InitStrategy::Magnitude,
                ));
            }
        }
    }
    Ok(arms)
}

fn prepare(
    pre: &ParamStore<f32>,
    model: &ModelConfig,
    arm: &Arm,
    fisher: &[TokenBatch],
    seed: u64,
) -> Result<ParamStore<f32>> {
    stand_up(pre, model, &arm.method, arm.strategy, fisher, seed)
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub arm: String,
    pub seeds: usize,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub mean_accuracy: f64,
    /// Tape-measured retained bytes for one training batch of this arm.
    pub retained_bytes: u64,
    pub trainable: usize,
}

#[derive(Debug, Clone)]
pub struct AblateTable {
    pub suite: Suite,
    pub cells: Vec<Cell>,
}

impl AblateTable {
    pub fn cell(&self, arm: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.arm == arm)
    }

    /// Machine-readable `key=value` lines, one per cell.
    pub fn machine_lines(&self) -> Vec<String> {
        self.cells
            .iter()
            .map(|c| {
                format!(
                    "suite={} arm={} seeds={} loss.mean={:.6} loss.std={:.6} acc.mean={:.4} retained={} trainable={}",
                    suite_name(self.suite),
                    c.arm,
                    c.seeds,
                    c.mean_loss,
                    c.std_loss,
                    c.mean_accuracy,
                    c.retained_bytes,
                    c.trainable
                )
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("suite: {}\n", suite_name(self.suite));
        out.push_str(&format!(
            "{:<18} {:>5} {:>12} {:>10} {:>8} {:>12} {:>10}\n",
            "arm", "seeds", "loss", "std", "acc", "retained", "trainable"
        ));
        for c in &self.cells {
            out.push_str(&format!(
                "{:<18} {:>5} {:>12.6} {:>10.6} {:>8.4} {:>12} {:>10}\n",
                c.arm, c.seeds, c.mean_loss, c.std_loss, c.mean_accuracy, c.retained_bytes, c.trainable
            ));
        }
        out
    }
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run one suite against a pretrained trunk. Per-seed results stream
/// through `sink`; the aggregated table comes back.
pub fn ablate(
    pre: &ParamStore<f32>,
    model: &ModelConfig,
    cfg: &AblateConfig,
    sink: &mut dyn FnMut(&str),
) -> Result<AblateTable> {
    cfg.validate(model)?;
    let arms = build_arms(model, cfg)?;
    let fisher: Vec<TokenBatch> = (0..cfg.fisher_samples)
        .map(|k| sample_batch(&cfg.task, 1, fisher_stream(k as u64)))
        .collect::<Result<_>>()?;
    let probe = sample_batch(&cfg.task, cfg.batch, eval_stream(0))?;

    let mut cells = Vec::new();
    for arm in &arms {
        let mut losses = Vec::new();
        let mut accs = Vec::new();
        let mut retained = 0u64;
        let mut trainable = 0usize;
        for (s, &seed) in cfg.seeds.iter().enumerate() {
            let mut store = prepare(pre, model, arm, &fisher, seed)?;
            if s == 0 {
                retained = measure(&store, model, &arm.method, &probe)?.retained_bytes();
                trainable = store.trainable_params();
            }
            let mut tc = TrainConfig::new(arm.method.clone(), cfg.task.clone());
            tc.task.seed = cfg.task.seed.wrapping_add(seed);
            tc.lr = cfg.lr;
            tc.steps = cfg.steps;
            tc.batch = cfg.batch;
            tc.eval_batches = cfg.eval_batches;
            let res = train(&mut store, model, &tc, &mut |_| {})?;
            sink(&format!(
                "suite={} arm={} seed={seed} loss={:.6} acc={:.4}",
                suite_name(cfg.suite),
                arm.name,
                res.last.loss,
                res.last.accuracy
            ));
            losses.push(res.last.loss);
            accs.push(res.last.accuracy);
        }
        let (mean_loss, std_loss) = mean_std(&losses);
        let (mean_accuracy, _) = mean_std(&accs);
        cells.push(Cell {
            arm: arm.name.clone(),
            seeds: cfg.seeds.len(),
            mean_loss,
            std_loss,
            mean_accuracy,
            retained_bytes: retained,
            trainable,
        });
    }
    let table = AblateTable { suite: cfg.suite, cells };
    for line in table.machine_lines() {
        sink(&line);
    }
    Ok(table)
}
