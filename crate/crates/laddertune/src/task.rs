//! Synthetic tasks with deterministic sample streams.
//!
//! Sequence-to-sequence tasks carry a fixed lead token in front of a random
//! payload; the `cued` mixture instead leads with a mode cue (copy or
//! reverse) so a backbone pretrained on it holds both behaviors and small
//! tuning methods can steer between them. Encoder-only tasks (parity,
//! char-lm) score every position of a causal encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Arch, ModelConfig, TokenBatch};
use crate::error::{Error, Result};

pub const CUE_COPY: u32 = 0;
pub const CUE_REVERSE: u32 = 1;
pub const LEAD_COPY: u32 = 2;
pub const LEAD_REVERSE: u32 = 3;
pub const BOS: u32 = 4;
/// First token id usable as payload; everything below is reserved.
pub const PAYLOAD_BASE: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
    Parity,
    CharLm,
    /// Copy/reverse mixture selected by the first source token.
    Cued,
}

pub const ALL_TASKS: [Task; 5] = [Task::Copy, Task::Reverse, Task::Parity, Task::CharLm, Task::Cued];

pub fn task_name(t: Task) -> &'static str {
    match t {
        Task::Copy => "copy",
        Task::Reverse => "reverse",
        Task::Parity => "parity",
        Task::CharLm => "char-lm",
        Task::Cued => "cued",
    }
}

pub fn parse_task(s: &str) -> Result<Task> {
    ALL_TASKS
        .into_iter()
        .find(|&t| task_name(t) == s)
        .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
}

/// Whether the task drives an encoder-decoder (vs a causal encoder).
pub fn is_seq2seq(t: Task) -> bool {
    matches!(t, Task::Copy | Task::Reverse | Task::Cued)
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task: Task,
    pub vocab: usize,
    /// Source length, lead/cue token included for seq2seq tasks.
    pub seq: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(task: Task, vocab: usize, seq: usize, seed: u64) -> Self {
        TaskSpec { task, vocab, seq, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab <= PAYLOAD_BASE as usize + 1 {
            return Err(Error::Config(format!(
                "vocab {} leaves no payload symbols above the {} reserved ids",
                self.vocab,
                PAYLOAD_BASE + 1
            )));
        }
        let min_seq = if is_seq2seq(self.task) { 2 } else { 1 };
        if self.seq < min_seq {
            return Err(Error::Config(format!(
                "sequence length {} too short for {}",
                self.seq,
                task_name(self.task)
            )));
        }
        Ok(())
    }

    /// Check the spec drives this model and fits inside it.
    pub fn validate_for(&self, model: &ModelConfig) -> Result<()> {
        self.validate()?;
        if self.vocab > model.vocab {
            return Err(Error::Config(format!(
                "task vocab {} exceeds model vocab {}",
                self.vocab, model.vocab
            )));
        }
        if self.seq > model.max_seq {
            return Err(Error::Config(format!(
                "task sequence {} exceeds model max {}",
                self.seq, model.max_seq
            )));
        }
        let needs = is_seq2seq(self.task);
        if needs != model.is_enc_dec() {
            return Err(Error::Config(format!(
                "task {} needs {}, model is {}",
                task_name(self.task),
                if needs { "an encoder-decoder" } else { "an encoder" },
                if model.is_enc_dec() { "an encoder-decoder" } else { "an encoder" }
            )));
        }
        if !needs && !model.causal_encoder {
            return Err(Error::Config(format!(
                "task {} needs a causal encoder",
                task_name(self.task)
            )));
        }
        Ok(())
    }

    /// The model family a task trains out of the box.
    pub fn model_for(&self, layers: usize, d_model: usize, heads: usize, d_ff: usize, max_seq: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            layers,
            d_model,
            heads,
            d_ff,
            vocab: self.vocab,
            max_seq,
            arch: if is_seq2seq(self.task) { Arch::EncoderDecoder } else { Arch::Encoder },
            causal_encoder: !is_seq2seq(self.task),
            seed,
        }
    }
}

fn payload(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(PAYLOAD_BASE..vocab as u32)).collect()
}

/// One deterministic batch. Streams with distinct `stream` values are
/// independent; the same (spec, batch, stream) triple always reproduces the
/// same tokens, so training steps and eval sets never collide.
pub fn sample_batch(spec: &TaskSpec, batch: usize, stream: u64) -> Result<TokenBatch> {
    spec.validate()?;
    if batch == 0 {
        return Err(Error::Input("batch must be positive".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut src = Vec::with_capacity(batch * spec.seq);
    let mut dec = Vec::new();
    let mut targets = Vec::new();
    let (src_len, tgt_len);

    if is_seq2seq(spec.task) {
        let n = spec.seq - 1;
        src_len = spec.seq;
        tgt_len = n;
        for _ in 0..batch {
            let pay = payload(&mut rng, spec.vocab, n);
            let (lead, reverse) = match spec.task {
                Task::Copy => (LEAD_COPY, false),
                Task::Reverse => (LEAD_REVERSE, true),
                Task::Cued => {
                    let flip: bool = rng.gen();
                    (if flip { CUE_REVERSE } else { CUE_COPY }, flip)
                }
                _ => unreachable!(),
            };
            let mut tgt = pay.clone();
            if reverse {
                tgt.reverse();
            }
            src.push(lead);
            src.extend_from_slice(&pay);
            dec.push(BOS);
            dec.extend_from_slice(&tgt[..n - 1]);
            targets.extend_from_slice(&tgt);
        }
        return Ok(TokenBatch {
            batch,
            src_len,
            src,
            tgt_len,
            dec: Some(dec),
            targets,
        });
    }

    src_len = spec.seq;
    tgt_len = spec.seq;
    for _ in 0..batch {
        match spec.task {
            Task::Parity => {
                // Running parity of odd-offset payload tokens, scored at
                // every position with class tokens 0/1.
                let pay = payload(&mut rng, spec.vocab, spec.seq);
                let mut parity = 0u32;
                for &tok in &pay {
                    if (tok - PAYLOAD_BASE) % 2 == 1 {
                        parity ^= 1;
                    }
                    targets.push(parity);
                }
                src.extend_from_slice(&pay);
            }
            Task::CharLm => {
                // Cyclic motif text: next-token prediction is learnable
                // once the period is discovered.
                let period = rng.gen_range(2..=4usize);
                let motif = payload(&mut rng, spec.vocab, period);
                for t in 0..spec.seq {
                    src.push(motif[t % period]);
                    targets.push(motif[(t + 1) % period]);
                }
            }
            _ => unreachable!(),
        }
    }
    Ok(TokenBatch {
        batch,
        src_len,
        src,
        tgt_len,
        dec: None,
        targets,
    })
}

/// Stream id for eval batches, far from any training step index.
pub fn eval_stream(k: u64) -> u64 {
    (1 << 40) + k
}

/// Stream id for Fisher-information samples, disjoint from both training
/// steps and eval batches.
pub fn fisher_stream(k: u64) -> u64 {
    (1 << 41) + k
}
