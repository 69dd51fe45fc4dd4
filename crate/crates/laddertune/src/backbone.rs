//! The trunk transformer: pre-layer-norm blocks, learned absolute positions,
//! biases on every linear map, weight-tied LM head. Encoder-only or
//! encoder-decoder. Forward exposes per-layer taps for ladder consumption
//! and optionally routes through inserted modules (adapters, LoRA deltas,
//! prompt block) when their parameters are present on the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{ParamStore, VarMap};
use crate::tape::{Elem, Owner, Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Encoder,
    EncoderDecoder,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Transformer layers per stack.
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// Positional-table capacity; sequences must fit.
    pub max_seq: usize,
    pub arch: Arch,
    /// Causal self-attention in the encoder (LM-style tasks).
    pub causal_encoder: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: L=6 per stack, d=64, H=4, d_ff=128, V=32, S=24.
    pub fn toy() -> Self {
        ModelConfig {
            layers: 6,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            vocab: 32,
            max_seq: 24,
            arch: Arch::EncoderDecoder,
            causal_encoder: false,
            seed: 7,
        }
    }

    /// Smallest config that exercises every code path; used by float64
    /// gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab: 16,
            max_seq: 5,
            arch: Arch::EncoderDecoder,
            causal_encoder: false,
            seed: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("model.layers must be at least 1".to_string()));
        }
        if self.vocab < 2 {
            return Err(Error::Config("model.vocab must be at least 2".to_string()));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return Err(Error::Config("model dims must be positive".to_string()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn is_enc_dec(&self) -> bool {
        self.arch == Arch::EncoderDecoder
    }
}

/// Per-layer activations exposed for ladder connections. Index 0 is the
/// post-embedding hidden state; index i is the output of layer i.
pub struct Taps {
    pub enc: Vec<Var>,
    pub dec: Vec<Var>,
}

/// Which inserted-module families the forward pass should look for on the
/// tape. Individual layers may still lack them (e.g. frozen prefix removed
/// theirs); absence is skipped silently per layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct Inserts {
    pub adapter: bool,
    pub lora: bool,
    /// Prompt length prepended at the encoder embedding interface.
    pub prompt: Option<usize>,
}

pub(crate) fn var(vars: &VarMap, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Wiring(format!("parameter `{name}` not registered on tape")))
}

pub(crate) fn normal_tensor<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<E> {
    let dist = Normal::new(0.0, std).expect("std is finite");
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n).map(|_| E::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches buffer")
}

fn zeros<E: Elem>(shape: &[usize]) -> Tensor<E> {
    Tensor::zeros(shape.to_vec())
}

fn ones<E: Elem>(shape: &[usize]) -> Tensor<E> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![E::one(); n]).expect("shape matches buffer")
}

/// Add one linear layer (`{prefix}.w` of `[d_out, d_in]`, `{prefix}.b`) to a
/// store. Weights are scaled-normal with std 1/sqrt(d_in); biases zero.
pub(crate) fn init_linear<E: Elem>(
    store: &mut ParamStore<E>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_out: usize,
    d_in: usize,
    owner: Owner,
) -> Result<()> {
    let std = 1.0 / (d_in as f64).sqrt();
    store.insert(&format!("{prefix}.w"), normal_tensor(rng, &[d_out, d_in], std), true, owner)?;
    store.insert(&format!("{prefix}.b"), zeros(&[d_out]), true, owner)?;
    Ok(())
}

pub(crate) fn init_layer_norm<E: Elem>(
    store: &mut ParamStore<E>,
    prefix: &str,
    dim: usize,
    owner: Owner,
) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), ones(&[dim]), true, owner)?;
    store.insert(&format!("{prefix}.beta"), zeros(&[dim]), true, owner)?;
    Ok(())
}

fn init_attn<E: Elem>(
    store: &mut ParamStore<E>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
    owner: Owner,
) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.{proj}"), dim, dim, owner)?;
    }
    Ok(())
}

fn init_ffn<E: Elem>(
    store: &mut ParamStore<E>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
    d_ff: usize,
    owner: Owner,
) -> Result<()> {
    init_linear(store, rng, &format!("{prefix}.fc1"), d_ff, dim, owner)?;
    init_linear(store, rng, &format!("{prefix}.fc2"), dim, d_ff, owner)?;
    Ok(())
}

/// Initialize one stack's transformer layers under `base` (`backbone.enc`,
/// `side.dec`, ...) at the given width. Shared by backbone and side.
pub(crate) fn init_stack<E: Elem>(
    store: &mut ParamStore<E>,
    rng: &mut ChaCha8Rng,
    base: &str,
    layer_ids: &[usize],
    dim: usize,
    d_ff: usize,
    cross: bool,
    owner: Owner,
) -> Result<()> {
    for &i in layer_ids {
        let lp = format!("{base}.{i}");
        init_layer_norm(store, &format!("{lp}.ln1"), dim, owner)?;
        init_attn(store, rng, &format!("{lp}.{}", if cross { "self" } else { "attn" }), dim, owner)?;
        if cross {
            init_layer_norm(store, &format!("{lp}.ln_cross"), dim, owner)?;
            init_attn(store, rng, &format!("{lp}.cross"), dim, owner)?;
        }
        init_layer_norm(store, &format!("{lp}.ln2"), dim, owner)?;
        init_ffn(store, rng, &format!("{lp}.ffn"), dim, d_ff, owner)?;
    }
    init_layer_norm(store, &format!("{base}.final_ln"), dim, owner)?;
    Ok(())
}

/// Deterministic backbone initialization. Everything starts trainable; the
/// method layer decides what to freeze.
pub fn init_backbone<E: Elem>(cfg: &ModelConfig) -> Result<ParamStore<E>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    let emb_std = 1.0 / (d as f64).sqrt();
    store.insert(
        "backbone.embedding",
        normal_tensor(&mut rng, &[cfg.vocab, d], emb_std),
        true,
        Owner::Backbone,
    )?;
    store.insert(
        "backbone.pos_enc",
        normal_tensor(&mut rng, &[cfg.max_seq, d], emb_std),
        true,
        Owner::Backbone,
    )?;
    if cfg.is_enc_dec() {
        store.insert(
            "backbone.pos_dec",
            normal_tensor(&mut rng, &[cfg.max_seq, d], emb_std),
            true,
            Owner::Backbone,
        )?;
    }
    let layer_ids: Vec<usize> = (1..=cfg.layers).collect();
    init_stack(&mut store, &mut rng, "backbone.enc", &layer_ids, d, cfg.d_ff, false, Owner::Backbone)?;
    if cfg.is_enc_dec() {
        init_stack(&mut store, &mut rng, "backbone.dec", &layer_ids, d, cfg.d_ff, true, Owner::Backbone)?;
    }
    Ok(store)
}

/// `y = x W^T + b` with `{prefix}.w` `[d_out, d_in]`; `x` is `[.., d_in]`.
pub(crate) fn linear<E: Elem>(tape: &mut Tape<E>, vars: &VarMap, prefix: &str, x: Var) -> Result<Var> {
    let w = var(vars, &format!("{prefix}.w"))?;
    let b = var(vars, &format!("{prefix}.b"))?;
    let shape = tape.shape(x).to_vec();
    let d_in = *shape.last().ok_or_else(|| Error::Shape {
        op: "linear",
        detail: "input is 0-d".to_string(),
    })?;
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let x2 = tape.reshape(x, &[rows, d_in])?;
    let y2 = tape.matmul(x2, w, true)?;
    let y2 = tape.add_bias(y2, b)?;
    let d_out = tape.shape(y2)[1];
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty") = d_out;
    tape.reshape(y2, &out_shape)
}

pub(crate) fn layer_norm<E: Elem>(tape: &mut Tape<E>, vars: &VarMap, prefix: &str, x: Var) -> Result<Var> {
    let g = var(vars, &format!("{prefix}.gamma"))?;
    let b = var(vars, &format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Multi-head attention. `prefix` holds q/k/v/o linears; queries come from
/// `xq`, keys and values from `xkv`. When `lora_prefix` names parameters
/// present on the tape, low-rank deltas are added to the query and value
/// projections under the Inserted scope.
pub(crate) fn attention<E: Elem>(
    tape: &mut Tape<E>,
    vars: &VarMap,
    prefix: &str,
    xq: Var,
    xkv: Var,
    heads: usize,
    causal: bool,
    lora_prefix: Option<&str>,
) -> Result<Var> {
    let d = *tape.shape(xq).last().expect("attention input has a width");
    if d % heads != 0 {
        return Err(Error::Wiring(format!(
            "attention width {d} not divisible by {heads} heads at `{prefix}`"
        )));
    }
    let head_dim = d / heads;
    let mut q = linear(tape, vars, &format!("{prefix}.q"), xq)?;
    let k = linear(tape, vars, &format!("{prefix}.k"), xkv)?;
    let mut v = linear(tape, vars, &format!("{prefix}.v"), xkv)?;
    if let Some(lp) = lora_prefix {
        if vars.contains_key(&format!("{lp}.lora_q.a")) {
            let prev = tape.set_scope(Owner::Inserted);
            q = lora_delta(tape, vars, &format!("{lp}.lora_q"), xq, q)?;
            v = lora_delta(tape, vars, &format!("{lp}.lora_v"), xkv, v)?;
            tape.set_scope(prev);
        }
    }
    let qh = tape.split_heads(q, heads)?;
    let kh = tape.split_heads(k, heads)?;
    let vh = tape.split_heads(v, heads)?;
    let scores = tape.bmm(qh, kh, true)?;
    let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
    let scores = if causal { tape.causal_mask(scores)? } else { scores };
    let probs = tape.softmax(scores)?;
    let ctx = tape.bmm(probs, vh, false)?;
    let merged = tape.merge_heads(ctx, heads)?;
    linear(tape, vars, &format!("{prefix}.o"), merged)
}

/// `y + (x A^T) B^T` with `A [k, d_in]`, `B [d_out, k]`, B zero-initialized.
fn lora_delta<E: Elem>(tape: &mut Tape<E>, vars: &VarMap, prefix: &str, x: Var, y: Var) -> Result<Var> {
    let a = var(vars, &format!("{prefix}.a"))?;
    let b = var(vars, &format!("{prefix}.b"))?;
    let shape = tape.shape(x).to_vec();
    let d_in = *shape.last().expect("lora input has a width");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let x2 = tape.reshape(x, &[rows, d_in])?;
    let mid = tape.matmul(x2, a, true)?;
    let delta2 = tape.matmul(mid, b, true)?;
    let d_out = tape.shape(delta2)[1];
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty") = d_out;
    let delta = tape.reshape(delta2, &out_shape)?;
    tape.add(y, delta)
}

/// Bottleneck adapter with internal residual: `x + up(relu(down(x)))`.
fn adapter<E: Elem>(tape: &mut Tape<E>, vars: &VarMap, prefix: &str, x: Var) -> Result<Var> {
    let prev = tape.set_scope(Owner::Inserted);
    let h = linear(tape, vars, &format!("{prefix}.down"), x)?;
    let h = tape.relu(h)?;
    let h = linear(tape, vars, &format!("{prefix}.up"), h)?;
    let out = tape.add(x, h)?;
    tape.set_scope(prev);
    Ok(out)
}

fn maybe_adapter<E: Elem>(
    tape: &mut Tape<E>,
    vars: &VarMap,
    enabled: bool,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    if enabled && vars.contains_key(&format!("{prefix}.down.w")) {
        adapter(tape, vars, prefix, x)
    } else {
        Ok(x)
    }
}

/// One pre-LN transformer block. `base` holds the block's own parameters;
/// `insert_base` is where this layer's adapters/LoRA would live. `cross`
/// supplies encoder memory for a decoder block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block<E: Elem>(
    tape: &mut Tape<E>,
    vars: &VarMap,
    base: &str,
    insert_base: Option<&str>,
    heads: usize,
    causal: bool,
    cross: Option<Var>,
    inserts: Inserts,
    x: Var,
) -> Result<Var> {
    let self_name = if cross.is_some() { "self" } else { "attn" };
    let lora_self = insert_base
        .filter(|_| inserts.lora)
        .map(|ib| format!("{ib}.{self_name}"));
    let xn = layer_norm(tape, vars, &format!("{base}.ln1"), x)?;
    let mut a = attention(
        tape,
        vars,
        &format!("{base}.{self_name}"),
        xn,
        xn,
        heads,
        causal,
        lora_self.as_deref(),
    )?;
    if let Some(ib) = insert_base {
        a = maybe_adapter(tape, vars, inserts.adapter, &format!("{ib}.{self_name}_adapter"), a)?;
    }
    let mut h = tape.add(x, a)?;
    if let Some(mem) = cross {
        let lora_cross = insert_base
            .filter(|_| inserts.lora)
            .map(|ib| format!("{ib}.cross"));
        let hn = layer_norm(tape, vars, &format!("{base}.ln_cross"), h)?;
        let mut c = attention(
            tape,
            vars,
            &format!("{base}.cross"),
            hn,
            mem,
            heads,
            false,
            lora_cross.as_deref(),
        )?;
        if let Some(ib) = insert_base {
            c = maybe_adapter(tape, vars, inserts.adapter, &format!("{ib}.cross_adapter"), c)?;
        }
        h = tape.add(h, c)?;
    }
    let hn = layer_norm(tape, vars, &format!("{base}.ln2"), h)?;
    let f1 = linear(tape, vars, &format!("{base}.ffn.fc1"), hn)?;
    let f1 = tape.gelu(f1)?;
    let mut f = linear(tape, vars, &format!("{base}.ffn.fc2"), f1)?;
    if let Some(ib) = insert_base {
        f = maybe_adapter(tape, vars, inserts.adapter, &format!("{ib}.ffn_adapter"), f)?;
    }
    tape.add(h, f)
}

/// Tied LM head: logits = h Emb^T, recorded under the Head scope.
pub(crate) fn lm_head<E: Elem>(tape: &mut Tape<E>, vars: &VarMap, h: Var) -> Result<Var> {
    let emb = var(vars, "backbone.embedding")?;
    let prev = tape.set_scope(Owner::Head);
    let shape = tape.shape(h).to_vec();
    let d = *shape.last().expect("head input has a width");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let h2 = tape.reshape(h, &[rows, d])?;
    let logits2 = tape.matmul(h2, emb, true)?;
    let vocab = tape.shape(logits2)[1];
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty") = vocab;
    let logits = tape.reshape(logits2, &out_shape)?;
    tape.set_scope(prev);
    Ok(logits)
}

/// Embed tokens, add positions, optionally prepend the prompt block.
/// Prompt vectors carry no positional term and token positions are not
/// shifted, so pretrained positional alignment survives prepending.
pub(crate) fn embed_stack<E: Elem>(
    tape: &mut Tape<E>,
    vars: &VarMap,
    cfg: &ModelConfig,
    pos_name: &str,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    prompt: Option<usize>,
) -> Result<Var> {
    if tokens.len() != batch * seq {
        return Err(Error::Shape {
            op: "embed",
            detail: format!("{} tokens for batch {batch} x seq {seq}", tokens.len()),
        });
    }
    if seq > cfg.max_seq {
        return Err(Error::Input(format!(
            "sequence length {seq} exceeds positional capacity {}",
            cfg.max_seq
        )));
    }
    let emb = var(vars, "backbone.embedding")?;
    let pos = var(vars, pos_name)?;
    let x = tape.embedding(emb, tokens, &[batch, seq])?;
    let pos_rows = tape.slice(pos, 0, 0, seq)?;
    let mut x = tape.add_rows(x, pos_rows)?;
    if let Some(p) = prompt {
        let pv = var(vars, "prompt.vectors")?;
        let prev = tape.set_scope(Owner::Inserted);
        let block = tape.broadcast_rows(pv, batch)?;
        let cat = tape.concat(block, x, 1)?;
        tape.set_scope(prev);
        debug_assert_eq!(tape.shape(cat)[1], p + seq);
        x = cat;
    }
    Ok(x)
}

/// Input batch for a forward pass. Encoder-only tasks leave `dec` empty and
/// are scored per source position; seq2seq tasks score decoder positions.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub batch: usize,
    pub src_len: usize,
    pub src: Vec<u32>,
    pub tgt_len: usize,
    /// Teacher-forced decoder input, `batch * tgt_len`, encoder-decoder only.
    pub dec: Option<Vec<u32>>,
    pub targets: Vec<u32>,
}

/// Everything the trunk produces in one pass: per-position logits, the
/// final pre-head hidden state (what a single-gate fusion taps), and the
/// per-layer taps of both stacks.
pub struct BackboneOut {
    pub logits: Var,
    pub final_hidden: Var,
    pub taps: Taps,
}

/// Run the trunk. In LST mode the returned logits are unused (the side
/// network produces its own through the shared head).
pub fn backbone_forward<E: Elem>(
    tape: &mut Tape<E>,
    vars: &VarMap,
    cfg: &ModelConfig,
    batch: &TokenBatch,
    inserts: Inserts,
) -> Result<BackboneOut> {
    cfg.validate()?;
    let prev_scope = tape.set_scope(Owner::Backbone);
    let x = embed_stack(
        tape,
        vars,
        cfg,
        "backbone.pos_enc",
        &batch.src,
        batch.batch,
        batch.src_len,
        inserts.prompt,
    )?;
    let mut enc_taps = vec![x];
    let mut h = x;
    for i in 1..=cfg.layers {
        let base = format!("backbone.enc.{i}");
        let ib = format!("insert.enc.{i}");
        h = block(
            tape,
            vars,
            &base,
            Some(&ib),
            cfg.heads,
            cfg.causal_encoder,
            None,
            inserts,
            h,
        )?;
        enc_taps.push(h);
    }
    let memory = layer_norm(tape, vars, "backbone.enc.final_ln", h)?;

    if !cfg.is_enc_dec() {
        let scored = match inserts.prompt {
            Some(p) => tape.slice(memory, 1, p, batch.src_len)?,
            None => memory,
        };
        let logits = lm_head(tape, vars, scored)?;
        tape.set_scope(prev_scope);
        return Ok(BackboneOut {
            logits,
            final_hidden: scored,
            taps: Taps {
                enc: enc_taps,
                dec: Vec::new(),
            },
        });
    }

    let dec_tokens = batch
        .dec
        .as_ref()
        .ok_or_else(|| Error::Input("encoder-decoder forward needs decoder tokens".to_string()))?;
    let xd = embed_stack(
        tape,
        vars,
        cfg,
        "backbone.pos_dec",
        dec_tokens,
        batch.batch,
        batch.tgt_len,
        None,
    )?;
    let mut dec_taps = vec![xd];
    let mut hd = xd;
    for i in 1..=cfg.layers {
        let base = format!("backbone.dec.{i}");
        let ib = format!("insert.dec.{i}");
        hd = block(
            tape,
            vars,
            &base,
            Some(&ib),
            cfg.heads,
            true,
            Some(memory),
            inserts,
            hd,
        )?;
        dec_taps.push(hd);
    }
    let hd = layer_norm(tape, vars, "backbone.dec.final_ln", hd)?;
    let logits = lm_head(tape, vars, hd)?;
    tape.set_scope(prev_scope);
    Ok(BackboneOut {
        logits,
        final_hidden: hd,
        taps: Taps {
            enc: enc_taps,
            dec: dec_taps,
        },
    })
}

/// Run a bare chain of pre-LN blocks (`{base}.{i}` for each id, then
/// `{base}.final_ln`) on an input already at the chain's width. Pruning
/// identity checks run the backbone chain and the side chain side by side.
pub fn chain_forward<E: Elem>(
    tape: &mut Tape<E>,
    vars: &VarMap,
    base: &str,
    layer_ids: &[usize],
    heads: usize,
    causal: bool,
    cross: Option<Var>,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for &i in layer_ids {
        h = block(
            tape,
            vars,
            &format!("{base}.{i}"),
            None,
            heads,
            causal,
            cross,
            Inserts::default(),
            h,
        )?;
    }
    layer_norm(tape, vars, &format!("{base}.final_ln"), h)
}
