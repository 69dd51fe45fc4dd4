//! Comparison methods sharing one trunk: full fine-tuning, bottleneck
//! adapters, LoRA, BitFit, prompt tuning, and the ladder side network. All
//! run on the same tape and parameter store so trainable-set and
//! retained-byte comparisons are apples-to-apples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    backbone_forward, normal_tensor, BackboneOut, Inserts, ModelConfig, TokenBatch,
};
use crate::error::{Error, Result};
use crate::params::{ParamStore, VarMap};
use crate::side::{init_side, side_ladder_forward, side_standalone_forward, SideConfig, SideMode};
use crate::tape::{Elem, Owner, Tape, Var};
use crate::tensor::Tensor;

/// Tuning method under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Full,
    Adapter,
    Lora,
    Bitfit,
    Prompt,
    Lst,
}

pub const ALL_METHODS: [Method; 6] = [
    Method::Full,
    Method::Adapter,
    Method::Lora,
    Method::Bitfit,
    Method::Prompt,
    Method::Lst,
];

pub fn method_name(m: Method) -> &'static str {
    match m {
        Method::Full => "full",
        Method::Adapter => "adapter",
        Method::Lora => "lora",
        Method::Bitfit => "bitfit",
        Method::Prompt => "prompt",
        Method::Lst => "lst",
    }
}

pub fn parse_method(s: &str) -> Result<Method> {
    ALL_METHODS
        .into_iter()
        .find(|&m| method_name(m) == s)
        .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
}

/// One method plus its hyperparameters. `freeze_prefix` freezes the first N
/// backbone layers (encoder first, then decoder) and removes their inserted
/// modules, for depth-freezing comparisons.
#[derive(Debug, Clone)]
pub struct MethodConfig {
    pub method: Method,
    pub adapter_h: usize,
    pub lora_k: usize,
    pub prompt_len: usize,
    pub side: Option<SideConfig>,
    pub freeze_prefix: usize,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        MethodConfig {
            method,
            adapter_h: 4,
            lora_k: 4,
            prompt_len: 4,
            side: None,
            freeze_prefix: 0,
        }
    }

    pub fn lst(side: SideConfig) -> Self {
        let mut cfg = MethodConfig::new(Method::Lst);
        cfg.side = Some(side);
        cfg
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        model.validate()?;
        match self.method {
            Method::Adapter => {
                if self.adapter_h == 0 {
                    return Err(Error::Config("adapter hidden dim must be positive".to_string()));
                }
            }
            Method::Lora => {
                if self.lora_k == 0 || self.lora_k > model.d_model {
                    return Err(Error::Config(format!(
                        "lora rank {} outside 1..={}",
                        self.lora_k, model.d_model
                    )));
                }
            }
            Method::Prompt => {
                if self.prompt_len == 0 {
                    return Err(Error::Config("prompt length must be positive".to_string()));
                }
                if self.prompt_len >= model.max_seq {
                    return Err(Error::Config(format!(
                        "prompt length {} must stay below max sequence {}",
                        self.prompt_len, model.max_seq
                    )));
                }
                if self.prompt_len > model.vocab {
                    return Err(Error::Config(format!(
                        "prompt length {} exceeds the {} embedding rows that seed it",
                        self.prompt_len, model.vocab
                    )));
                }
            }
            Method::Lst => match &self.side {
                Some(side) => side.validate(model)?,
                None => {
                    return Err(Error::Config("lst method needs a side config".to_string()))
                }
            },
            Method::Full | Method::Bitfit => {}
        }
        let total = total_layers(model);
        if self.freeze_prefix > total {
            return Err(Error::Config(format!(
                "freeze prefix {} exceeds {total} layers",
                self.freeze_prefix
            )));
        }
        Ok(())
    }

    /// Insert-family flags the forward pass should honor for this method.
    pub fn inserts(&self) -> Inserts {
        Inserts {
            adapter: self.method == Method::Adapter,
            lora: self.method == Method::Lora,
            prompt: (self.method == Method::Prompt).then_some(self.prompt_len),
        }
    }
}

fn total_layers(model: &ModelConfig) -> usize {
    if model.is_enc_dec() {
        2 * model.layers
    } else {
        model.layers
    }
}

/// (insert base, attention site name) pairs, encoder first.
fn attention_sites(model: &ModelConfig) -> Vec<(String, &'static str)> {
    let mut sites = Vec::new();
    for i in 1..=model.layers {
        sites.push((format!("insert.enc.{i}"), "attn"));
    }
    if model.is_enc_dec() {
        for i in 1..=model.layers {
            sites.push((format!("insert.dec.{i}"), "self"));
            sites.push((format!("insert.dec.{i}"), "cross"));
        }
    }
    sites
}

/// (insert base,) per layer, encoder first: where an FFN adapter hangs.
fn layer_bases(model: &ModelConfig) -> Vec<String> {
    let mut bases: Vec<String> = (1..=model.layers).map(|i| format!("insert.enc.{i}")).collect();
    if model.is_enc_dec() {
        bases.extend((1..=model.layers).map(|i| format!("insert.dec.{i}")));
    }
    bases
}

fn init_adapter_site<E: Elem>(
    store: &mut ParamStore<E>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    h: usize,
) -> Result<()> {
    let std = 1.0 / (d as f64).sqrt();
    store.insert(
        &format!("{prefix}.down.w"),
        normal_tensor(rng, &[h, d], std),
        true,
        Owner::Inserted,
    )?;
    store.insert(&format!("{prefix}.down.b"), Tensor::zeros(vec![h]), true, Owner::Inserted)?;
    store.insert(&format!("{prefix}.up.w"), Tensor::zeros(vec![d, h]), true, Owner::Inserted)?;
    store.insert(&format!("{prefix}.up.b"), Tensor::zeros(vec![d]), true, Owner::Inserted)?;
    Ok(())
}

fn init_lora_site<E: Elem>(
    store: &mut ParamStore<E>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    k: usize,
) -> Result<()> {
    let std = 1.0 / (d as f64).sqrt();
    for proj in ["lora_q", "lora_v"] {
        store.insert(
            &format!("{prefix}.{proj}.a"),
            normal_tensor(rng, &[k, d], std),
            true,
            Owner::Inserted,
        )?;
        store.insert(
            &format!("{prefix}.{proj}.b"),
            Tensor::zeros(vec![d, k]),
            true,
            Owner::Inserted,
        )?;
    }
    Ok(())
}

/// Mark the method's trainable set and create its inserted parameters.
/// Expects a store holding exactly an initialized backbone; reapplication
/// is rejected rather than merged.
pub fn apply_method<E: Elem>(
    store: &mut ParamStore<E>,
    model: &ModelConfig,
    cfg: &MethodConfig,
    seed: u64,
) -> Result<()> {
    cfg.validate(model)?;
    if !store.contains("backbone.embedding") {
        return Err(Error::Wiring("store has no backbone to tune".to_string()));
    }
    if store.names().any(|n| {
        n.starts_with("insert.") || n.starts_with("side.") || n.starts_with("prompt.")
    }) {
        return Err(Error::Wiring("a method was already applied to this store".to_string()));
    }
    store.freeze_all();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match cfg.method {
        Method::Full => {
            store.set_trainable_where(|n| n.starts_with("backbone."), true);
        }
        Method::Adapter => {
            for (base, site) in attention_sites(model) {
                init_adapter_site(
                    store,
                    &mut rng,
                    &format!("{base}.{site}_adapter"),
                    model.d_model,
                    cfg.adapter_h,
                )?;
            }
            for base in layer_bases(model) {
                init_adapter_site(
                    store,
                    &mut rng,
                    &format!("{base}.ffn_adapter"),
                    model.d_model,
                    cfg.adapter_h,
                )?;
            }
            store.set_trainable_where(
                |n| n.starts_with("backbone.") && (n.ends_with(".gamma") || n.ends_with(".beta")),
                true,
            );
        }
        Method::Lora => {
            for (base, site) in attention_sites(model) {
                init_lora_site(store, &mut rng, &format!("{base}.{site}"), model.d_model, cfg.lora_k)?;
            }
        }
        Method::Bitfit => {
            store.set_trainable_where(
                |n| n.starts_with("backbone.") && (n.ends_with(".b") || n.ends_with(".beta")),
                true,
            );
        }
        Method::Prompt => {
            let emb = &store.get("backbone.embedding")?.tensor;
            let d = model.d_model;
            let rows = emb.data()[..cfg.prompt_len * d].to_vec();
            let vectors = Tensor::new(vec![cfg.prompt_len, d], rows)?;
            store.insert("prompt.vectors", vectors, true, Owner::Inserted)?;
        }
        Method::Lst => {
            let side = cfg.side.as_ref().expect("validated above");
            init_side(store, model, side, seed)?;
        }
    }
    freeze_prefix(store, model, cfg.freeze_prefix)
}

/// Freeze the first `n` backbone layers, encoder layers first, and remove
/// any inserted modules living in them. Embeddings, positions and final
/// layer norms are not per-layer and stay untouched.
pub fn freeze_prefix<E: Elem>(store: &mut ParamStore<E>, model: &ModelConfig, n: usize) -> Result<()> {
    let total = total_layers(model);
    if n > total {
        return Err(Error::Config(format!("freeze prefix {n} exceeds {total} layers")));
    }
    for idx in 0..n {
        let (stack, i) = if idx < model.layers {
            ("enc", idx + 1)
        } else {
            ("dec", idx - model.layers + 1)
        };
        let backbone = format!("backbone.{stack}.{i}.");
        store.set_trainable_where(|name| name.starts_with(&backbone), false);
        let inserted = format!("insert.{stack}.{i}.");
        let doomed: Vec<String> =
            store.names().filter(|name| name.starts_with(&inserted)).cloned().collect();
        for name in doomed {
            store.remove(&name)?;
        }
    }
    Ok(())
}

/// One forward pass to logits, dispatched by method. LST runs the frozen
/// trunk for taps (or final state, for the side-tuning arm) and scores
/// through the side network; every other method scores the trunk directly.
pub fn method_forward<E: Elem>(
    tape: &mut Tape<E>,
    vars: &VarMap,
    model: &ModelConfig,
    cfg: &MethodConfig,
    batch: &TokenBatch,
) -> Result<Var> {
    match cfg.method {
        Method::Lst => {
            let side = cfg
                .side
                .as_ref()
                .ok_or_else(|| Error::Config("lst method needs a side config".to_string()))?;
            match side.mode {
                SideMode::Ladder => {
                    let out: BackboneOut =
                        backbone_forward(tape, vars, model, batch, Inserts::default())?;
                    side_ladder_forward(tape, vars, model, side, &out.taps)
                }
                SideMode::Compression => {
                    side_standalone_forward(tape, vars, model, side, batch, None)
                }
                SideMode::SideTuning => {
                    let out = backbone_forward(tape, vars, model, batch, Inserts::default())?;
                    side_standalone_forward(tape, vars, model, side, batch, Some(out.final_hidden))
                }
            }
        }
        _ => Ok(backbone_forward(tape, vars, model, batch, cfg.inserts())?.logits),
    }
}
