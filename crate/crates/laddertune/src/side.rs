//! The gated ladder side network: a 1/r-width twin of the backbone that
//! consumes per-layer backbone taps through downsampling projections and
//! learned gates, then upsamples back to d for the frozen LM head. Also
//! hosts the two shortcut arms used by ablations: a standalone compression
//! network (no ladders, backbone discarded) and a single-gate fusion of
//! standalone side output with the backbone's final hidden state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    block, embed_stack, init_linear, init_stack, layer_norm, linear, lm_head, var, Inserts,
    ModelConfig, Taps, TokenBatch,
};
use crate::error::{Error, Result};
use crate::params::{ParamStore, VarMap};
use crate::tape::{Elem, Owner, Tape, Var};
use crate::tensor::Tensor;

/// How the side network connects to the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SideMode {
    /// Full ladder: every kept side layer fuses a downsampled backbone tap.
    Ladder,
    /// Standalone network from the embeddings only; backbone layers unused.
    Compression,
    /// Standalone network whose upsampled output fuses with the backbone's
    /// final hidden state through one gate before the head.
    SideTuning,
}

#[derive(Debug, Clone)]
pub struct SideConfig {
    /// Width reduction factor; side blocks run at d/r and d_ff/r.
    pub r: usize,
    /// Gate temperature; mu = sigmoid(alpha / T).
    pub temperature: f64,
    /// Kept side-layer indices per stack, 1-based, strictly increasing.
    pub keep_enc: Vec<usize>,
    pub keep_dec: Vec<usize>,
    pub mode: SideMode,
}

pub const DEFAULT_GATE_TEMPERATURE: f64 = 0.1;

impl SideConfig {
    /// All layers kept, ladder mode.
    pub fn full(model: &ModelConfig, r: usize) -> Self {
        let all: Vec<usize> = (1..=model.layers).collect();
        SideConfig {
            r,
            temperature: DEFAULT_GATE_TEMPERATURE,
            keep_enc: all.clone(),
            keep_dec: if model.is_enc_dec() { all } else { Vec::new() },
            mode: SideMode::Ladder,
        }
    }

    /// Replace the kept-layer sets, keeping everything else.
    pub fn drop_layers(&self, keep_enc: Vec<usize>, keep_dec: Vec<usize>) -> Result<SideConfig> {
        let mut out = self.clone();
        out.keep_enc = keep_enc;
        out.keep_dec = keep_dec;
        if out.keep_enc.is_empty() {
            return Err(Error::Config("empty kept-layer set for the side encoder".to_string()));
        }
        check_increasing("keep_enc", &out.keep_enc)?;
        check_increasing("keep_dec", &out.keep_dec)?;
        Ok(out)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        model.validate()?;
        if self.r == 0 {
            return Err(Error::Config("side.r must be positive".to_string()));
        }
        if model.d_model % self.r != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by r {}",
                model.d_model, self.r
            )));
        }
        if model.d_ff % self.r != 0 {
            return Err(Error::Config(format!(
                "d_ff {} not divisible by r {}",
                model.d_ff, self.r
            )));
        }
        if (model.d_model / self.r) % model.heads != 0 {
            return Err(Error::Config(format!(
                "side width {} not divisible by {} heads",
                model.d_model / self.r,
                model.heads
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "gate temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.keep_enc.is_empty() {
            return Err(Error::Config("side encoder keeps no layers".to_string()));
        }
        check_increasing("keep_enc", &self.keep_enc)?;
        check_increasing("keep_dec", &self.keep_dec)?;
        for (label, set) in [("keep_enc", &self.keep_enc), ("keep_dec", &self.keep_dec)] {
            if set.iter().any(|&i| i < 1 || i > model.layers) {
                return Err(Error::Config(format!(
                    "{label} contains an index outside 1..={}",
                    model.layers
                )));
            }
        }
        if model.is_enc_dec() && self.keep_dec.is_empty() {
            return Err(Error::Config("side decoder keeps no layers".to_string()));
        }
        if !model.is_enc_dec() && !self.keep_dec.is_empty() {
            return Err(Error::Config("keep_dec set on an encoder-only model".to_string()));
        }
        Ok(())
    }

    /// Side hidden width d/r.
    pub fn width(&self, model: &ModelConfig) -> usize {
        model.d_model / self.r
    }

    pub fn ff_width(&self, model: &ModelConfig) -> usize {
        model.d_ff / self.r
    }
}

fn check_increasing(label: &str, set: &[usize]) -> Result<()> {
    if set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("{label} must be strictly increasing")));
    }
    Ok(())
}

/// Kept-layer set for dropping layers "in an interleaving manner". When
/// keeping at most half, keeps every (L/n_keep)-th layer counting from the
/// stride (L=12, keep 6 -> {2,4,..,12}); otherwise drops every
/// (L/n_drop)-th (L=12, keep 9 -> drop {4,8,12}).
pub fn interleaved_keep(layers: usize, n_keep: usize) -> Result<Vec<usize>> {
    if n_keep == 0 || n_keep > layers {
        return Err(Error::Config(format!(
            "cannot keep {n_keep} of {layers} layers"
        )));
    }
    if n_keep == layers {
        return Ok((1..=layers).collect());
    }
    if 2 * n_keep <= layers {
        if layers % n_keep != 0 {
            return Err(Error::Config(format!(
                "interleaved keep needs {n_keep} to divide {layers}"
            )));
        }
        let stride = layers / n_keep;
        Ok((1..=n_keep).map(|k| k * stride).collect())
    } else {
        let n_drop = layers - n_keep;
        if layers % n_drop != 0 {
            return Err(Error::Config(format!(
                "interleaved drop needs {n_drop} to divide {layers}"
            )));
        }
        let stride = layers / n_drop;
        Ok((1..=layers).filter(|i| i % stride != 0).collect())
    }
}

/// Add side-network parameters to a store holding a backbone. Blocks start
/// scaled-normal (pruned initialization overwrites them afterwards); the
/// upsampler starts at zero so the side path initially contributes nothing
/// through the head; gates start at zero so every mu is exactly 0.5.
pub fn init_side<E: Elem>(
    store: &mut ParamStore<E>,
    model: &ModelConfig,
    side: &SideConfig,
    seed: u64,
) -> Result<()> {
    side.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dr = side.width(model);
    init_side_stack(store, &mut rng, model, side, "side.enc", &side.keep_enc, false)?;
    if model.is_enc_dec() {
        init_side_stack(store, &mut rng, model, side, "side.dec", &side.keep_dec, true)?;
    }
    store.insert(
        "side.upsample.w",
        Tensor::zeros(vec![model.d_model, dr]),
        true,
        Owner::Ladder,
    )?;
    store.insert(
        "side.upsample.b",
        Tensor::zeros(vec![model.d_model]),
        true,
        Owner::Ladder,
    )?;
    if side.mode == SideMode::SideTuning {
        store.insert("side.final_gate", Tensor::zeros(vec![1]), true, Owner::Ladder)?;
    }
    Ok(())
}

fn init_side_stack<E: Elem>(
    store: &mut ParamStore<E>,
    rng: &mut ChaCha8Rng,
    model: &ModelConfig,
    side: &SideConfig,
    base: &str,
    keep: &[usize],
    cross: bool,
) -> Result<()> {
    let dr = side.width(model);
    init_linear(store, rng, &format!("{base}.embed_down"), dr, model.d_model, Owner::Ladder)?;
    if side.mode == SideMode::Ladder {
        for &i in keep {
            init_linear(store, rng, &format!("{base}.{i}.down"), dr, model.d_model, Owner::Ladder)?;
            store.insert(&format!("{base}.{i}.gate"), Tensor::zeros(vec![1]), true, Owner::Ladder)?;
        }
    }
    init_stack(store, rng, base, keep, dr, side.ff_width(model), cross, Owner::Side)
}

/// Gated fusion: `mu * ladder + (1 - mu) * carried`, `mu = sigmoid(gate/T)`.
pub fn fuse<E: Elem>(
    tape: &mut Tape<E>,
    gate: Var,
    ladder: Var,
    carried: Var,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "gate temperature must be positive, got {temperature}"
        )));
    }
    if tape.shape(gate) != [1] {
        return Err(Error::Shape {
            op: "fuse",
            detail: format!("gate must be a scalar, got {:?}", tape.shape(gate)),
        });
    }
    if tape.shape(ladder) != tape.shape(carried) {
        return Err(Error::Shape {
            op: "fuse",
            detail: format!(
                "branch shapes differ: {:?} vs {:?}",
                tape.shape(ladder),
                tape.shape(carried)
            ),
        });
    }
    let pre = tape.scale(gate, 1.0 / temperature)?;
    let mu = tape.sigmoid(pre)?;
    let a = tape.mul_scalar_t(mu, ladder)?;
    let inv = tape.one_minus(mu)?;
    let b = tape.mul_scalar_t(inv, carried)?;
    tape.add(a, b)
}

fn upsample<E: Elem>(tape: &mut Tape<E>, vars: &VarMap, h: Var) -> Result<Var> {
    let prev = tape.set_scope(Owner::Ladder);
    let up = linear(tape, vars, "side.upsample", h)?;
    tape.set_scope(prev);
    Ok(up)
}

/// One side stack in ladder mode: embed-downsample tap 0, then for each
/// kept layer fuse the downsampled tap with the carried state and run the
/// narrow block. Ends with the stack's final layer norm.
fn run_ladder_stack<E: Elem>(
    tape: &mut Tape<E>,
    vars: &VarMap,
    model: &ModelConfig,
    side: &SideConfig,
    base: &str,
    keep: &[usize],
    taps: &[Var],
    causal: bool,
    cross: Option<Var>,
) -> Result<Var> {
    let prev = tape.set_scope(Owner::Ladder);
    let mut h = linear(tape, vars, &format!("{base}.embed_down"), taps[0])?;
    for &i in keep {
        let down = linear(tape, vars, &format!("{base}.{i}.down"), taps[i])?;
        let gate = var(vars, &format!("{base}.{i}.gate"))?;
        h = fuse(tape, gate, down, h, side.temperature)?;
        tape.set_scope(Owner::Side);
        h = block(
            tape,
            vars,
            &format!("{base}.{i}"),
            None,
            model.heads,
            causal,
            cross,
            Inserts::default(),
            h,
        )?;
        tape.set_scope(Owner::Ladder);
    }
    tape.set_scope(Owner::Side);
    let out = layer_norm(tape, vars, &format!("{base}.final_ln"), h)?;
    tape.set_scope(prev);
    Ok(out)
}

/// Standalone side stack: embed-downsample the input, run kept blocks with
/// no ladder fusion.
fn run_plain_stack<E: Elem>(
    tape: &mut Tape<E>,
    vars: &VarMap,
    model: &ModelConfig,
    base: &str,
    keep: &[usize],
    x: Var,
    causal: bool,
    cross: Option<Var>,
) -> Result<Var> {
    let prev = tape.set_scope(Owner::Ladder);
    let mut h = linear(tape, vars, &format!("{base}.embed_down"), x)?;
    tape.set_scope(Owner::Side);
    for &i in keep {
        h = block(
            tape,
            vars,
            &format!("{base}.{i}"),
            None,
            model.heads,
            causal,
            cross,
            Inserts::default(),
            h,
        )?;
    }
    let out = layer_norm(tape, vars, &format!("{base}.final_ln"), h)?;
    tape.set_scope(prev);
    Ok(out)
}

/// Ladder-mode forward over backbone taps, through the shared frozen head.
pub fn side_ladder_forward<E: Elem>(
    tape: &mut Tape<E>,
    vars: &VarMap,
    model: &ModelConfig,
    side: &SideConfig,
    taps: &Taps,
) -> Result<Var> {
    side.validate(model)?;
    if side.mode != SideMode::Ladder {
        return Err(Error::Wiring("ladder forward called for a non-ladder side config".to_string()));
    }
    if taps.enc.len() != model.layers + 1 {
        return Err(Error::Wiring(format!(
            "expected {} encoder taps, got {}",
            model.layers + 1,
            taps.enc.len()
        )));
    }
    let s_mem = run_ladder_stack(
        tape,
        vars,
        model,
        side,
        "side.enc",
        &side.keep_enc,
        &taps.enc,
        model.causal_encoder,
        None,
    )?;
    let final_side = if model.is_enc_dec() {
        if taps.dec.len() != model.layers + 1 {
            return Err(Error::Wiring(format!(
                "expected {} decoder taps, got {}",
                model.layers + 1,
                taps.dec.len()
            )));
        }
        run_ladder_stack(
            tape,
            vars,
            model,
            side,
            "side.dec",
            &side.keep_dec,
            &taps.dec,
            true,
            Some(s_mem),
        )?
    } else {
        s_mem
    };
    let up = upsample(tape, vars, final_side)?;
    lm_head(tape, vars, up)
}

/// Standalone forward for the shortcut arms. `backbone_final` is the
/// trunk's pre-head hidden state; passing it selects the side-tuning arm
/// (single gate), leaving it out selects the compression arm.
pub fn side_standalone_forward<E: Elem>(
    tape: &mut Tape<E>,
    vars: &VarMap,
    model: &ModelConfig,
    side: &SideConfig,
    batch: &TokenBatch,
    backbone_final: Option<Var>,
) -> Result<Var> {
    side.validate(model)?;
    match (side.mode, backbone_final.is_some()) {
        (SideMode::Compression, false) | (SideMode::SideTuning, true) => {}
        (SideMode::Compression, true) => {
            return Err(Error::Wiring("compression arm takes no backbone state".to_string()))
        }
        (SideMode::SideTuning, false) => {
            return Err(Error::Wiring("side-tuning arm needs the backbone final state".to_string()))
        }
        (SideMode::Ladder, _) => {
            return Err(Error::Wiring("standalone forward called for a ladder side config".to_string()))
        }
    }
    let prev = tape.set_scope(Owner::Backbone);
    let x = embed_stack(
        tape,
        vars,
        model,
        "backbone.pos_enc",
        &batch.src,
        batch.batch,
        batch.src_len,
        None,
    )?;
    tape.set_scope(prev);
    let s_mem = run_plain_stack(
        tape,
        vars,
        model,
        "side.enc",
        &side.keep_enc,
        x,
        model.causal_encoder,
        None,
    )?;
    let final_side = if model.is_enc_dec() {
        let dec_tokens = batch
            .dec
            .as_ref()
            .ok_or_else(|| Error::Input("encoder-decoder forward needs decoder tokens".to_string()))?;
        let prev = tape.set_scope(Owner::Backbone);
        let xd = embed_stack(
            tape,
            vars,
            model,
            "backbone.pos_dec",
            dec_tokens,
            batch.batch,
            batch.tgt_len,
            None,
        )?;
        tape.set_scope(prev);
        run_plain_stack(tape, vars, model, "side.dec", &side.keep_dec, xd, true, Some(s_mem))?
    } else {
        s_mem
    };
    let mut up = upsample(tape, vars, final_side)?;
    if let Some(bb) = backbone_final {
        let prev = tape.set_scope(Owner::Ladder);
        let gate = var(vars, "side.final_gate")?;
        up = fuse(tape, gate, up, bb, side.temperature)?;
        tape.set_scope(prev);
    }
    lm_head(tape, vars, up)
}
