//! Closed-form training-memory estimates, validated against the tape.
//!
//! `estimate` replays the forward pass at the shape level: a symbolic
//! variable carries (requires-grad, tokens, width, buffer id) and every op
//! applies the same save rules the real tape does, including shared-buffer
//! dedup and first-layer gradient propagation. `measure` records one real
//! step. Agreement between the two is a test invariant, not a hope.

use std::collections::{BTreeMap, HashSet};

use crate::backbone::{ModelConfig, TokenBatch};
use crate::error::Result;
use crate::params::ParamStore;
use crate::petl::{method_forward, Method, MethodConfig};
use crate::side::{SideConfig, SideMode};
use crate::tape::{Elem, Owner, Reduction, RetainedBytes, SaveReason, Tape};

/// Training-step memory by category, with retained bytes split per owner.
#[derive(Debug, Clone, Default)]
pub struct MemoryReport {
    pub dtype_bytes: u64,
    pub parameters: u64,
    pub gradients: u64,
    pub optimizer_state: u64,
    pub retained: BTreeMap<Owner, RetainedBytes>,
}

impl MemoryReport {
    pub fn owner(&self, owner: Owner) -> RetainedBytes {
        self.retained.get(&owner).copied().unwrap_or_default()
    }

    pub fn retained_total(&self) -> RetainedBytes {
        let mut acc = RetainedBytes::default();
        for v in self.retained.values() {
            acc.add(v);
        }
        acc
    }

    pub fn retained_bytes(&self) -> u64 {
        self.retained_total().total()
    }

    pub fn total_bytes(&self) -> u64 {
        self.parameters + self.gradients + self.optimizer_state + self.retained_bytes()
    }

    /// `category=bytes` records, one per line, for log scraping.
    pub fn machine_lines(&self) -> Vec<String> {
        let t = self.retained_total();
        let mut lines = vec![
            format!("parameters={}", self.parameters),
            format!("gradients={}", self.gradients),
            format!("optimizer_state={}", self.optimizer_state),
            format!("retained.input_activations={}", t.input_activations),
            format!("retained.derivatives={}", t.derivatives),
            format!("retained.ladder_taps={}", t.ladder_taps),
            format!("retained.other={}", t.other),
            format!("retained.total={}", t.total()),
            format!("total={}", self.total_bytes()),
        ];
        for (owner, b) in &self.retained {
            lines.push(format!(
                "retained.{}={}:{}:{}:{}",
                owner.label(),
                b.input_activations,
                b.derivatives,
                b.ladder_taps,
                b.other
            ));
        }
        lines
    }

    /// Aligned human-readable table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let t = self.retained_total();
        let rows = [
            ("parameters", self.parameters),
            ("gradients", self.gradients),
            ("optimizer state", self.optimizer_state),
            ("retained inputs", t.input_activations),
            ("retained derivatives", t.derivatives),
            ("ladder taps", t.ladder_taps),
            ("retained other", t.other),
            ("total", self.total_bytes()),
        ];
        for (name, v) in rows {
            s.push_str(&format!("{name:<22} {v:>14} B\n"));
        }
        s.push_str("per owner (inputs/derivatives/taps/other):\n");
        for (owner, b) in &self.retained {
            s.push_str(&format!(
                "  {:<10} {:>12} {:>12} {:>12} {:>12}\n",
                owner.label(),
                b.input_activations,
                b.derivatives,
                b.ladder_taps,
                b.other
            ));
        }
        s
    }
}

/// One category's estimator-vs-tape comparison.
#[derive(Debug, Clone)]
pub struct CategoryCheck {
    pub category: String,
    pub estimated: u64,
    pub measured: u64,
    /// |estimated - measured| / measured; infinite when the tape saw zero
    /// bytes but the estimate claims some.
    pub rel_err: f64,
}

fn check(category: &str, estimated: u64, measured: u64) -> CategoryCheck {
    let rel_err = if measured == 0 {
        if estimated == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (estimated as f64 - measured as f64).abs() / measured as f64
    };
    CategoryCheck { category: category.to_string(), estimated, measured, rel_err }
}

/// Per-category relative error of an estimate against a measured report.
pub fn validate(estimated: &MemoryReport, measured: &MemoryReport) -> Vec<CategoryCheck> {
    let e = estimated.retained_total();
    let m = measured.retained_total();
    vec![
        check("parameters", estimated.parameters, measured.parameters),
        check("gradients", estimated.gradients, measured.gradients),
        check("optimizer_state", estimated.optimizer_state, measured.optimizer_state),
        check("retained.input_activations", e.input_activations, m.input_activations),
        check("retained.derivatives", e.derivatives, m.derivatives),
        check("retained.ladder_taps", e.ladder_taps, m.ladder_taps),
        check("retained.other", e.other, m.other),
        check("retained.total", e.total(), m.total()),
    ]
}

/// Record one real step (forward plus loss; retention happens on the
/// forward) and read the tape's books.
pub fn measure<E: Elem>(
    store: &ParamStore<E>,
    model: &ModelConfig,
    cfg: &MethodConfig,
    batch: &TokenBatch,
) -> Result<MemoryReport> {
    cfg.validate(model)?;
    let mut tape: Tape<E> = Tape::new();
    let vars = store.register_on(&mut tape)?;
    let logits = method_forward(&mut tape, &vars, model, cfg, batch)?;
    let _ = tape.cross_entropy(logits, &batch.targets, Reduction::Mean)?;
    let w = std::mem::size_of::<E>() as u64;
    Ok(MemoryReport {
        dtype_bytes: w,
        parameters: store.total_params() as u64 * w,
        gradients: store.trainable_params() as u64 * w,
        optimizer_state: 2 * store.trainable_params() as u64 * w,
        retained: tape.retained().by_owner,
    })
}

/// Token geometry of the step being estimated.
#[derive(Debug, Clone, Copy)]
pub struct BatchShape {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
}

impl BatchShape {
    pub fn of(batch: &TokenBatch) -> Self {
        BatchShape { batch: batch.batch, src_len: batch.src_len, tgt_len: batch.tgt_len }
    }
}

/// A value at the shape level: does it carry gradient, how many rows and
/// columns, and which buffer it lives in (for shared-save dedup).
#[derive(Debug, Clone, Copy)]
struct Sym {
    req: bool,
    tokens: u64,
    width: u64,
    buf: u32,
    owner: Owner,
}

/// Trainability of one block's parameter families.
#[derive(Debug, Clone, Copy, Default)]
struct BlockFlags {
    w: bool,
    bias: bool,
    gamma: bool,
    beta: bool,
    adapter: Option<u64>,
    lora: Option<u64>,
}

impl BlockFlags {
    fn all() -> Self {
        BlockFlags { w: true, bias: true, gamma: true, beta: true, adapter: None, lora: None }
    }
}

struct SymTape {
    w: u64,
    batch: u64,
    /// Count attention score tensors; the paper-mode formula drops them.
    count_scores: bool,
    scope: Owner,
    saved: HashSet<u32>,
    next: u32,
    rep: BTreeMap<Owner, RetainedBytes>,
}

impl SymTape {
    fn new(dtype_bytes: u64, batch: u64, count_scores: bool) -> Self {
        SymTape {
            w: dtype_bytes,
            batch,
            count_scores,
            scope: Owner::Other,
            saved: HashSet::new(),
            next: 0,
            rep: BTreeMap::new(),
        }
    }

    fn set_scope(&mut self, owner: Owner) -> Owner {
        std::mem::replace(&mut self.scope, owner)
    }

    fn fresh(&mut self, req: bool, tokens: u64, width: u64) -> Sym {
        self.next += 1;
        Sym { req, tokens, width, buf: self.next, owner: self.scope }
    }

    /// Mirror of the tape's save-value rule: shared buffers count once, the
    /// consuming scope owns the record, and a backbone-owned value saved
    /// from ladder scope is a ladder tap.
    fn save(&mut self, v: Sym, reason: SaveReason, count: bool) {
        if !self.saved.insert(v.buf) {
            return;
        }
        let bytes = if count { v.tokens * v.width * self.w } else { 0 };
        let tap = self.scope == Owner::Ladder
            && v.owner == Owner::Backbone
            && reason == SaveReason::InputActivation;
        let b = self.rep.entry(self.scope).or_default();
        if tap {
            b.ladder_taps += bytes;
        } else {
            match reason {
                SaveReason::InputActivation => b.input_activations += bytes,
                SaveReason::Derivative => b.derivatives += bytes,
                SaveReason::Other => b.other += bytes,
            }
        }
    }

    /// Aux buffers (normalized inputs, derivative caches) are per-node and
    /// never shared, so no dedup applies.
    fn aux(&mut self, reason: SaveReason, elems: u64) {
        let bytes = elems * self.w;
        let b = self.rep.entry(self.scope).or_default();
        match reason {
            SaveReason::InputActivation => b.input_activations += bytes,
            SaveReason::Derivative => b.derivatives += bytes,
            SaveReason::Other => b.other += bytes,
        }
    }

    /// `y = x W^T + b`: the matmul saves its input iff the weight trains.
    fn linear(&mut self, x: Sym, d_out: u64, wt: bool, bt: bool) -> Sym {
        if wt {
            self.save(x, SaveReason::InputActivation, true);
        }
        self.fresh(x.req || wt || bt, x.tokens, d_out)
    }

    /// Keeps x-hat when the input or gamma trains, the reciprocal std when
    /// the input does.
    fn layer_norm(&mut self, x: Sym, gamma: bool, beta: bool) -> Sym {
        if x.req || gamma {
            self.aux(SaveReason::InputActivation, x.tokens * x.width);
        }
        if x.req {
            self.aux(SaveReason::Derivative, x.tokens);
        }
        self.fresh(x.req || gamma || beta, x.tokens, x.width)
    }

    fn lora_delta(&mut self, x: Sym, y: Sym, k: u64) -> Sym {
        self.save(x, SaveReason::InputActivation, true);
        let mid = self.fresh(true, x.tokens, k);
        self.save(mid, SaveReason::InputActivation, true);
        let delta = self.fresh(true, x.tokens, y.width);
        self.fresh(y.req || delta.req, y.tokens, y.width)
    }

    fn attention(&mut self, xq: Sym, xkv: Sym, heads: u64, d: u64, f: &BlockFlags) -> Sym {
        let mut q = self.linear(xq, d, f.w, f.bias);
        let k = self.linear(xkv, d, f.w, f.bias);
        let mut v = self.linear(xkv, d, f.w, f.bias);
        if let Some(rank) = f.lora {
            let prev = self.set_scope(Owner::Inserted);
            q = self.lora_delta(xq, q, rank);
            v = self.lora_delta(xkv, v, rank);
            self.set_scope(prev);
        }
        let qh = self.fresh(q.req, q.tokens, d);
        let kh = self.fresh(k.req, k.tokens, d);
        let vh = self.fresh(v.req, v.tokens, d);
        if kh.req {
            self.save(qh, SaveReason::InputActivation, true);
        }
        if qh.req {
            self.save(kh, SaveReason::InputActivation, true);
        }
        let key_len = if self.batch > 0 { xkv.tokens / self.batch } else { 0 };
        let scores = self.fresh(qh.req || kh.req, xq.tokens, heads * key_len);
        let probs = self.fresh(scores.req, scores.tokens, scores.width);
        if probs.req {
            self.save(probs, SaveReason::Derivative, self.count_scores);
        }
        if vh.req {
            self.save(probs, SaveReason::InputActivation, self.count_scores);
        }
        if probs.req {
            self.save(vh, SaveReason::InputActivation, true);
        }
        let ctx = self.fresh(probs.req || vh.req, xq.tokens, d);
        let merged = self.fresh(ctx.req, ctx.tokens, d);
        self.linear(merged, d, f.w, f.bias)
    }

    fn adapter(&mut self, x: Sym, h: u64) -> Sym {
        let prev = self.set_scope(Owner::Inserted);
        let mid = self.linear(x, h, true, true);
        if mid.req {
            self.aux(SaveReason::Derivative, mid.tokens * h);
        }
        let r = self.fresh(mid.req, mid.tokens, h);
        let up = self.linear(r, x.width, true, true);
        let out = self.fresh(x.req || up.req, x.tokens, x.width);
        self.set_scope(prev);
        out
    }

    fn block(&mut self, x: Sym, mem: Option<Sym>, heads: u64, d: u64, dff: u64, f: &BlockFlags) -> Sym {
        let xn = self.layer_norm(x, f.gamma, f.beta);
        let mut a = self.attention(xn, xn, heads, d, f);
        if let Some(h) = f.adapter {
            a = self.adapter(a, h);
        }
        let mut h = self.fresh(x.req || a.req, x.tokens, d);
        if let Some(m) = mem {
            let hn = self.layer_norm(h, f.gamma, f.beta);
            let mut c = self.attention(hn, m, heads, d, f);
            if let Some(ah) = f.adapter {
                c = self.adapter(c, ah);
            }
            h = self.fresh(h.req || c.req, h.tokens, d);
        }
        let hn = self.layer_norm(h, f.gamma, f.beta);
        let f1 = self.linear(hn, dff, f.w, f.bias);
        if f1.req {
            self.aux(SaveReason::Derivative, f1.tokens * dff);
        }
        let g = self.fresh(f1.req, f1.tokens, dff);
        let mut f2 = self.linear(g, d, f.w, f.bias);
        if let Some(ah) = f.adapter {
            f2 = self.adapter(f2, ah);
        }
        self.fresh(h.req || f2.req, h.tokens, d)
    }

    /// Gated fusion of a ladder branch with the carried state.
    fn fuse(&mut self, ladder: Sym, carried: Sym) -> Sym {
        let pre = self.fresh(true, 1, 1);
        if pre.req {
            self.aux(SaveReason::Derivative, 1);
        }
        let mu = self.fresh(true, 1, 1);
        if mu.req {
            self.save(ladder, SaveReason::InputActivation, true);
        }
        if ladder.req {
            self.save(mu, SaveReason::InputActivation, true);
        }
        let a = self.fresh(mu.req || ladder.req, ladder.tokens, ladder.width);
        let inv = self.fresh(mu.req, 1, 1);
        if inv.req {
            self.save(carried, SaveReason::InputActivation, true);
        }
        if carried.req {
            self.save(inv, SaveReason::InputActivation, true);
        }
        let b = self.fresh(inv.req || carried.req, carried.tokens, carried.width);
        self.fresh(a.req || b.req, ladder.tokens, ladder.width)
    }

    /// Tied head: the pre-head hidden is kept iff the embedding trains.
    fn head(&mut self, h: Sym, emb_trainable: bool, vocab: u64) -> Sym {
        let prev = self.set_scope(Owner::Head);
        if emb_trainable {
            self.save(h, SaveReason::InputActivation, true);
        }
        let logits = self.fresh(h.req || emb_trainable, h.tokens, vocab);
        self.set_scope(prev);
        logits
    }

    fn loss(&mut self, logits: Sym) {
        if logits.req {
            self.aux(SaveReason::Derivative, logits.tokens * logits.width);
        }
    }
}

struct TrunkWalk {
    enc_taps: Vec<Sym>,
    dec_taps: Vec<Sym>,
    final_hidden: Sym,
    logits: Sym,
}

/// Per-layer flags honoring the frozen prefix (which also strips inserts).
fn layer_flags(cfg: &MethodConfig, model: &ModelConfig, stack_is_dec: bool, i: usize) -> BlockFlags {
    let global = if stack_is_dec { model.layers + i - 1 } else { i - 1 };
    if global < cfg.freeze_prefix {
        return BlockFlags::default();
    }
    match cfg.method {
        Method::Full => BlockFlags { adapter: None, lora: None, ..BlockFlags::all() },
        Method::Adapter => BlockFlags {
            gamma: true,
            beta: true,
            adapter: Some(cfg.adapter_h as u64),
            ..BlockFlags::default()
        },
        Method::Lora => BlockFlags { lora: Some(cfg.lora_k as u64), ..BlockFlags::default() },
        Method::Bitfit => BlockFlags { bias: true, beta: true, ..BlockFlags::default() },
        Method::Prompt | Method::Lst => BlockFlags::default(),
    }
}

/// Trainability of the non-per-layer backbone parts.
fn global_flags(cfg: &MethodConfig) -> (bool, bool, bool) {
    // (embedding+positions, final-ln gamma, final-ln beta)
    match cfg.method {
        Method::Full => (true, true, true),
        Method::Adapter => (false, true, true),
        Method::Bitfit => (false, false, true),
        _ => (false, false, false),
    }
}

fn walk_trunk(st: &mut SymTape, model: &ModelConfig, cfg: &MethodConfig, shape: &BatchShape) -> TrunkWalk {
    let d = model.d_model as u64;
    let dff = model.d_ff as u64;
    let heads = model.heads as u64;
    let vocab = model.vocab as u64;
    let b = shape.batch as u64;
    let (emb_t, fg, fb) = global_flags(cfg);
    let prompt = match cfg.method {
        Method::Prompt => Some(cfg.prompt_len as u64),
        _ => None,
    };

    let prev = st.set_scope(Owner::Backbone);
    let e = st.fresh(emb_t, b * shape.src_len as u64, d);
    let pos = st.fresh(emb_t, shape.src_len as u64, d);
    let mut x = st.fresh(e.req || pos.req, e.tokens, d);
    if let Some(p) = prompt {
        // Broadcast prompt rows, concat in front: everything downstream
        // carries gradient to the prompt vectors.
        x = st.fresh(true, b * (p + shape.src_len as u64), d);
    }
    let mut enc_taps = vec![x];
    for i in 1..=model.layers {
        let f = layer_flags(cfg, model, false, i);
        x = st.block(x, None, heads, d, dff, &f);
        enc_taps.push(x);
    }
    let memory = st.layer_norm(x, fg, fb);

    if !model.is_enc_dec() {
        let scored = match prompt {
            Some(_) => st.fresh(memory.req, b * shape.src_len as u64, d),
            None => memory,
        };
        let logits = st.head(scored, emb_t, vocab);
        st.set_scope(prev);
        return TrunkWalk { enc_taps, dec_taps: Vec::new(), final_hidden: scored, logits };
    }

    let ed = st.fresh(emb_t, b * shape.tgt_len as u64, d);
    let posd = st.fresh(emb_t, shape.tgt_len as u64, d);
    let mut xd = st.fresh(ed.req || posd.req, ed.tokens, d);
    let mut dec_taps = vec![xd];
    for i in 1..=model.layers {
        let f = layer_flags(cfg, model, true, i);
        xd = st.block(xd, Some(memory), heads, d, dff, &f);
        dec_taps.push(xd);
    }
    let hd = st.layer_norm(xd, fg, fb);
    let logits = st.head(hd, emb_t, vocab);
    st.set_scope(prev);
    TrunkWalk { enc_taps, dec_taps, final_hidden: hd, logits }
}

fn walk_ladder_stack(
    st: &mut SymTape,
    model: &ModelConfig,
    side: &SideConfig,
    keep: &[usize],
    taps: &[Sym],
    mem: Option<Sym>,
) -> Sym {
    let dr = side.width(model) as u64;
    let dffr = side.ff_width(model) as u64;
    let heads = model.heads as u64;
    let f = BlockFlags::all();
    let prev = st.set_scope(Owner::Ladder);
    let mut h = st.linear(taps[0], dr, true, true);
    for &i in keep {
        let down = st.linear(taps[i], dr, true, true);
        h = st.fuse(down, h);
        st.set_scope(Owner::Side);
        h = st.block(h, mem, heads, dr, dffr, &f);
        st.set_scope(Owner::Ladder);
    }
    st.set_scope(Owner::Side);
    let out = st.layer_norm(h, true, true);
    st.set_scope(prev);
    out
}

fn walk_plain_stack(
    st: &mut SymTape,
    model: &ModelConfig,
    side: &SideConfig,
    keep: &[usize],
    x: Sym,
    mem: Option<Sym>,
) -> Sym {
    let dr = side.width(model) as u64;
    let dffr = side.ff_width(model) as u64;
    let heads = model.heads as u64;
    let f = BlockFlags::all();
    let prev = st.set_scope(Owner::Ladder);
    let mut h = st.linear(x, dr, true, true);
    st.set_scope(Owner::Side);
    for _ in keep {
        h = st.block(h, mem, heads, dr, dffr, &f);
    }
    let out = st.layer_norm(h, true, true);
    st.set_scope(prev);
    out
}

fn walk_upsample(st: &mut SymTape, model: &ModelConfig, h: Sym) -> Sym {
    let prev = st.set_scope(Owner::Ladder);
    let up = st.linear(h, model.d_model as u64, true, true);
    st.set_scope(prev);
    up
}

/// Frozen embedding + positions: saves nothing itself, but the produced
/// buffer is backbone-owned, so a ladder-side consumer books it as a tap.
fn frozen_embed(st: &mut SymTape, tokens: u64, d: u64) -> Sym {
    let prev = st.set_scope(Owner::Backbone);
    let x = st.fresh(false, tokens, d);
    st.set_scope(prev);
    x
}

fn walk_lst(st: &mut SymTape, model: &ModelConfig, cfg: &MethodConfig, shape: &BatchShape) {
    let side = cfg.side.as_ref().expect("validated");
    let d = model.d_model as u64;
    let vocab = model.vocab as u64;
    let b = shape.batch as u64;
    match side.mode {
        SideMode::Ladder => {
            let trunk = walk_trunk(st, model, cfg, shape);
            let s_mem =
                walk_ladder_stack(st, model, side, &side.keep_enc, &trunk.enc_taps, None);
            let final_side = if model.is_enc_dec() {
                walk_ladder_stack(st, model, side, &side.keep_dec, &trunk.dec_taps, Some(s_mem))
            } else {
                s_mem
            };
            let up = walk_upsample(st, model, final_side);
            let logits = st.head(up, false, vocab);
            st.loss(logits);
        }
        SideMode::Compression | SideMode::SideTuning => {
            let backbone_final = if side.mode == SideMode::SideTuning {
                Some(walk_trunk(st, model, cfg, shape).final_hidden)
            } else {
                None
            };
            let x = frozen_embed(st, b * shape.src_len as u64, d);
            let s_mem = walk_plain_stack(st, model, side, &side.keep_enc, x, None);
            let final_side = if model.is_enc_dec() {
                let xd = frozen_embed(st, b * shape.tgt_len as u64, d);
                walk_plain_stack(st, model, side, &side.keep_dec, xd, Some(s_mem))
            } else {
                s_mem
            };
            let mut up = walk_upsample(st, model, final_side);
            if let Some(bb) = backbone_final {
                let prev = st.set_scope(Owner::Ladder);
                up = st.fuse(up, bb);
                st.set_scope(prev);
            }
            let logits = st.head(up, false, vocab);
            st.loss(logits);
        }
    }
}

/// Closed-form parameter census: (total elements, trainable elements),
/// matching what `apply_method` leaves in the store.
pub fn param_census(model: &ModelConfig, cfg: &MethodConfig) -> (u64, u64) {
    let d = model.d_model as u64;
    let dff = model.d_ff as u64;
    let l = model.layers as u64;
    let enc_dec = model.is_enc_dec();
    let linear = |dout: u64, din: u64| dout * din + dout;
    let attn = |width: u64| 4 * linear(width, width);
    let ffn = |width: u64, hidden: u64| linear(hidden, width) + linear(width, hidden);
    let layer = |width: u64, hidden: u64, cross: bool| {
        attn(width) + ffn(width, hidden) + 2 * 2 * width
            + if cross { attn(width) + 2 * width } else { 0 }
    };

    let mut total = model.vocab as u64 * d + model.max_seq as u64 * d;
    if enc_dec {
        total += model.max_seq as u64 * d;
    }
    total += l * layer(d, dff, false) + 2 * d;
    if enc_dec {
        total += l * layer(d, dff, true) + 2 * d;
    }
    let backbone_total = total;

    // Per-layer backbone elements, for frozen-prefix accounting.
    let frozen_backbone: u64 = (0..cfg.freeze_prefix as u64)
        .map(|idx| layer(d, dff, enc_dec && idx >= l))
        .sum();

    let n_layers = if enc_dec { 2 * l } else { l };
    let live = |idx: u64| idx >= cfg.freeze_prefix as u64;
    let mut trainable;
    match cfg.method {
        Method::Full => {
            trainable = backbone_total - frozen_backbone;
        }
        Method::Adapter => {
            let h = cfg.adapter_h as u64;
            let site = linear(h, d) + linear(d, h);
            let mut inserts = 0;
            // gamma+beta of each stack-final norm, always live.
            let mut lns = if enc_dec { 4 * d } else { 2 * d };
            for idx in 0..n_layers {
                if !live(idx) {
                    continue;
                }
                let cross = enc_dec && idx >= l;
                inserts += site * if cross { 3 } else { 2 };
                lns += 2 * d * if cross { 3 } else { 2 };
            }
            total += inserts;
            trainable = inserts + lns;
        }
        Method::Lora => {
            let k = cfg.lora_k as u64;
            let pair = 2 * (k * d + d * k); // lora_q and lora_v, no biases
            let mut inserts = 0;
            for idx in 0..n_layers {
                if !live(idx) {
                    continue;
                }
                let cross = enc_dec && idx >= l;
                inserts += pair * if cross { 2 } else { 1 };
            }
            total += inserts;
            trainable = inserts;
        }
        Method::Bitfit => {
            trainable = if enc_dec { 2 * d } else { d }; // final-ln betas
            for idx in 0..n_layers {
                if !live(idx) {
                    continue;
                }
                let cross = enc_dec && idx >= l;
                // q,k,v,o + fc1 + fc2 biases, plus one beta per norm.
                trainable += 4 * d + dff + d + 2 * d + if cross { 4 * d + d } else { 0 };
            }
        }
        Method::Prompt => {
            let p = cfg.prompt_len as u64;
            total += p * d;
            trainable = p * d;
        }
        Method::Lst => {
            let side = cfg.side.as_ref().expect("validated");
            let dr = side.width(model) as u64;
            let dffr = side.ff_width(model) as u64;
            let stack = |keep: usize, cross: bool| -> u64 {
                let mut e = linear(dr, d); // embed_down
                if side.mode == SideMode::Ladder {
                    e += keep as u64 * (linear(dr, d) + 1); // downs and gates
                }
                e + keep as u64 * layer(dr, dffr, cross) + 2 * dr
            };
            let mut s = stack(side.keep_enc.len(), false);
            if enc_dec {
                s += stack(side.keep_dec.len(), true);
            }
            s += linear(d, dr); // upsample
            if side.mode == SideMode::SideTuning {
                s += 1; // final gate
            }
            total += s;
            trainable = s;
        }
    }
    (total, trainable)
}

/// Predict one training step's memory from shapes alone.
pub fn estimate(
    model: &ModelConfig,
    cfg: &MethodConfig,
    shape: &BatchShape,
    dtype_bytes: usize,
    paper_mode: bool,
) -> Result<MemoryReport> {
    cfg.validate(model)?;
    let w = dtype_bytes as u64;
    let mut st = SymTape::new(w, shape.batch as u64, !paper_mode);
    match cfg.method {
        Method::Lst => walk_lst(&mut st, model, cfg, shape),
        _ => {
            let trunk = walk_trunk(&mut st, model, cfg, shape);
            st.loss(trunk.logits);
        }
    }
    let (total, trainable) = param_census(model, cfg);
    Ok(MemoryReport {
        dtype_bytes: w,
        parameters: total * w,
        gradients: trainable * w,
        optimizer_state: 2 * trainable * w,
        retained: st.rep,
    })
}
