//! Structural initialization of the side network from backbone weights.
//! Importance (weight magnitude or empirical Fisher) is summed into row
//! scores; each pruned dimension keeps its top d/r indices with downstream
//! columns following the same sets. Three dimension families exist per
//! stack: the residual stream (shared by every layer norm, attention output
//! and FFN output of a stack), per-site attention internals (scored jointly
//! across Q/K/V within each head so head count survives), and per-layer FFN
//! hiddens.

use std::collections::BTreeMap;

use crate::backbone::{backbone_forward, Inserts, ModelConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::side::SideConfig;
use crate::tape::{Elem, Reduction, Tape};
use crate::tensor::Tensor;

/// How side-network blocks are initialized before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    Random,
    Magnitude,
    Fisher,
}

/// Per-parameter importance, keyed by backbone parameter name.
pub type ImportanceMap<E> = BTreeMap<String, Tensor<E>>;

/// I = W: the importance of a weight is the weight itself (absolute values
/// are applied during row scoring). Covers every backbone matrix.
pub fn magnitude_importance<E: Elem>(store: &ParamStore<E>) -> ImportanceMap<E> {
    store
        .iter()
        .filter(|(name, _)| name.starts_with("backbone.") && name.ends_with(".w"))
        .map(|(name, entry)| (name.clone(), entry.tensor.clone()))
        .collect()
}

/// Empirical Fisher: the elementwise mean over samples of the squared
/// gradient of the target log-probability. Each sample runs alone so the
/// square applies per sample, not to an averaged gradient.
pub fn fisher_importance<E: Elem>(
    model: &ModelConfig,
    store: &ParamStore<E>,
    samples: &[TokenBatch],
) -> Result<ImportanceMap<E>> {
    if samples.is_empty() {
        return Err(Error::Config("fisher importance needs at least one sample".to_string()));
    }
    // Gradients with respect to frozen weights require a trainable twin.
    let mut probe: ParamStore<E> = ParamStore::new();
    for (name, entry) in store.iter() {
        if name.starts_with("backbone.") {
            probe.insert(name, entry.tensor.clone(), true, entry.owner)?;
        }
    }
    let mut acc: ImportanceMap<f64> = BTreeMap::new();
    for sample in samples {
        if sample.batch != 1 {
            return Err(Error::Input(format!(
                "fisher samples must have batch 1, got {}",
                sample.batch
            )));
        }
        let mut tape = Tape::new();
        let vars = probe.register_on(&mut tape)?;
        let out = backbone_forward(&mut tape, &vars, model, sample, Inserts::default())?;
        // Summed token cross-entropy is the negative target log-probability;
        // squaring removes the sign.
        let loss = tape.cross_entropy(out.logits, &sample.targets, Reduction::Sum)?;
        let grads = tape.backward(loss)?;
        for (name, g) in grads.iter() {
            if !name.ends_with(".w") {
                continue;
            }
            let slot = acc.entry(name.clone()).or_insert_with(|| {
                Tensor::zeros(g.shape().to_vec())
            });
            for (a, &b) in slot.data_mut().iter_mut().zip(g.data().iter()) {
                let v = b.to_f64();
                *a += v * v;
            }
        }
    }
    let n = samples.len() as f64;
    let mut out = ImportanceMap::new();
    for (name, t) in acc {
        let data: Vec<E> = t.data().iter().map(|&v| {
            E::from_f64(v / n)
        }).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite fisher importance for `{name}`")));
        }
        out.insert(name, Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Absolute row sums of a 2-D importance matrix.
pub fn row_scores<E: Elem>(imp: &Tensor<E>) -> Result<Vec<f64>> {
    let shape = imp.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "row_scores",
            detail: format!("importance must be 2-D, got {shape:?}"),
        });
    }
    let (rows, cols) = (shape[0], shape[1]);
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        for c in 0..cols {
            out[r] += imp.data()[r * cols + c].to_f64().abs();
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite row score".to_string()));
    }
    Ok(out)
}

/// Indices of the `keep` highest scores, ascending, ties keeping the lower
/// index (so r=1 returns 0..n and preserves order exactly).
pub fn top_rows(scores: &[f64], keep: usize) -> Result<Vec<usize>> {
    if keep == 0 || keep > scores.len() {
        return Err(Error::Config(format!(
            "cannot keep {keep} of {} rows",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = idx[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Top-k selection within each contiguous group (used per attention head so
/// every head keeps head_dim/r dimensions).
fn top_rows_grouped(scores: &[f64], groups: usize, keep_per_group: usize) -> Result<Vec<usize>> {
    if groups == 0 || scores.len() % groups != 0 {
        return Err(Error::Config(format!(
            "{} scores do not split into {groups} groups",
            scores.len()
        )));
    }
    let size = scores.len() / groups;
    let mut kept = Vec::with_capacity(groups * keep_per_group);
    for g in 0..groups {
        let local = top_rows(&scores[g * size..(g + 1) * size], keep_per_group)?;
        kept.extend(local.into_iter().map(|i| g * size + i));
    }
    Ok(kept)
}

fn take_rows<E: Elem>(t: &Tensor<E>, rows: &[usize]) -> Tensor<E> {
    let cols = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::new(vec![rows.len(), cols], data).expect("row count matches")
}

fn take_rows_cols<E: Elem>(t: &Tensor<E>, rows: &[usize], cols_keep: &[usize]) -> Tensor<E> {
    let cols = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * cols_keep.len());
    for &r in rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        for &c in cols_keep {
            data.push(row[c]);
        }
    }
    Tensor::new(vec![rows.len(), cols_keep.len()], data).expect("counts match")
}

fn take_vec<E: Elem>(t: &Tensor<E>, idx: &[usize]) -> Tensor<E> {
    let data: Vec<E> = idx.iter().map(|&i| t.data()[i]).collect();
    Tensor::new(vec![idx.len()], data).expect("counts match")
}

/// One linear layer of a generic prunable chain.
#[derive(Debug, Clone)]
pub struct ChainLayer<E> {
    pub w: Tensor<E>,
    pub b: Option<Tensor<E>>,
    pub imp: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct PrunedLayer<E> {
    pub w: Tensor<E>,
    pub b: Option<Tensor<E>>,
    /// Kept output-row indices of this layer.
    pub kept: Vec<usize>,
}

/// Prune a feed-forward chain: every layer keeps its top d_out/r rows (with
/// bias entries following), and the next layer drops the matching input
/// columns. `W_i` must be `[d_out_i, d_in_i]` with `d_in_{i+1} = d_out_i`.
pub fn prune_chain<E: Elem>(chain: &[ChainLayer<E>], r: usize) -> Result<Vec<PrunedLayer<E>>> {
    if r == 0 {
        return Err(Error::Config("reduction factor must be positive".to_string()));
    }
    let mut out = Vec::with_capacity(chain.len());
    let mut prev_kept: Option<Vec<usize>> = None;
    for (li, layer) in chain.iter().enumerate() {
        let shape = layer.w.shape();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "structural_prune",
                detail: format!("layer {li} weight must be 2-D, got {shape:?}"),
            });
        }
        if layer.imp.shape() != shape {
            return Err(Error::Wiring(format!(
                "layer {li}: importance shape {:?} does not match weight {shape:?}",
                layer.imp.shape()
            )));
        }
        if let Some(prev) = &prev_kept {
            let full_in = chain[li - 1].w.shape()[0];
            if shape[1] != full_in {
                return Err(Error::Wiring(format!(
                    "layer {li}: expected {full_in} input columns, got {}",
                    shape[1]
                )));
            }
            let _ = prev;
        }
        let (d_out, _) = (shape[0], shape[1]);
        if d_out % r != 0 {
            return Err(Error::Config(format!(
                "layer {li}: {d_out} output rows not divisible by r={r}"
            )));
        }
        let scores = row_scores(&layer.imp)?;
        let kept = top_rows(&scores, d_out / r)?;
        let w = match &prev_kept {
            Some(cols) => take_rows_cols(&layer.w, &kept, cols),
            None => take_rows(&layer.w, &kept),
        };
        let b = match &layer.b {
            Some(b) => {
                if b.numel() != d_out {
                    return Err(Error::Wiring(format!(
                        "layer {li}: bias has {} entries for {d_out} rows",
                        b.numel()
                    )));
                }
                Some(take_vec(b, &kept))
            }
            None => None,
        };
        prev_kept = Some(kept.clone());
        out.push(PrunedLayer { w, b, kept });
    }
    Ok(out)
}

/// Kept index sets chosen while initializing a side network.
#[derive(Debug, Clone, Default)]
pub struct PruneReport {
    /// Residual-stream kept set per stack ("enc"/"dec").
    pub stream: BTreeMap<String, Vec<usize>>,
    /// Attention-internal kept set per site prefix (e.g. "enc.3.attn").
    pub heads: BTreeMap<String, Vec<usize>>,
    /// FFN hidden kept set per layer prefix (e.g. "enc.3").
    pub ffn: BTreeMap<String, Vec<usize>>,
}

impl PruneReport {
    /// Human-readable kept-index listing, one line per set.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.stream {
            out.push_str(&format!("stream.{k} = {v:?}\n"));
        }
        for (k, v) in &self.heads {
            out.push_str(&format!("heads.{k} = {v:?}\n"));
        }
        for (k, v) in &self.ffn {
            out.push_str(&format!("ffn.{k} = {v:?}\n"));
        }
        out
    }
}

struct StackNames {
    stack: &'static str,
    self_site: &'static str,
    cross: bool,
}

/// Overwrite the side network's transformer blocks in `store` with pruned
/// backbone weights. `init_side` must have created the side entries already;
/// downsamplers, gates, and the upsampler keep their fresh initialization.
pub fn prune_init_side<E: Elem>(
    store: &mut ParamStore<E>,
    model: &ModelConfig,
    side: &SideConfig,
    imp: &ImportanceMap<E>,
) -> Result<PruneReport> {
    side.validate(model)?;
    let mut report = PruneReport::default();
    let head_keep = model.head_dim() / side.r;
    let mut stacks = vec![StackNames { stack: "enc", self_site: "attn", cross: false }];
    if model.is_enc_dec() {
        stacks.push(StackNames { stack: "dec", self_site: "self", cross: true });
    }

    // Residual-stream sets first; cross-attention K/V columns in the decoder
    // need the encoder's set.
    let mut streams: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
    for names in &stacks {
        let keep = if names.stack == "enc" { &side.keep_enc } else { &side.keep_dec };
        let mut scores = vec![0.0; model.d_model];
        for &i in keep {
            let base = format!("backbone.{}.{i}", names.stack);
            let mut add = |name: String| -> Result<()> {
                let m = imp
                    .get(&name)
                    .ok_or_else(|| Error::Wiring(format!("importance missing for `{name}`")))?;
                for (s, v) in scores.iter_mut().zip(row_scores(m)?) {
                    *s += v;
                }
                Ok(())
            };
            add(format!("{base}.{}.o.w", names.self_site))?;
            if names.cross {
                add(format!("{base}.cross.o.w"))?;
            }
            add(format!("{base}.ffn.fc2.w"))?;
        }
        let kept = top_rows(&scores, model.d_model / side.r)?;
        report.stream.insert(names.stack.to_string(), kept.clone());
        streams.insert(names.stack, kept);
    }

    for names in &stacks {
        let keep = if names.stack == "enc" { &side.keep_enc } else { &side.keep_dec };
        let stream = &streams[names.stack];
        for &i in keep {
            let bb = format!("backbone.{}.{i}", names.stack);
            let sd = format!("side.{}.{i}", names.stack);
            prune_attention_site(
                store,
                imp,
                &format!("{bb}.{}", names.self_site),
                &format!("{sd}.{}", names.self_site),
                &format!("{}.{i}.{}", names.stack, names.self_site),
                model,
                head_keep,
                stream,
                stream,
                &mut report,
            )?;
            if names.cross {
                prune_attention_site(
                    store,
                    imp,
                    &format!("{bb}.cross"),
                    &format!("{sd}.cross"),
                    &format!("{}.{i}.cross", names.stack),
                    model,
                    head_keep,
                    stream,
                    &streams["enc"],
                    &mut report,
                )?;
                copy_ln(store, &format!("{bb}.ln_cross"), &format!("{sd}.ln_cross"), stream)?;
            }
            // FFN: hidden rows scored alone, stream columns follow.
            let fc1_imp = imp
                .get(&format!("{bb}.ffn.fc1.w"))
                .ok_or_else(|| Error::Wiring(format!("importance missing for `{bb}.ffn.fc1.w`")))?;
            let ffn_kept = top_rows(&row_scores(fc1_imp)?, model.d_ff / side.r)?;
            report
                .ffn
                .insert(format!("{}.{i}", names.stack), ffn_kept.clone());
            prune_matrix(store, &format!("{bb}.ffn.fc1.w"), &format!("{sd}.ffn.fc1.w"), &ffn_kept, stream)?;
            prune_vector(store, &format!("{bb}.ffn.fc1.b"), &format!("{sd}.ffn.fc1.b"), &ffn_kept)?;
            prune_matrix(store, &format!("{bb}.ffn.fc2.w"), &format!("{sd}.ffn.fc2.w"), stream, &ffn_kept)?;
            prune_vector(store, &format!("{bb}.ffn.fc2.b"), &format!("{sd}.ffn.fc2.b"), stream)?;
            copy_ln(store, &format!("{bb}.ln1"), &format!("{sd}.ln1"), stream)?;
            copy_ln(store, &format!("{bb}.ln2"), &format!("{sd}.ln2"), stream)?;
        }
        copy_ln(
            store,
            &format!("backbone.{}.final_ln", names.stack),
            &format!("side.{}.final_ln", names.stack),
            stream,
        )?;
    }
    Ok(report)
}

/// Q/K/V rows are scored jointly per head; the output projection keeps the
/// matching columns and the stream's rows.
#[allow(clippy::too_many_arguments)]
fn prune_attention_site<E: Elem>(
    store: &mut ParamStore<E>,
    imp: &ImportanceMap<E>,
    bb: &str,
    sd: &str,
    report_key: &str,
    model: &ModelConfig,
    head_keep: usize,
    stream_q: &[usize],
    stream_kv: &[usize],
    report: &mut PruneReport,
) -> Result<()> {
    let mut scores = vec![0.0; model.d_model];
    for proj in ["q", "k", "v"] {
        let name = format!("{bb}.{proj}.w");
        let m = imp
            .get(&name)
            .ok_or_else(|| Error::Wiring(format!("importance missing for `{name}`")))?;
        for (s, v) in scores.iter_mut().zip(row_scores(m)?) {
            *s += v;
        }
    }
    let inner = top_rows_grouped(&scores, model.heads, head_keep)?;
    report.heads.insert(report_key.to_string(), inner.clone());
    for proj in ["q", "k", "v"] {
        let cols = if proj == "q" { stream_q } else { stream_kv };
        prune_matrix(store, &format!("{bb}.{proj}.w"), &format!("{sd}.{proj}.w"), &inner, cols)?;
        prune_vector(store, &format!("{bb}.{proj}.b"), &format!("{sd}.{proj}.b"), &inner)?;
    }
    prune_matrix(store, &format!("{bb}.o.w"), &format!("{sd}.o.w"), stream_q, &inner)?;
    prune_vector(store, &format!("{bb}.o.b"), &format!("{sd}.o.b"), stream_q)?;
    Ok(())
}

fn prune_matrix<E: Elem>(
    store: &mut ParamStore<E>,
    src: &str,
    dst: &str,
    rows: &[usize],
    cols: &[usize],
) -> Result<()> {
    let t = take_rows_cols(&store.get(src)?.tensor, rows, cols);
    set_pruned(store, dst, t)
}

fn prune_vector<E: Elem>(store: &mut ParamStore<E>, src: &str, dst: &str, idx: &[usize]) -> Result<()> {
    let t = take_vec(&store.get(src)?.tensor, idx);
    set_pruned(store, dst, t)
}

fn copy_ln<E: Elem>(store: &mut ParamStore<E>, bb: &str, sd: &str, stream: &[usize]) -> Result<()> {
    for part in ["gamma", "beta"] {
        prune_vector(store, &format!("{bb}.{part}"), &format!("{sd}.{part}"), stream)?;
    }
    Ok(())
}

/// Replace an existing side entry, insisting the pruned shape matches what
/// `init_side` allocated.
fn set_pruned<E: Elem>(store: &mut ParamStore<E>, name: &str, tensor: Tensor<E>) -> Result<()> {
    let entry = store.get_mut(name)?;
    if entry.tensor.shape() != tensor.shape() {
        return Err(Error::Wiring(format!(
            "pruned `{name}` has shape {:?}, expected {:?}",
            tensor.shape(),
            entry.tensor.shape()
        )));
    }
    entry.tensor = tensor;
    Ok(())
}

/// Build and initialize side parameters in one call: random keeps the fresh
/// init, magnitude and fisher overwrite blocks with pruned backbone weights.
pub fn init_side_with_strategy<E: Elem>(
    store: &mut ParamStore<E>,
    model: &ModelConfig,
    side: &SideConfig,
    strategy: InitStrategy,
    seed: u64,
    fisher_samples: Option<&[TokenBatch]>,
) -> Result<Option<PruneReport>> {
    crate::side::init_side(store, model, side, seed)?;
    match strategy {
        InitStrategy::Random => Ok(None),
        InitStrategy::Magnitude => {
            let imp = magnitude_importance(store);
            Ok(Some(prune_init_side(store, model, side, &imp)?))
        }
        InitStrategy::Fisher => {
            let samples = fisher_samples.ok_or_else(|| {
                Error::Config("fisher initialization needs sample batches".to_string())
            })?;
            let imp = fisher_importance(model, store, samples)?;
            Ok(Some(prune_init_side(store, model, side, &imp)?))
        }
    }
}

pub fn strategy_name(s: InitStrategy) -> &'static str {
    match s {
        InitStrategy::Random => "random",
        InitStrategy::Magnitude => "magnitude",
        InitStrategy::Fisher => "fisher",
    }
}

pub fn parse_strategy(s: &str) -> Result<InitStrategy> {
    match s {
        "random" => Ok(InitStrategy::Random),
        "magnitude" => Ok(InitStrategy::Magnitude),
        "fisher" => Ok(InitStrategy::Fisher),
        other => Err(Error::Config(format!(
            "unknown init strategy `{other}` (random|magnitude|fisher)"
        ))),
    }
}
