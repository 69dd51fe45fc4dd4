use std::collections::BTreeSet;

use crate::backbone::{init_backbone, ModelConfig, TokenBatch};
use crate::params::ParamStore;
use crate::petl::*;
use crate::side::{SideConfig, SideMode};
use crate::tape::{Reduction, Tape};

fn batch_for(model: &ModelConfig) -> TokenBatch {
    if model.is_enc_dec() {
        TokenBatch {
            batch: 2,
            src_len: 4,
            src: vec![1, 2, 3, 4, 4, 3, 2, 1],
            tgt_len: 3,
            dec: Some(vec![0, 1, 2, 0, 4, 3]),
            targets: vec![1, 2, 3, 4, 3, 2],
        }
    } else {
        TokenBatch {
            batch: 2,
            src_len: 4,
            src: vec![1, 2, 3, 4, 4, 3, 2, 1],
            tgt_len: 4,
            dec: None,
            targets: vec![2, 3, 4, 5, 5, 4, 3, 2],
        }
    }
}

/// Forward + backward one batch; returns (logit values, grad names, retained bytes).
fn run_step(
    store: &ParamStore<f64>,
    model: &ModelConfig,
    cfg: &MethodConfig,
) -> (Vec<f64>, BTreeSet<String>, u64) {
    let batch = batch_for(model);
    let mut tape: Tape<f64> = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    let logits = method_forward(&mut tape, &vars, model, cfg, &batch).unwrap();
    let loss = tape.cross_entropy(logits, &batch.targets, Reduction::Mean).unwrap();
    let grads = tape.backward(loss).unwrap();
    let names: BTreeSet<String> = grads.names().cloned().collect();
    (tape.value(logits).to_vec(), names, tape.saved_record_bytes())
}

fn applied(model: &ModelConfig, cfg: &MethodConfig) -> ParamStore<f64> {
    let mut store: ParamStore<f64> = init_backbone(model).unwrap();
    apply_method(&mut store, model, cfg, 11).unwrap();
    store
}

fn trainable_set(store: &ParamStore<f64>) -> BTreeSet<String> {
    store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.clone())
        .collect()
}

#[test]
fn method_parsing_round_trips() {
    for m in ALL_METHODS {
        assert_eq!(parse_method(method_name(m)).unwrap(), m);
    }
    assert!(parse_method("ladder").is_err());
}

#[test]
fn full_trains_exactly_the_backbone() {
    let model = ModelConfig::tiny();
    let store = applied(&model, &MethodConfig::new(Method::Full));
    let declared = trainable_set(&store);
    assert!(declared.iter().all(|n| n.starts_with("backbone.")));
    assert_eq!(declared.len(), store.len());
    let (_, grads, _) = run_step(&store, &model, &MethodConfig::new(Method::Full));
    assert_eq!(grads, declared, "gradient keys must equal the declared trainable set");
}

#[test]
fn adapter_is_identity_at_init_and_trains_inserts_plus_layer_norms() {
    let model = ModelConfig::tiny();
    let frozen: ParamStore<f64> = {
        let mut s = init_backbone(&model).unwrap();
        s.freeze_all();
        s
    };
    let mut base_cfg = MethodConfig::new(Method::Full);
    base_cfg.method = Method::Bitfit; // any trunk-only method gives plain logits
    let (base_logits, _, _) = run_step(&frozen, &model, &MethodConfig::new(Method::Bitfit));

    let mut cfg = MethodConfig::new(Method::Adapter);
    cfg.adapter_h = 3;
    let store = applied(&model, &cfg);
    let (logits, grads, _) = run_step(&store, &model, &cfg);
    assert_eq!(logits, base_logits, "zero-initialized up projections must be transparent");

    let declared = trainable_set(&store);
    assert_eq!(grads, declared);
    for n in &declared {
        let inserted = n.starts_with("insert.") && n.contains("_adapter.");
        let ln = n.starts_with("backbone.") && (n.ends_with(".gamma") || n.ends_with(".beta"));
        assert!(inserted || ln, "unexpected trainable `{n}`");
    }
    // Encoder layer: attn + ffn adapters. Decoder layer: self + cross + ffn.
    let per_site = 4; // down.w down.b up.w up.b
    let expected = model.layers * (2 + 3) * per_site;
    assert_eq!(declared.iter().filter(|n| n.starts_with("insert.")).count(), expected);
    let _ = base_cfg;
}

#[test]
fn lora_is_identity_at_init_and_trains_only_ab_pairs() {
    let model = ModelConfig::tiny();
    let mut fs = init_backbone(&model).unwrap();
    fs.freeze_all();
    let (base_logits, _, _) = run_step(&fs, &model, &MethodConfig::new(Method::Bitfit));
    let mut cfg = MethodConfig::new(Method::Lora);
    cfg.lora_k = 2;
    let store = applied(&model, &cfg);
    let (logits, grads, _) = run_step(&store, &model, &cfg);
    assert_eq!(logits, base_logits, "B=0 makes the low-rank delta vanish");
    let declared = trainable_set(&store);
    assert_eq!(grads, declared);
    for n in &declared {
        assert!(n.contains(".lora_q.") || n.contains(".lora_v."), "unexpected trainable `{n}`");
    }
    // q and v pairs at every attention site: enc attn + dec self + dec cross.
    assert_eq!(declared.len(), model.layers * 3 * 2 * 2);
    // A is [k, d], B is [d, k].
    let a = &store.get("insert.enc.1.attn.lora_q.a").unwrap().tensor;
    assert_eq!(a.shape(), &[2, model.d_model]);
    let b = &store.get("insert.enc.1.attn.lora_q.b").unwrap().tensor;
    assert!(b.data().iter().all(|&v| v == 0.0));
}

#[test]
fn bitfit_census_matches_closed_form() {
    for model in [ModelConfig::tiny(), ModelConfig::toy()] {
        let store = applied(&model, &MethodConfig::new(Method::Bitfit));
        let (d, dff, l) = (model.d_model, model.d_ff, model.layers);
        // Encoder layer: q,k,v,o biases (4d) + fc1 (dff) + fc2 (d) + two betas (2d).
        let enc = l * (7 * d + dff);
        // Decoder adds a cross-attention site (4d) and its norm beta (d).
        let dec = if model.is_enc_dec() { l * (12 * d + dff) } else { 0 };
        let finals = if model.is_enc_dec() { 2 * d } else { d };
        let expected = enc + dec + finals;
        assert_eq!(store.trainable_params(), expected);
        let frac = store.trainable_fraction();
        assert!((frac - expected as f64 / store.total_params() as f64).abs() < 1e-12);
        let (_, grads, _) = run_step(&store, &model, &MethodConfig::new(Method::Bitfit));
        assert_eq!(grads, trainable_set(&store));
    }
}

#[test]
fn prompt_rows_copy_the_embedding_and_only_they_train() {
    let model = ModelConfig::tiny();
    let mut cfg = MethodConfig::new(Method::Prompt);
    cfg.prompt_len = 2;
    let store = applied(&model, &cfg);
    let vectors = &store.get("prompt.vectors").unwrap().tensor;
    let emb = &store.get("backbone.embedding").unwrap().tensor;
    assert_eq!(vectors.shape(), &[2, model.d_model]);
    assert_eq!(vectors.data(), &emb.data()[..2 * model.d_model]);
    let (_, grads, _) = run_step(&store, &model, &cfg);
    assert_eq!(grads.iter().collect::<Vec<_>>(), vec!["prompt.vectors"]);

    // Encoder-only scoring slices the prompt back off: logits cover src only.
    let mut enc = model.clone();
    enc.arch = crate::backbone::Arch::Encoder;
    let store = applied(&enc, &cfg);
    let batch = batch_for(&enc);
    let mut tape: Tape<f64> = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    let logits = method_forward(&mut tape, &vars, &enc, &cfg, &batch).unwrap();
    assert_eq!(tape.shape(logits), &[2, batch.src_len, enc.vocab]);
}

#[test]
fn lst_dispatch_touches_only_side_parameters() {
    let model = ModelConfig::tiny();
    let side = SideConfig::full(&model, 2);
    let cfg = MethodConfig::lst(side);
    let store = applied(&model, &cfg);
    let (_, grads, _) = run_step(&store, &model, &cfg);
    assert!(!grads.is_empty());
    assert!(grads.iter().all(|n| n.starts_with("side.")));
    assert_eq!(grads, trainable_set(&store));

    for mode in [SideMode::Compression, SideMode::SideTuning] {
        let mut side = SideConfig::full(&model, 2);
        side.mode = mode;
        let cfg = MethodConfig::lst(side);
        let store = applied(&model, &cfg);
        let (_, grads, _) = run_step(&store, &model, &cfg);
        assert!(grads.iter().all(|n| n.starts_with("side.")));
        assert_eq!(
            store.contains("side.final_gate"),
            mode == SideMode::SideTuning,
            "final gate exists exactly in the side-tuning arm"
        );
    }
}

#[test]
fn method_configs_validate() {
    let model = ModelConfig::tiny();
    let mut cfg = MethodConfig::new(Method::Adapter);
    cfg.adapter_h = 0;
    assert!(cfg.validate(&model).is_err());
    let mut cfg = MethodConfig::new(Method::Prompt);
    cfg.prompt_len = model.max_seq;
    assert!(cfg.validate(&model).is_err());
    let mut cfg = MethodConfig::new(Method::Lora);
    cfg.lora_k = model.d_model + 1;
    assert!(cfg.validate(&model).is_err());
    assert!(MethodConfig::new(Method::Lst).validate(&model).is_err());
    let mut cfg = MethodConfig::new(Method::Full);
    cfg.freeze_prefix = 2 * model.layers + 1;
    assert!(cfg.validate(&model).is_err());
    // Reapplying over an insert-bearing method is rejected.
    let mut cfg = MethodConfig::new(Method::Adapter);
    cfg.adapter_h = 2;
    let mut store = applied(&model, &cfg);
    assert!(apply_method(&mut store, &model, &MethodConfig::new(Method::Full), 0).is_err());
}

#[test]
fn freeze_prefix_walks_encoder_then_decoder() {
    let model = ModelConfig::tiny(); // 2 encoder + 2 decoder layers
    let mut cfg = MethodConfig::new(Method::Adapter);
    cfg.adapter_h = 2;

    let baseline = applied(&model, &cfg);
    cfg.freeze_prefix = 0;
    let same = applied(&model, &cfg);
    assert_eq!(trainable_set(&baseline), trainable_set(&same));

    cfg.freeze_prefix = model.layers; // all encoder layers
    let store = applied(&model, &cfg);
    assert!(store.names().all(|n| !n.starts_with("insert.enc.")));
    assert!(store.names().any(|n| n.starts_with("insert.dec.")));
    let tr = trainable_set(&store);
    assert!(tr.iter().all(|n| !n.starts_with("backbone.enc.1.") && !n.starts_with("backbone.enc.2.")));
    assert!(tr.contains("backbone.dec.1.ln1.gamma"));
    // Stack-level final norms are not per-layer; the encoder one stays trainable.
    assert!(tr.contains("backbone.enc.final_ln.gamma"));

    cfg.freeze_prefix = 2 * model.layers;
    let store = applied(&model, &cfg);
    assert!(store.names().all(|n| !n.starts_with("insert.")));
}

#[test]
fn freeze_prefix_strictly_shrinks_retained_bytes() {
    let model = ModelConfig::tiny();
    let mut bytes = Vec::new();
    for n in [0, model.layers, 2 * model.layers] {
        let mut cfg = MethodConfig::new(Method::Adapter);
        cfg.adapter_h = 2;
        cfg.freeze_prefix = n;
        let store = applied(&model, &cfg);
        let (_, _, b) = run_step(&store, &model, &cfg);
        bytes.push(b);
    }
    assert!(bytes[0] > bytes[1] && bytes[1] > bytes[2], "retained bytes {bytes:?} not decreasing");
}
