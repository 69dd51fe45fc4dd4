use crate::backbone::*;
use crate::params::ParamStore;
use crate::tape::{Owner, Tape};
use crate::tensor::Tensor;

fn demo_batch(cfg: &ModelConfig, batch: usize) -> TokenBatch {
    let src_len = cfg.max_seq.min(5);
    let tgt_len = src_len.saturating_sub(1).max(1);
    let src: Vec<u32> = (0..batch * src_len).map(|i| (i % cfg.vocab) as u32).collect();
    let dec: Vec<u32> = (0..batch * tgt_len).map(|i| ((i + 3) % cfg.vocab) as u32).collect();
    let targets: Vec<u32> = (0..batch * tgt_len).map(|i| ((i + 5) % cfg.vocab) as u32).collect();
    TokenBatch {
        batch,
        src_len,
        src,
        tgt_len,
        dec: Some(dec),
        targets,
    }
}

fn forward_logits(cfg: &ModelConfig, store: &ParamStore<f64>, batch: &TokenBatch) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    let out = backbone_forward(&mut tape, &vars, cfg, batch, Inserts::default()).unwrap();
    tape.value(out.logits).to_vec()
}

#[test]
fn init_is_deterministic() {
    let cfg = ModelConfig::tiny();
    let a: ParamStore<f64> = init_backbone(&cfg).unwrap();
    let b: ParamStore<f64> = init_backbone(&cfg).unwrap();
    assert_eq!(a.len(), b.len());
    for (name, ea) in a.iter() {
        let eb = b.get(name).unwrap();
        assert_eq!(ea.tensor.data(), eb.tensor.data(), "mismatch at {name}");
    }
    let mut other = cfg.clone();
    other.seed = 11;
    let c: ParamStore<f64> = init_backbone(&other).unwrap();
    let emb_a = a.get("backbone.embedding").unwrap();
    let emb_c = c.get("backbone.embedding").unwrap();
    assert_ne!(emb_a.tensor.data(), emb_c.tensor.data());
}

#[test]
fn config_invariants() {
    assert_eq!(ModelConfig::tiny().head_dim(), 4);
    let mut bad = ModelConfig::tiny();
    bad.d_model = 7;
    assert!(bad.validate().is_err());
    bad = ModelConfig::tiny();
    bad.layers = 0;
    assert!(bad.validate().is_err());
    bad = ModelConfig::tiny();
    bad.vocab = 1;
    assert!(bad.validate().is_err());
}

#[test]
fn forward_shapes_and_taps() {
    let cfg = ModelConfig::tiny();
    let store: ParamStore<f64> = init_backbone(&cfg).unwrap();
    let batch = demo_batch(&cfg, 2);
    let mut tape = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    let out = backbone_forward(&mut tape, &vars, &cfg, &batch, Inserts::default()).unwrap();
    assert_eq!(tape.shape(out.logits), &[2, batch.tgt_len, cfg.vocab]);
    assert_eq!(tape.shape(out.final_hidden), &[2, batch.tgt_len, cfg.d_model]);
    assert_eq!(out.taps.enc.len(), cfg.layers + 1);
    assert_eq!(out.taps.dec.len(), cfg.layers + 1);
    assert_eq!(tape.shape(out.taps.enc[0]), &[2, batch.src_len, cfg.d_model]);
    assert_eq!(tape.shape(out.taps.dec[cfg.layers]), &[2, batch.tgt_len, cfg.d_model]);
    for v in tape.value(out.logits) {
        assert!(v.is_finite());
    }
}

#[test]
fn encoder_only_shapes() {
    let mut cfg = ModelConfig::tiny();
    cfg.arch = Arch::Encoder;
    cfg.causal_encoder = true;
    let store: ParamStore<f64> = init_backbone(&cfg).unwrap();
    assert!(!store.contains("backbone.pos_dec"));
    assert!(!store.contains("backbone.dec.1.ln1.gamma"));
    let src: Vec<u32> = vec![1, 2, 3, 4, 5, 6];
    let batch = TokenBatch {
        batch: 2,
        src_len: 3,
        src,
        tgt_len: 3,
        dec: None,
        targets: vec![0; 6],
    };
    let mut tape = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    let out = backbone_forward(&mut tape, &vars, &cfg, &batch, Inserts::default()).unwrap();
    assert_eq!(tape.shape(out.logits), &[2, 3, cfg.vocab]);
    assert!(out.taps.dec.is_empty());
}

#[test]
fn rows_are_independent() {
    let cfg = ModelConfig::tiny();
    let store: ParamStore<f64> = init_backbone(&cfg).unwrap();
    let row_src: Vec<u32> = vec![1, 2, 3, 4, 5];
    let row_dec: Vec<u32> = vec![0, 1, 2, 3];
    let mut batch = TokenBatch {
        batch: 2,
        src_len: 5,
        src: [row_src.clone(), row_src].concat(),
        tgt_len: 4,
        dec: Some([row_dec.clone(), row_dec].concat()),
        targets: vec![0; 8],
    };
    let logits = forward_logits(&cfg, &store, &batch);
    let half = logits.len() / 2;
    assert_eq!(&logits[..half], &logits[half..], "identical rows diverged");
    // Changing row 1 must not affect row 0.
    batch.src[5] = 9;
    batch.dec.as_mut().unwrap()[4] = 7;
    let logits2 = forward_logits(&cfg, &store, &batch);
    assert_eq!(&logits[..half], &logits2[..half]);
    assert_ne!(&logits[half..], &logits2[half..]);
}

#[test]
fn decoder_is_causal() {
    let cfg = ModelConfig::tiny();
    let store: ParamStore<f64> = init_backbone(&cfg).unwrap();
    let mut batch = TokenBatch {
        batch: 1,
        src_len: 5,
        src: vec![1, 2, 3, 4, 5],
        tgt_len: 4,
        dec: Some(vec![0, 1, 2, 3]),
        targets: vec![0; 4],
    };
    let base = forward_logits(&cfg, &store, &batch);
    batch.dec.as_mut().unwrap()[3] = 9;
    let perturbed = forward_logits(&cfg, &store, &batch);
    let v = cfg.vocab;
    assert_eq!(&base[..3 * v], &perturbed[..3 * v], "past positions saw the future");
    assert_ne!(&base[3 * v..], &perturbed[3 * v..]);
}

#[test]
fn causal_encoder_hides_future() {
    let mut cfg = ModelConfig::tiny();
    cfg.arch = Arch::Encoder;
    cfg.causal_encoder = true;
    let store: ParamStore<f64> = init_backbone(&cfg).unwrap();
    let mut batch = TokenBatch {
        batch: 1,
        src_len: 4,
        src: vec![1, 2, 3, 4],
        tgt_len: 4,
        dec: None,
        targets: vec![0; 4],
    };
    let base = forward_logits(&cfg, &store, &batch);
    batch.src[3] = 8;
    let perturbed = forward_logits(&cfg, &store, &batch);
    let v = cfg.vocab;
    assert_eq!(&base[..3 * v], &perturbed[..3 * v]);
    assert_ne!(&base[3 * v..], &perturbed[3 * v..]);
}

#[test]
fn frozen_backbone_retains_nothing() {
    let cfg = ModelConfig::tiny();
    let mut store: ParamStore<f64> = init_backbone(&cfg).unwrap();
    store.freeze_all();
    let batch = demo_batch(&cfg, 2);
    let mut tape = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    backbone_forward(&mut tape, &vars, &cfg, &batch, Inserts::default()).unwrap();
    assert_eq!(tape.saved_record_bytes(), 0);
}

#[test]
fn oversized_sequence_rejected() {
    let cfg = ModelConfig::tiny();
    let store: ParamStore<f64> = init_backbone(&cfg).unwrap();
    let n = cfg.max_seq + 1;
    let batch = TokenBatch {
        batch: 1,
        src_len: n,
        src: vec![0; n],
        tgt_len: 1,
        dec: Some(vec![0]),
        targets: vec![0],
    };
    let mut tape = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    assert!(backbone_forward(&mut tape, &vars, &cfg, &batch, Inserts::default()).is_err());
}

#[test]
fn prompt_prepends_without_shifting_positions() {
    let mut cfg = ModelConfig::tiny();
    cfg.arch = Arch::Encoder;
    cfg.causal_encoder = false;
    let mut store: ParamStore<f64> = init_backbone(&cfg).unwrap();
    let batch = TokenBatch {
        batch: 2,
        src_len: 4,
        src: vec![1, 2, 3, 4, 5, 6, 7, 8],
        tgt_len: 4,
        dec: None,
        targets: vec![0; 8],
    };
    let base = forward_logits(&cfg, &store, &batch);

    let p = 2;
    store
        .insert(
            "prompt.vectors",
            Tensor::new(vec![p, cfg.d_model], vec![0.3; p * cfg.d_model]).unwrap(),
            true,
            Owner::Inserted,
        )
        .unwrap();
    let mut tape = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    let inserts = Inserts { prompt: Some(p), ..Inserts::default() };
    let out = backbone_forward(&mut tape, &vars, &cfg, &batch, inserts).unwrap();
    // Prompt block joins the sequence axis but scored positions stay per-token.
    assert_eq!(tape.shape(out.taps.enc[0]), &[2, p + 4, cfg.d_model]);
    assert_eq!(tape.shape(out.logits), &[2, 4, cfg.vocab]);
    assert_ne!(tape.value(out.logits), &base[..], "prompt had no effect");
}

#[test]
fn zeroed_lora_and_adapter_are_identity() {
    let cfg = ModelConfig::tiny();
    let mut store: ParamStore<f64> = init_backbone(&cfg).unwrap();
    let batch = demo_batch(&cfg, 2);
    let base = forward_logits(&cfg, &store, &batch);

    // LoRA with B = 0 leaves projections untouched bit-for-bit.
    let k = 2;
    for stack in ["enc", "dec"] {
        for i in 1..=cfg.layers {
            let site = if stack == "enc" { "attn" } else { "self" };
            for proj in ["lora_q", "lora_v"] {
                let name = format!("insert.{stack}.{i}.{site}.{proj}");
                store
                    .insert(
                        &format!("{name}.a"),
                        Tensor::new(vec![k, cfg.d_model], vec![0.5; k * cfg.d_model]).unwrap(),
                        true,
                        Owner::Inserted,
                    )
                    .unwrap();
                store
                    .insert(
                        &format!("{name}.b"),
                        Tensor::zeros(vec![cfg.d_model, k]),
                        true,
                        Owner::Inserted,
                    )
                    .unwrap();
            }
        }
    }
    let mut tape = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    let inserts = Inserts { lora: true, ..Inserts::default() };
    let out = backbone_forward(&mut tape, &vars, &cfg, &batch, inserts).unwrap();
    assert_eq!(tape.value(out.logits), &base[..]);

    // Adapter with up = 0 is the identity as well.
    let h = 3;
    let mut store2: ParamStore<f64> = init_backbone(&cfg).unwrap();
    for i in 1..=cfg.layers {
        for site in ["attn_adapter", "ffn_adapter"] {
            let pre = format!("insert.enc.{i}.{site}");
            store2
                .insert(
                    &format!("{pre}.down.w"),
                    Tensor::new(vec![h, cfg.d_model], vec![0.2; h * cfg.d_model]).unwrap(),
                    true,
                    Owner::Inserted,
                )
                .unwrap();
            store2
                .insert(&format!("{pre}.down.b"), Tensor::zeros(vec![h]), true, Owner::Inserted)
                .unwrap();
            store2
                .insert(
                    &format!("{pre}.up.w"),
                    Tensor::zeros(vec![cfg.d_model, h]),
                    true,
                    Owner::Inserted,
                )
                .unwrap();
            store2
                .insert(&format!("{pre}.up.b"), Tensor::zeros(vec![cfg.d_model]), true, Owner::Inserted)
                .unwrap();
        }
    }
    let mut tape = Tape::new();
    let vars = store2.register_on(&mut tape).unwrap();
    let inserts = Inserts { adapter: true, ..Inserts::default() };
    let out = backbone_forward(&mut tape, &vars, &cfg, &batch, inserts).unwrap();
    assert_eq!(tape.value(out.logits), &base[..]);
}
