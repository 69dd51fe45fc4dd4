use proptest::prelude::*;

use crate::backbone::{backbone_forward, init_backbone, Inserts, ModelConfig, TokenBatch};
use crate::params::ParamStore;
use crate::side::*;
use crate::tape::{Owner, Reduction, Tape};

fn mu_of(alpha: f64, t: f64) -> f64 {
    let mut tape: Tape<f64> = Tape::new();
    let gate = tape.leaf(&[alpha], &[1], true).unwrap();
    let one = tape.leaf(&[1.0], &[1], false).unwrap();
    let zero = tape.leaf(&[0.0], &[1], false).unwrap();
    let out = fuse(&mut tape, gate, one, zero, t).unwrap();
    tape.value(out)[0]
}

#[test]
fn fuse_matches_scalar_oracles() {
    // Zero-init gate mixes evenly.
    let mut tape: Tape<f64> = Tape::new();
    let gate = tape.leaf(&[0.0], &[1], true).unwrap();
    let hf = tape.leaf(&[2.0], &[1], false).unwrap();
    let hg = tape.leaf(&[4.0], &[1], false).unwrap();
    let out = fuse(&mut tape, gate, hf, hg, 0.1).unwrap();
    assert_eq!(tape.value(out), &[3.0]);
    // Saturated gate passes the ladder branch through.
    assert!((1.0 - mu_of(10.0, 0.1)).abs() <= 1e-10);
    // Temperature sharpens: alpha=0.1 at T=0.1 is sigmoid(1).
    assert!((mu_of(0.1, 0.1) - 0.731_058_578_630_004_9).abs() < 1e-15);
}

#[test]
fn fuse_rejects_bad_inputs() {
    let mut tape: Tape<f64> = Tape::new();
    let gate = tape.leaf(&[0.0], &[1], true).unwrap();
    let a = tape.leaf(&[1.0, 2.0], &[2], false).unwrap();
    let b = tape.leaf(&[1.0, 2.0], &[2], false).unwrap();
    assert!(fuse(&mut tape, gate, a, b, 0.0).is_err());
    assert!(fuse(&mut tape, gate, a, b, -1.0).is_err());
    let short = tape.leaf(&[1.0], &[1], false).unwrap();
    assert!(fuse(&mut tape, gate, a, short, 0.1).is_err());
    assert!(fuse(&mut tape, a, a, b, 0.1).is_err(), "vector gate accepted");
}

proptest! {
    #[test]
    fn gate_stays_in_unit_interval(alpha in -2.0f64..2.0) {
        let mu = mu_of(alpha, 0.1);
        prop_assert!(mu > 0.0 && mu < 1.0);
    }

    #[test]
    fn gate_is_monotone(a in -40.0f64..40.0, b in -40.0f64..40.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(mu_of(lo, 0.1) <= mu_of(hi, 0.1));
    }
}

#[test]
fn interleaved_keep_matches_convention() {
    assert_eq!(interleaved_keep(12, 6).unwrap(), vec![2, 4, 6, 8, 10, 12]);
    assert_eq!(interleaved_keep(12, 9).unwrap(), vec![1, 2, 3, 5, 6, 7, 9, 10, 11]);
    assert_eq!(interleaved_keep(12, 12).unwrap(), (1..=12).collect::<Vec<_>>());
    assert_eq!(interleaved_keep(6, 3).unwrap(), vec![2, 4, 6]);
    assert_eq!(interleaved_keep(6, 2).unwrap(), vec![3, 6]);
    assert!(interleaved_keep(12, 0).is_err());
    assert!(interleaved_keep(12, 13).is_err());
    assert!(interleaved_keep(12, 5).is_err(), "12 % 7 dropped layers has no stride");
}

#[test]
fn drop_layers_validates() {
    let model = ModelConfig::tiny();
    let side = SideConfig::full(&model, 2);
    assert!(side.drop_layers(vec![], vec![1]).is_err());
    assert!(side.drop_layers(vec![2, 1], vec![1]).is_err());
    let kept = side.drop_layers(vec![2], vec![1, 2]).unwrap();
    assert_eq!(kept.keep_enc, vec![2]);
    kept.validate(&model).unwrap();
    // Keeping everything reproduces the original config.
    let all = side.drop_layers(vec![1, 2], vec![1, 2]).unwrap();
    assert_eq!(all.keep_enc, side.keep_enc);
    assert_eq!(all.keep_dec, side.keep_dec);
}

#[test]
fn side_config_rejections() {
    let model = ModelConfig::tiny(); // d=8, H=2, d_ff=16
    let mut side = SideConfig::full(&model, 2);
    side.validate(&model).unwrap();
    side.r = 0;
    assert!(side.validate(&model).is_err());
    side.r = 3; // 8 % 3 != 0
    assert!(side.validate(&model).is_err());
    side.r = 8; // width 1 not divisible by 2 heads
    assert!(side.validate(&model).is_err());
    side = SideConfig::full(&model, 2);
    side.temperature = 0.0;
    assert!(side.validate(&model).is_err());
    side = SideConfig::full(&model, 2);
    side.keep_enc = vec![1, 3];
    assert!(side.validate(&model).is_err(), "index beyond L accepted");
    side = SideConfig::full(&model, 2);
    side.keep_dec.clear();
    assert!(side.validate(&model).is_err(), "empty decoder keep on enc-dec accepted");
    let mut enc_only = model.clone();
    enc_only.arch = crate::backbone::Arch::Encoder;
    let side = SideConfig::full(&enc_only, 2);
    assert!(side.keep_dec.is_empty());
    side.validate(&enc_only).unwrap();
    let mut bad = side.clone();
    bad.keep_dec = vec![1];
    assert!(bad.validate(&enc_only).is_err());
}

fn lst_store(model: &ModelConfig, side: &SideConfig) -> ParamStore<f64> {
    let mut store: ParamStore<f64> = init_backbone(model).unwrap();
    store.freeze_all();
    init_side(&mut store, model, side, 99).unwrap();
    store
}

fn tiny_batch(model: &ModelConfig) -> TokenBatch {
    TokenBatch {
        batch: 2,
        src_len: 5,
        src: (0..10).map(|i| (i % model.vocab) as u32).collect(),
        tgt_len: 4,
        dec: Some((0..8).map(|i| ((i + 2) % model.vocab) as u32).collect()),
        targets: (0..8).map(|i| ((i + 1) % model.vocab) as u32).collect(),
    }
}

#[test]
fn ladder_forward_and_isolation() {
    let model = ModelConfig::tiny();
    let side = SideConfig::full(&model, 2);
    let store = lst_store(&model, &side);
    let batch = tiny_batch(&model);
    let mut tape = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    let out = backbone_forward(&mut tape, &vars, &model, &batch, Inserts::default()).unwrap();
    let logits = side_ladder_forward(&mut tape, &vars, &model, &side, &out.taps).unwrap();
    assert_eq!(tape.shape(logits), &[2, 4, model.vocab]);
    for v in tape.value(logits) {
        assert!(v.is_finite());
    }
    let loss = tape.cross_entropy(logits, &batch.targets, Reduction::Mean).unwrap();
    let grads = tape.backward(loss).unwrap();
    // No backward path may touch the trunk.
    assert!(grads.names().all(|n| !n.starts_with("backbone.")));
    // Every trainable side parameter gets a gradient.
    for (name, entry) in store.iter() {
        if entry.trainable {
            assert!(grads.contains(name), "missing gradient for {name}");
        }
    }
    // With a zero upsampler the side path cannot move the head yet, but
    // gradients still reach the upsampler itself.
    let up = grads.get("side.upsample.w").unwrap();
    assert!(up.data().iter().any(|&g| g != 0.0));
}

#[test]
fn ladder_retention_accounting() {
    let model = ModelConfig::tiny();
    let side = SideConfig::full(&model, 2);
    let store = lst_store(&model, &side);
    let batch = tiny_batch(&model);
    let mut tape = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    let out = backbone_forward(&mut tape, &vars, &model, &batch, Inserts::default()).unwrap();
    side_ladder_forward(&mut tape, &vars, &model, &side, &out.taps).unwrap();
    let report = tape.retained();
    // Frozen trunk saves nothing under its own scope.
    let bb = report.by_owner.get(&Owner::Backbone).cloned().unwrap_or_default();
    assert_eq!(bb.total(), 0);
    // Each consumed tap is full-width memory: one per kept layer plus the
    // embedding tap, per stack, in f64.
    let w = 8u64;
    let d = model.d_model as u64;
    let enc_tokens = (batch.batch * batch.src_len) as u64;
    let dec_tokens = (batch.batch * batch.tgt_len) as u64;
    let expect_taps = (side.keep_enc.len() as u64 + 1) * enc_tokens * d * w
        + (side.keep_dec.len() as u64 + 1) * dec_tokens * d * w;
    let ladder = report.by_owner.get(&Owner::Ladder).cloned().unwrap_or_default();
    assert_eq!(ladder.ladder_taps, expect_taps);
    // Side blocks retain under the side owner, none of it tap-classified.
    let side_bytes = report.by_owner.get(&Owner::Side).cloned().unwrap_or_default();
    assert!(side_bytes.input_activations > 0);
    assert!(side_bytes.derivatives > 0);
    assert_eq!(side_bytes.ladder_taps, 0);
    // Grouped report and raw record sum agree.
    assert_eq!(report.total_bytes(), tape.saved_record_bytes());
}

#[test]
fn side_blocks_scale_inverse_r_squared() {
    let model = ModelConfig::toy();
    for r in [2, 4, 8] {
        let side = SideConfig::full(&model, r);
        let store = lst_store(&model, &side);
        let is_block_w = |n: &str| {
            n.ends_with(".w")
                && [".attn.", ".self.", ".cross.", ".ffn."].iter().any(|s| n.contains(s))
        };
        let bb: usize = store
            .iter()
            .filter(|(n, _)| n.starts_with("backbone.") && is_block_w(n))
            .map(|(_, e)| e.tensor.numel())
            .sum();
        let sd: usize = store
            .iter()
            .filter(|(n, _)| n.starts_with("side.") && is_block_w(n))
            .map(|(_, e)| e.tensor.numel())
            .sum();
        assert_eq!(sd * r * r, bb, "r={r}: side block weights not backbone/r^2");
    }
}

#[test]
fn standalone_arms_run_and_check_wiring() {
    let model = ModelConfig::tiny();
    let mut comp = SideConfig::full(&model, 2);
    comp.mode = SideMode::Compression;
    let store = lst_store(&model, &comp);
    assert!(!store.contains("side.enc.1.down.w"), "compression arm has no ladders");
    assert!(!store.contains("side.final_gate"));
    let batch = tiny_batch(&model);
    let mut tape = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    let logits = side_standalone_forward(&mut tape, &vars, &model, &comp, &batch, None).unwrap();
    assert_eq!(tape.shape(logits), &[2, 4, model.vocab]);
    // Backbone layers never ran; the only tap-classified bytes are the two
    // embedding feeds (the upsampler's input is a plain side activation).
    let report = tape.retained();
    let ladder = report.by_owner.get(&Owner::Ladder).cloned().unwrap_or_default();
    let w = 8u64;
    let d = model.d_model as u64;
    let embed_feeds = (batch.batch * (batch.src_len + batch.tgt_len)) as u64 * d * w;
    assert_eq!(ladder.ladder_taps, embed_feeds);
    let dr = (model.d_model / comp.r) as u64;
    let upsample_input = (batch.batch * batch.tgt_len) as u64 * dr * w;
    assert_eq!(ladder.input_activations, upsample_input);

    let mut st = SideConfig::full(&model, 2);
    st.mode = SideMode::SideTuning;
    let store = lst_store(&model, &st);
    assert!(store.contains("side.final_gate"));
    let mut tape = Tape::new();
    let vars = store.register_on(&mut tape).unwrap();
    let out = backbone_forward(&mut tape, &vars, &model, &batch, Inserts::default()).unwrap();
    let logits =
        side_standalone_forward(&mut tape, &vars, &model, &st, &batch, Some(out.final_hidden))
            .unwrap();
    assert_eq!(tape.shape(logits), &[2, 4, model.vocab]);
    // Arm/argument mismatches are wiring errors.
    let mut tape2 = Tape::new();
    let vars2 = store.register_on(&mut tape2).unwrap();
    assert!(side_standalone_forward(&mut tape2, &vars2, &model, &st, &batch, None).is_err());
    let out2 = backbone_forward(&mut tape2, &vars2, &model, &batch, Inserts::default()).unwrap();
    assert!(
        side_standalone_forward(&mut tape2, &vars2, &model, &comp, &batch, Some(out2.final_hidden))
            .is_err()
    );
    let ladder_cfg = SideConfig::full(&model, 2);
    assert!(side_standalone_forward(&mut tape2, &vars2, &model, &ladder_cfg, &batch, None).is_err());
    assert!(side_ladder_forward(&mut tape2, &vars2, &model, &st, &out2.taps).is_err());
}

#[test]
fn dropped_layers_shrink_params_and_memory() {
    let model = ModelConfig::toy();
    let full = SideConfig::full(&model, 4);
    let half = full
        .drop_layers(
            interleaved_keep(model.layers, 3).unwrap(),
            interleaved_keep(model.layers, 3).unwrap(),
        )
        .unwrap();
    let store_full = lst_store(&model, &full);
    let store_half = lst_store(&model, &half);
    let trainable = |s: &ParamStore<f64>| s.trainable_params();
    assert!(trainable(&store_half) < trainable(&store_full));

    let batch = TokenBatch {
        batch: 4,
        src_len: 8,
        src: (0..32).map(|i| (i % model.vocab) as u32).collect(),
        tgt_len: 8,
        dec: Some((0..32).map(|i| ((i + 1) % model.vocab) as u32).collect()),
        targets: (0..32).map(|i| ((i + 2) % model.vocab) as u32).collect(),
    };
    let retained = |store: &ParamStore<f64>, side: &SideConfig| {
        let mut tape = Tape::new();
        let vars = store.register_on(&mut tape).unwrap();
        let out = backbone_forward(&mut tape, &vars, &model, &batch, Inserts::default()).unwrap();
        side_ladder_forward(&mut tape, &vars, &model, side, &out.taps).unwrap();
        tape.retained().total_bytes()
    };
    let full_bytes = retained(&store_full, &full);
    let half_bytes = retained(&store_half, &half);
    assert!(
        (half_bytes as f64) < 0.7 * full_bytes as f64,
        "dropping half the side layers saved only {full_bytes} -> {half_bytes}"
    );
}
