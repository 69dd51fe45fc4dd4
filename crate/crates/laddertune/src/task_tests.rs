use crate::backbone::Arch;
use crate::task::*;

fn spec(task: Task) -> TaskSpec {
    TaskSpec::new(task, 16, 6, 11)
}

#[test]
fn reserved_token_ids_are_stable() {
    assert_eq!(CUE_COPY, 0);
    assert_eq!(CUE_REVERSE, 1);
    assert_eq!(LEAD_COPY, 2);
    assert_eq!(LEAD_REVERSE, 3);
    assert_eq!(BOS, 4);
    assert_eq!(PAYLOAD_BASE, 5);
}

#[test]
fn parsing_round_trips() {
    for t in ALL_TASKS {
        assert_eq!(parse_task(task_name(t)).unwrap(), t);
    }
    assert!(parse_task("sort").is_err());
    assert!(is_seq2seq(Task::Copy));
    assert!(is_seq2seq(Task::Cued));
    assert!(!is_seq2seq(Task::Parity));
    assert!(!is_seq2seq(Task::CharLm));
}

#[test]
fn spec_validation_rejects_degenerate_setups() {
    assert!(TaskSpec::new(Task::Copy, 6, 6, 0).validate().is_err());
    assert!(TaskSpec::new(Task::Copy, 7, 6, 0).validate().is_ok());
    assert!(TaskSpec::new(Task::Copy, 16, 1, 0).validate().is_err());
    assert!(TaskSpec::new(Task::Parity, 16, 1, 0).validate().is_ok());
    assert!(sample_batch(&spec(Task::Copy), 0, 0).is_err());
}

#[test]
fn model_validation_checks_family_and_capacity() {
    let s = spec(Task::Copy);
    let m = s.model_for(2, 8, 2, 16, 8, 1);
    assert_eq!(m.arch, Arch::EncoderDecoder);
    assert!(!m.causal_encoder);
    s.validate_for(&m).unwrap();

    let p = spec(Task::Parity);
    let mp = p.model_for(2, 8, 2, 16, 8, 1);
    assert_eq!(mp.arch, Arch::Encoder);
    assert!(mp.causal_encoder);
    p.validate_for(&mp).unwrap();

    assert!(s.validate_for(&mp).is_err());
    assert!(p.validate_for(&m).is_err());
    let mut small = m.clone();
    small.vocab = 8;
    assert!(s.validate_for(&small).is_err());
    let mut short = m.clone();
    short.max_seq = 4;
    assert!(s.validate_for(&short).is_err());
    let mut acausal = mp.clone();
    acausal.causal_encoder = false;
    assert!(p.validate_for(&acausal).is_err());
}

#[test]
fn sample_batch_is_deterministic_per_stream() {
    for task in ALL_TASKS {
        let s = spec(task);
        let a = sample_batch(&s, 3, 9).unwrap();
        let b = sample_batch(&s, 3, 9).unwrap();
        assert_eq!(a.src, b.src);
        assert_eq!(a.dec, b.dec);
        assert_eq!(a.targets, b.targets);
        let c = sample_batch(&s, 3, 10).unwrap();
        assert_ne!(a.src, c.src, "{}: streams must be independent", task_name(task));
        let mut reseeded = s.clone();
        reseeded.seed = 12;
        let d = sample_batch(&reseeded, 3, 9).unwrap();
        assert_ne!(a.src, d.src);
    }
}

#[test]
fn copy_and_reverse_transform_the_payload() {
    for (task, lead, rev) in [(Task::Copy, LEAD_COPY, false), (Task::Reverse, LEAD_REVERSE, true)] {
        let s = spec(task);
        let b = sample_batch(&s, 4, 0).unwrap();
        assert_eq!(b.src_len, 6);
        assert_eq!(b.tgt_len, 5);
        assert_eq!(b.src.len(), 4 * 6);
        assert_eq!(b.targets.len(), 4 * 5);
        let dec = b.dec.as_ref().unwrap();
        assert_eq!(dec.len(), 4 * 5);
        for i in 0..4 {
            let src = &b.src[i * 6..(i + 1) * 6];
            let tgt = &b.targets[i * 5..(i + 1) * 5];
            let din = &dec[i * 5..(i + 1) * 5];
            assert_eq!(src[0], lead);
            let mut want: Vec<u32> = src[1..].to_vec();
            if rev {
                want.reverse();
            }
            assert_eq!(tgt, &want[..]);
            assert_eq!(din[0], BOS);
            assert_eq!(&din[1..], &tgt[..4]);
            assert!(src[1..].iter().all(|&t| (PAYLOAD_BASE..16).contains(&t)));
        }
    }
}

#[test]
fn cued_batches_mix_both_modes() {
    let s = spec(Task::Cued);
    let b = sample_batch(&s, 32, 1).unwrap();
    let mut saw = [false, false];
    for i in 0..32 {
        let src = &b.src[i * 6..(i + 1) * 6];
        let tgt = &b.targets[i * 5..(i + 1) * 5];
        let mut want: Vec<u32> = src[1..].to_vec();
        match src[0] {
            CUE_COPY => saw[0] = true,
            CUE_REVERSE => {
                saw[1] = true;
                want.reverse();
            }
            other => panic!("unexpected cue {other}"),
        }
        assert_eq!(tgt, &want[..]);
    }
    assert!(saw[0] && saw[1], "32 cued rows should show both modes");
}

#[test]
fn parity_targets_follow_the_running_xor() {
    let s = spec(Task::Parity);
    let b = sample_batch(&s, 5, 2).unwrap();
    assert!(b.dec.is_none());
    assert_eq!(b.tgt_len, 6);
    for i in 0..5 {
        let src = &b.src[i * 6..(i + 1) * 6];
        let tgt = &b.targets[i * 6..(i + 1) * 6];
        let mut parity = 0u32;
        for (t, &tok) in src.iter().enumerate() {
            assert!((PAYLOAD_BASE..16).contains(&tok));
            if (tok - PAYLOAD_BASE) % 2 == 1 {
                parity ^= 1;
            }
            assert_eq!(tgt[t], parity);
        }
    }
}

#[test]
fn char_lm_rows_are_periodic_next_token_streams() {
    let s = TaskSpec::new(Task::CharLm, 16, 9, 3);
    let b = sample_batch(&s, 6, 4).unwrap();
    assert!(b.dec.is_none());
    for i in 0..6 {
        let src = &b.src[i * 9..(i + 1) * 9];
        let tgt = &b.targets[i * 9..(i + 1) * 9];
        assert_eq!(&tgt[..8], &src[1..], "targets shift the motif by one");
        let period = (2..=4)
            .find(|&p| (0..9).all(|t| src[t] == src[t % p]))
            .expect("row should repeat with period 2..=4");
        assert_eq!(tgt[8], src[(9) % period]);
    }
}

#[test]
fn eval_streams_sit_outside_the_step_range() {
    assert!(eval_stream(0) > 1 << 39);
    let s = spec(Task::Copy);
    let train = sample_batch(&s, 2, 1999).unwrap();
    let eval = sample_batch(&s, 2, eval_stream(0)).unwrap();
    assert_ne!(train.src, eval.src);
}
