//! Every differentiable op is checked against central differences in f64.
//! The loss is a fixed-weight sum of the op's output so each output element
//! gets a distinct cotangent.

use laddertune::gradcheck::{check, GradCheckConfig};
use laddertune::params::{ParamStore, VarMap};
use laddertune::tape::{Reduction, Tape, Var};
use laddertune::tensor::Tensor;
use laddertune::{Owner, Result};

fn weights(n: usize) -> Vec<f64> {
    // Deterministic, non-uniform, sign-mixed.
    (0..n)
        .map(|i| {
            let x = ((i * 2654435761 + 12345) % 1000) as f64 / 500.0 - 1.0;
            0.3 + 0.7 * x
        })
        .collect()
}

fn weighted_sum(t: &mut Tape<f64>, v: Var) -> Result<Var> {
    let n = t.numel(v);
    let shape = t.shape(v).to_vec();
    let w = t.input(&weights(n), &shape)?;
    let prod = t.mul(v, w)?;
    t.sum_all(prod)
}

fn values(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let u = ((i * 1103515245 + 987) % 997) as f64 / 996.0;
            lo + (hi - lo) * u
        })
        .collect()
}

fn fd_max_rel<F>(params: &[(&str, Vec<usize>, Vec<f64>)], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &VarMap) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (name, shape, data) in params {
        store
            .insert(name, Tensor::new(shape.clone(), data.clone()).unwrap(), true, Owner::Other)
            .unwrap();
    }
    let cfg = GradCheckConfig {
        samples_per_param: 48,
        ..GradCheckConfig::default()
    };
    let report = check(&mut store, &cfg, |st, need| {
        let mut tape: Tape<f64> = Tape::new();
        let vars = st.register_on(&mut tape)?;
        let loss = build(&mut tape, &vars)?;
        let l = tape.value(loss)[0];
        if need {
            Ok((l, Some(tape.backward(loss)?)))
        } else {
            Ok((l, None))
        }
    })
    .unwrap();
    report.max_rel
}

const TOL: f64 = 1e-6;

#[test]
fn matmul_grad() {
    let p = vec![
        ("a", vec![3, 4], values(12, -1.0, 1.0)),
        ("b", vec![4, 2], values(8, -1.0, 1.0)),
    ];
    let err = fd_max_rel(&p, |t, v| {
        let y = t.matmul(v["a"], v["b"], false)?;
        weighted_sum(t, y)
    });
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn matmul_trans_b_grad() {
    let p = vec![
        ("a", vec![3, 4], values(12, -1.0, 1.0)),
        ("b", vec![2, 4], values(8, -1.0, 1.0)),
    ];
    let err = fd_max_rel(&p, |t, v| {
        let y = t.matmul(v["a"], v["b"], true)?;
        weighted_sum(t, y)
    });
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn bmm_grad_both_layouts() {
    for trans_b in [false, true] {
        let p = vec![
            ("a", vec![2, 3, 4], values(24, -1.0, 1.0)),
            ("b", if trans_b { vec![2, 2, 4] } else { vec![2, 4, 2] }, values(16, -1.0, 1.0)),
        ];
        let err = fd_max_rel(&p, |t, v| {
            let y = t.bmm(v["a"], v["b"], trans_b)?;
            weighted_sum(t, y)
        });
        assert!(err < TOL, "trans_b={trans_b}: max rel err {err}");
    }
}

#[test]
fn add_and_mul_grad() {
    let p = vec![
        ("a", vec![2, 3], values(6, -1.0, 1.0)),
        ("b", vec![2, 3], values(6, -1.0, 1.0)),
    ];
    let err = fd_max_rel(&p, |t, v| {
        let s = t.add(v["a"], v["b"])?;
        let m = t.mul(s, v["b"])?;
        weighted_sum(t, m)
    });
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn add_bias_grad() {
    let p = vec![
        ("x", vec![2, 2, 3], values(12, -1.0, 1.0)),
        ("bias", vec![3], values(3, -0.5, 0.5)),
    ];
    let err = fd_max_rel(&p, |t, v| {
        let y = t.add_bias(v["x"], v["bias"])?;
        weighted_sum(t, y)
    });
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn add_rows_grad() {
    let p = vec![
        ("x", vec![2, 3, 2], values(12, -1.0, 1.0)),
        ("pos", vec![3, 2], values(6, -0.5, 0.5)),
    ];
    let err = fd_max_rel(&p, |t, v| {
        let y = t.add_rows(v["x"], v["pos"])?;
        weighted_sum(t, y)
    });
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn broadcast_rows_grad() {
    let p = vec![("prompt", vec![3, 2], values(6, -1.0, 1.0))];
    let err = fd_max_rel(&p, |t, v| {
        let y = t.broadcast_rows(v["prompt"], 4)?;
        weighted_sum(t, y)
    });
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn gate_chain_grad() {
    // alpha -> scale -> sigmoid -> mul_scalar_t / one_minus: the fused-gate path.
    let p = vec![
        ("alpha", vec![1], vec![0.07]),
        ("a", vec![2, 3], values(6, -1.0, 1.0)),
        ("b", vec![2, 3], values(6, -1.0, 1.0)),
    ];
    let err = fd_max_rel(&p, |t, v| {
        let pre = t.scale(v["alpha"], 10.0)?;
        let mu = t.sigmoid(pre)?;
        let left = t.mul_scalar_t(mu, v["a"])?;
        let inv = t.one_minus(mu)?;
        let right = t.mul_scalar_t(inv, v["b"])?;
        let fused = t.add(left, right)?;
        weighted_sum(t, fused)
    });
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn concat_and_slice_grad() {
    let p = vec![
        ("a", vec![2, 2], values(4, -1.0, 1.0)),
        ("b", vec![2, 3], values(6, -1.0, 1.0)),
    ];
    let err = fd_max_rel(&p, |t, v| {
        let c = t.concat(v["a"], v["b"], 1)?;
        let s = t.slice(c, 1, 1, 3)?;
        weighted_sum(t, s)
    });
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn embedding_grad() {
    let p = vec![("table", vec![5, 3], values(15, -1.0, 1.0))];
    let err = fd_max_rel(&p, |t, v| {
        let y = t.embedding(v["table"], &[4, 0, 4, 2], &[2, 2])?;
        weighted_sum(t, y)
    });
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn softmax_grad() {
    let p = vec![("x", vec![3, 4], values(12, -2.0, 2.0))];
    let err = fd_max_rel(&p, |t, v| {
        let y = t.softmax(v["x"])?;
        weighted_sum(t, y)
    });
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn layer_norm_grad() {
    let p = vec![
        ("x", vec![3, 4], values(12, -2.0, 2.0)),
        ("gamma", vec![4], values(4, 0.5, 1.5)),
        ("beta", vec![4], values(4, -0.3, 0.3)),
    ];
    let err = fd_max_rel(&p, |t, v| {
        let y = t.layer_norm(v["x"], v["gamma"], v["beta"], 1e-5)?;
        weighted_sum(t, y)
    });
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn activation_grads() {
    // Values kept away from the relu kink so the subgradient is clean.
    let data = vec![-1.4, -0.8, 0.6, 1.7, -0.3, 0.9];
    let p = vec![("x", vec![2, 3], data)];
    for act in ["relu", "gelu", "sigmoid"] {
        let err = fd_max_rel(&p, |t, v| {
            let y = match act {
                "relu" => t.relu(v["x"])?,
                "gelu" => t.gelu(v["x"])?,
                _ => t.sigmoid(v["x"])?,
            };
            weighted_sum(t, y)
        });
        assert!(err < TOL, "{act}: max rel err {err}");
    }
}

#[test]
fn cross_entropy_grad_mean_and_sum() {
    for reduction in [Reduction::Mean, Reduction::Sum] {
        let p = vec![("logits", vec![4, 5], values(20, -2.0, 2.0))];
        let err = fd_max_rel(&p, |t, v| t.cross_entropy(v["logits"], &[1, 4, 0, 2], reduction));
        assert!(err < TOL, "{reduction:?}: max rel err {err}");
    }
}

#[test]
fn mse_grad_both_sides() {
    let p = vec![
        ("pred", vec![2, 3], values(6, -1.0, 1.0)),
        ("target", vec![2, 3], values(6, -1.0, 1.0)),
    ];
    let err = fd_max_rel(&p, |t, v| t.mse(v["pred"], v["target"]));
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn reshape_split_merge_grad() {
    let p = vec![("x", vec![2, 2, 4], values(16, -1.0, 1.0))];
    let err = fd_max_rel(&p, |t, v| {
        let s = t.split_heads(v["x"], 2)?;
        let m = t.merge_heads(s, 2)?;
        let r = t.reshape(m, &[4, 4])?;
        weighted_sum(t, r)
    });
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn masked_attention_grad() {
    // Composite: scores -> causal mask -> softmax -> context bmm.
    let p = vec![
        ("q", vec![2, 3, 2], values(12, -1.0, 1.0)),
        ("k", vec![2, 3, 2], values(12, -1.0, 1.0)),
        ("v", vec![2, 3, 2], values(12, -1.0, 1.0)),
    ];
    let err = fd_max_rel(&p, |t, vars| {
        let scores = t.bmm(vars["q"], vars["k"], true)?;
        let scaled = t.scale(scores, 1.0 / (2.0f64).sqrt())?;
        let masked = t.causal_mask(scaled)?;
        let probs = t.softmax(masked)?;
        let ctx = t.bmm(probs, vars["v"], false)?;
        weighted_sum(t, ctx)
    });
    assert!(err < TOL, "max rel err {err}");
}
