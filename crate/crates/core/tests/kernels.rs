//! Kernel values against independent loop oracles, cross-form equivalence and
//! finite-difference gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swax_core::autodiff::finite_difference_check;
use swax_core::kernels::*;
use swax_core::{Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax attention with an explicit band, one position at a time.
fn softmax_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, w: usize) -> Vec<Vec<f64>> {
    let (q, k, v) = (rows(q), rows(k), rows(v));
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    (0..q.len())
        .map(|t| {
            let lo = if t + 1 > w { t + 1 - w } else { 0 };
            let e: Vec<f64> = (lo..=t).map(|i| (inner(&q[t], &k[i]) * scale).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut y = vec![0.0; v[0].len()];
            for (j, i) in (lo..=t).enumerate() {
                for c in 0..y.len() {
                    y[c] += e[j] / z * v[i][c];
                }
            }
            y
        })
        .collect()
}

fn close(got: &Tensor<f64>, want: &[Vec<f64>], tol: f64) {
    for (g, w) in rows(got).iter().zip(want) {
        for (a, b) in g.iter().zip(w) {
            assert!((a - b).abs() < tol, "{a} vs {b}");
        }
    }
}

#[test]
fn causal_softmax_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (q, k, v) = (
        random(&mut rng, &[5, 4], -1.0, 1.0),
        random(&mut rng, &[5, 4], -1.0, 1.0),
        random(&mut rng, &[5, 3], -1.0, 1.0),
    );
    let mut tape = Tape::new();
    let b = AttentionBatch::new(
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let y = causal_softmax_attention(&mut tape, &b).unwrap();
    close(tape.value(y), &softmax_oracle(&q, &k, &v, usize::MAX), 1e-12);
}

#[test]
fn equal_keys_and_values_give_that_value() {
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = tape.constant(random(&mut rng, &[4, 2], -1.0, 1.0));
    let k = tape.constant(Tensor::from_f64(&[4, 2], &[0.3, 0.7].repeat(4)).unwrap());
    let v = tape.constant(Tensor::from_f64(&[4, 3], &[1.5, -2.0, 0.25].repeat(4)).unwrap());
    let y = causal_softmax_attention(&mut tape, &AttentionBatch::new(q, k, v)).unwrap();
    for r in rows(tape.value(y)) {
        for (a, b) in r.iter().zip([1.5, -2.0, 0.25]) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn banded_softmax_matches_masked_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (q, k, v) = (
        random(&mut rng, &[6, 4], -1.0, 1.0),
        random(&mut rng, &[6, 4], -1.0, 1.0),
        random(&mut rng, &[6, 2], -1.0, 1.0),
    );
    let mut tape = Tape::new();
    let b = AttentionBatch::new(
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let y = sliding_window_attention(&mut tape, &b, 2).unwrap();
    close(tape.value(y), &softmax_oracle(&q, &k, &v, 2), 1e-12);
}

#[test]
fn multi_head_softmax_treats_heads_independently() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (s, d, heads) = (7, 4, 3);
    let q = random(&mut rng, &[2 * s, heads * d], -1.0, 1.0);
    let k = random(&mut rng, &[2 * s, heads * d], -1.0, 1.0);
    let v = random(&mut rng, &[2 * s, heads * d], -1.0, 1.0);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let layout = HeadLayout {
        batch: 2,
        seq: s,
        heads,
    };
    let y = sliding_window_heads(&mut tape, qv, kv, vv, layout, 3).unwrap();
    let y = tape.value(y).clone();
    let slice = |t: &Tensor<f64>, b: usize, h: usize| {
        let data: Vec<f64> = (0..s)
            .flat_map(|r| t.row(b * s + r)[h * d..(h + 1) * d].to_vec())
            .collect();
        Tensor::new(vec![s, d], data).unwrap()
    };
    for b in 0..2 {
        for h in 0..heads {
            let want = softmax_oracle(&slice(&q, b, h), &slice(&k, b, h), &slice(&v, b, h), 3);
            close(&slice(&y, b, h), &want, 1e-12);
        }
    }
}

#[test]
fn rope_inner_products_depend_on_offset_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = RopeConfig::new(8);
    assert_eq!(cfg.theta, 10_000.0);
    for _ in 0..20 {
        let q = random(&mut rng, &[1, 8], -1.0, 1.0);
        let k = random(&mut rng, &[1, 8], -1.0, 1.0);
        let (m, n, c) = (
            rng.random_range(0..500usize),
            rng.random_range(0..500usize),
            rng.random_range(0..2000usize),
        );
        let mut tape = Tape::new();
        let (qv, kv) = (tape.constant(q), tape.constant(k));
        let dot_at = |tape: &mut Tape<f64>, a: usize, b: usize| {
            let rq = apply_rope(tape, qv, &[a], &cfg).unwrap();
            let rk = apply_rope(tape, kv, &[b], &cfg).unwrap();
            inner(tape.value(rq).data(), tape.value(rk).data())
        };
        let base = dot_at(&mut tape, m, n);
        let shifted = dot_at(&mut tape, m + c, n + c);
        assert!((base - shifted).abs() < 1e-6, "{base} vs {shifted}");
    }
}

/// Normalised linear attention evaluated term by term, no shared state between positions.
fn linear_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, normalised: bool) -> Vec<Vec<f64>> {
    let (q, k, v) = (rows(q), rows(k), rows(v));
    (0..q.len())
        .map(|t| {
            let mut num = vec![0.0; v[0].len()];
            let mut den = 0.0;
            for i in 0..=t {
                let s = inner(&q[t], &k[i]);
                den += s;
                for c in 0..num.len() {
                    num[c] += s * v[i][c];
                }
            }
            if normalised {
                num.iter_mut().for_each(|x| *x /= den);
            }
            num
        })
        .collect()
}

#[test]
fn parallel_linear_attention_matches_term_by_term_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (q, k, v) = (
        random(&mut rng, &[4, 2], 0.1, 1.0),
        random(&mut rng, &[4, 2], 0.1, 1.0),
        random(&mut rng, &[4, 2], -1.0, 1.0),
    );
    let mut tape = Tape::new();
    let b = AttentionBatch::new(
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let y = linear_attention_parallel(&mut tape, &b, FeatureMap::Identity).unwrap();
    close(tape.value(y), &linear_oracle(&q, &k, &v, true), 1e-10);
}

#[test]
fn feature_map_changes_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let b = AttentionBatch::new(
        tape.constant(random(&mut rng, &[4, 3], 0.1, 2.0)),
        tape.constant(random(&mut rng, &[4, 3], 0.1, 2.0)),
        tape.constant(random(&mut rng, &[4, 3], -1.0, 1.0)),
    );
    let a = linear_attention_parallel(&mut tape, &b, FeatureMap::Identity).unwrap();
    let e = linear_attention_parallel(&mut tape, &b, FeatureMap::EluPlusOne).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(e)) > 1e-3);
}

#[test]
fn recurrent_and_parallel_forms_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for s in [1, 5, 16] {
        let (q, k, v) = (
            random(&mut rng, &[s, 4], -2.0, 2.0),
            random(&mut rng, &[s, 4], -2.0, 2.0),
            random(&mut rng, &[s, 3], -1.0, 1.0),
        );
        let mut tape = Tape::new();
        let b = AttentionBatch::new(
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let par = linear_attention_parallel(&mut tape, &b, FeatureMap::EluPlusOne).unwrap();
        let (rec, state) =
            linear_attention_recurrent(&mut tape, &b, FeatureMap::EluPlusOne, LinearAttentionState::zeros(4, 3))
                .unwrap();
        assert!(tape.value(par).max_abs_diff(tape.value(rec)) < 1e-10);
        assert!(state.z.data().iter().all(|&z| z > 0.0));

        let mut t32 = Tape::<f32>::new();
        let b32 = AttentionBatch::new(t32.constant(q.cast()), t32.constant(k.cast()), t32.constant(v.cast()));
        let par = linear_attention_parallel(&mut t32, &b32, FeatureMap::EluPlusOne).unwrap();
        let (rec, _) = linear_attention_recurrent(
            &mut t32,
            &b32,
            FeatureMap::EluPlusOne,
            LinearAttentionState::zeros(4, 3),
        )
        .unwrap();
        assert!(t32.value(par).max_abs_diff(t32.value(rec)) < 1e-5);
    }
}

#[test]
fn recurrent_scan_continues_across_chunks() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (q, k, v) = (
        random(&mut rng, &[10, 3], -1.0, 1.0),
        random(&mut rng, &[10, 3], -1.0, 1.0),
        random(&mut rng, &[10, 2], -1.0, 1.0),
    );
    let mut whole = LinearAttentionState::zeros(3, 2);
    let full = whole
        .scan(FeatureMap::EluPlusOne, q.data(), k.data(), v.data())
        .unwrap();
    let mut split = LinearAttentionState::zeros(3, 2);
    let mut parts = split
        .scan(FeatureMap::EluPlusOne, &q.data()[..12], &k.data()[..12], &v.data()[..8])
        .unwrap();
    parts.extend(
        split
            .scan(FeatureMap::EluPlusOne, &q.data()[12..], &k.data()[12..], &v.data()[8..])
            .unwrap(),
    );
    assert_eq!(full, parts);
    assert_eq!(whole, split);
}

/// Per-step gated recurrence written without any kernel code.
fn gla_oracle(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    alpha: &Tensor<f64>,
    beta: &Tensor<f64>,
    lambda: &Tensor<f64>,
) -> Vec<Vec<f64>> {
    let (q, k, v) = (rows(q), rows(k), rows(v));
    let (a, b, l) = (rows(alpha), rows(beta), rows(lambda));
    let (dk, dv) = (q[0].len(), v[0].len());
    let pick = |g: &Vec<f64>, i: usize| if g.len() == 1 { g[0] } else { g[i] };
    let mut h = vec![vec![0.0; dv]; dk];
    let mut out = Vec::new();
    for t in 0..q.len() {
        for i in 0..dk {
            for j in 0..dv {
                h[i][j] = pick(&l[t], i) * h[i][j] + pick(&a[t], i) * k[t][i] * v[t][j];
            }
        }
        let y: Vec<f64> = (0..dv)
            .map(|j| (0..dk).map(|i| pick(&b[t], i) * q[t][i] * h[i][j]).sum())
            .collect();
        out.push(y);
    }
    out
}

#[test]
fn gla_matches_independent_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for g in [1, 3] {
        let (q, k, v) = (
            random(&mut rng, &[8, 3], -1.0, 1.0),
            random(&mut rng, &[8, 3], -1.0, 1.0),
            random(&mut rng, &[8, 2], -1.0, 1.0),
        );
        let gates: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, &[8, g], 0.0, 1.0)).collect();
        let mut tape = Tape::new();
        let b = AttentionBatch::new(
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let gs = GateSequence {
            alpha: tape.constant(gates[0].clone()),
            beta: tape.constant(gates[1].clone()),
            lambda: tape.constant(gates[2].clone()),
        };
        let (y, _) =
            gated_linear_attention_recurrent(&mut tape, &b, FeatureMap::Identity, &gs, Tensor::zeros(&[3, 2])).unwrap();
        close(
            tape.value(y),
            &gla_oracle(&q, &k, &v, &gates[0], &gates[1], &gates[2]),
            1e-10,
        );
    }
}

#[test]
fn gla_with_open_gates_is_unnormalised_linear_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (q, k, v) = (
        random(&mut rng, &[12, 4], -1.0, 1.0),
        random(&mut rng, &[12, 4], -1.0, 1.0),
        random(&mut rng, &[12, 3], -1.0, 1.0),
    );
    let mut tape = Tape::new();
    let b = AttentionBatch::new(
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let ones = tape.constant(Tensor::full(&[12, 4], 1.0));
    let gs = GateSequence {
        alpha: ones,
        beta: ones,
        lambda: ones,
    };
    let (y, _) =
        gated_linear_attention_recurrent(&mut tape, &b, FeatureMap::Identity, &gs, Tensor::zeros(&[4, 3])).unwrap();
    close(tape.value(y), &linear_oracle(&q, &k, &v, false), 1e-6);
}

#[test]
fn gla_continuation_matches_single_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = 9;
    let data: Vec<Tensor<f64>> = [[s, 2], [s, 2], [s, 3], [s, 2], [s, 2], [s, 2]]
        .iter()
        .enumerate()
        .map(|(i, shape)| random(&mut rng, shape, if i >= 3 { 0.0 } else { -1.0 }, 1.0))
        .collect();
    let run = |lo: usize, hi: usize, state: Tensor<f64>| {
        let cut = |t: &Tensor<f64>| {
            let c = t.cols();
            Tensor::new(vec![hi - lo, c], t.data()[lo * c..hi * c].to_vec()).unwrap()
        };
        let mut tape = Tape::new();
        let vars: Vec<_> = data.iter().map(|t| tape.constant(cut(t))).collect();
        let b = AttentionBatch::new(vars[0], vars[1], vars[2]);
        let gs = GateSequence {
            alpha: vars[3],
            beta: vars[4],
            lambda: vars[5],
        };
        let (y, h) = gated_linear_attention_recurrent(&mut tape, &b, FeatureMap::Identity, &gs, state).unwrap();
        (tape.value(y).data().to_vec(), h)
    };
    let (full, h_full) = run(0, s, Tensor::zeros(&[2, 3]));
    let (mut first, h_mid) = run(0, 4, Tensor::zeros(&[2, 3]));
    let (second, h_end) = run(4, s, h_mid);
    first.extend(second);
    assert_eq!(full, first);
    assert_eq!(h_full, h_end);
}

// ---------------------------------------------------------------------------
// Gradients

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Weighted sum so every output coordinate carries a distinct upstream gradient.
fn weighted(tape: &mut Tape<f64>, y: swax_core::Var, seed: u64) -> swax_core::Result<swax_core::Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn softmax_kernels_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let layout = HeadLayout {
        batch: 2,
        seq: 5,
        heads: 2,
    };
    let params = vec![
        random(&mut rng, &[10, 6], -1.0, 1.0),
        random(&mut rng, &[10, 6], -1.0, 1.0),
        random(&mut rng, &[10, 4], -1.0, 1.0),
    ];
    for w in [1, 2, 5] {
        let err = finite_difference_check(
            |tape, p| {
                let y = sliding_window_heads(tape, p[0], p[1], p[2], layout, w)?;
                weighted(tape, y, 1)
            },
            &params,
            H,
        )
        .unwrap();
        assert!(err < TOL, "window {w}: {err}");
    }
}

#[test]
fn rope_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = RopeConfig::new(4);
    let err = finite_difference_check(
        |tape, p| {
            let y = rope_heads(tape, p[0], &[0, 3, 17], &cfg)?;
            weighted(tape, y, 2)
        },
        &[random(&mut rng, &[3, 8], -1.0, 1.0)],
        H,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn linear_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let layout = HeadLayout {
        batch: 2,
        seq: 4,
        heads: 2,
    };
    let params = vec![
        random(&mut rng, &[8, 6], 0.2, 1.0),
        random(&mut rng, &[8, 6], 0.2, 1.0),
        random(&mut rng, &[8, 4], -1.0, 1.0),
    ];
    // The first read of each scan is v_0 whatever q_0 is, so dq_0 is exactly
    // zero and the relative error there is pure finite-difference noise. A
    // linear term in every input keeps those coordinates away from zero.
    let anchored = |tape: &mut Tape<f64>, y, p: &[swax_core::Var]| {
        let mut loss = weighted(tape, y, 3)?;
        for (i, &x) in p.iter().enumerate() {
            let term = weighted(tape, x, 30 + i as u64)?;
            loss = tape.add(loss, term)?;
        }
        Ok(loss)
    };
    let par = finite_difference_check(
        |tape, p| {
            let y = linear_attention_parallel_heads(tape, p[0], p[1], p[2], layout)?;
            anchored(tape, y, p)
        },
        &params,
        H,
    )
    .unwrap();
    let rec = finite_difference_check(
        |tape, p| {
            let (y, _) = linear_attention_recurrent_heads(tape, p[0], p[1], p[2], layout, None)?;
            anchored(tape, y, p)
        },
        &params,
        H,
    )
    .unwrap();
    assert!(par < TOL, "parallel {par}");
    assert!(rec < TOL, "recurrent {rec}");

    let single = finite_difference_check(
        |tape, p| {
            let b = AttentionBatch::new(p[0], p[1], p[2]);
            let y = linear_attention_parallel(tape, &b, FeatureMap::EluPlusOne)?;
            anchored(tape, y, p)
        },
        &[
            random(&mut rng, &[5, 3], -1.0, 1.0),
            random(&mut rng, &[5, 3], -1.0, 1.0),
            random(&mut rng, &[5, 2], -1.0, 1.0),
        ],
        H,
    )
    .unwrap();
    assert!(single < TOL, "elu+1 {single}");
}

#[test]
fn gla_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let layout = HeadLayout {
        batch: 2,
        seq: 5,
        heads: 2,
    };
    for g in [1, 3] {
        let mut params = vec![
            random(&mut rng, &[10, 6], -1.0, 1.0),
            random(&mut rng, &[10, 6], -1.0, 1.0),
            random(&mut rng, &[10, 4], -1.0, 1.0),
        ];
        for _ in 0..3 {
            params.push(random(&mut rng, &[10, 2 * g], 0.05, 0.95));
        }
        let init: Vec<Tensor<f64>> = (0..4).map(|_| random(&mut rng, &[3, 2], -1.0, 1.0)).collect();
        for initial in [None, Some(&init[..])] {
            let err = finite_difference_check(
                |tape, p| {
                    let gates = GateSequence {
                        alpha: p[3],
                        beta: p[4],
                        lambda: p[5],
                    };
                    let (y, _) = gated_linear_attention(tape, p[0], p[1], p[2], &gates, layout, initial)?;
                    weighted(tape, y, 5)
                },
                &params,
                H,
            )
            .unwrap();
            assert!(err < TOL, "gate width {g}: {err}");
        }
    }
}
