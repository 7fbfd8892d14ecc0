use headlrp::fixtures::{random_model, random_sentence, rng, tiny_config};
use headlrp::lrp::{init_relevance, propagate, propagate_from, PropagationOptions};
use headlrp::model::{Model, Target};
use headlrp::Tensor;
use proptest::prelude::*;

#[test]
fn zero_classifier_row_gives_zero_relevance() {
    let model = random_model(tiny_config(2, 2, 8, 12, 8, 2), 1);
    let mut w = model.weights().clone();
    let d = model.config().hidden_dim;
    for j in 0..d {
        w.head_weight.set(j, 1, 0.0);
    }
    let model = Model::new(model.config().clone(), w).unwrap();
    let trace = model.forward(&[0, 4, 5, 1]).unwrap();
    let state = propagate(&model, &trace, Target::Class(1)).unwrap();
    for layer in &state.layers[1..] {
        for p in &layer.parts {
            assert!(p.data().iter().all(|&v| v == 0.0), "{}", layer.label);
        }
    }
    for h in &state.head_relevance {
        assert!(h.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn deepest_block_carries_unit_relevance() {
    let model = random_model(tiny_config(3, 2, 8, 12, 10, 3), 2);
    let mut r = rng(2);
    let ids = random_sentence(model.config(), 6, &mut r);
    let trace = model.forward(&ids).unwrap();
    let state = propagate(&model, &trace, Target::Class(2)).unwrap();
    assert!((state.deepest().sum() - 1.0).abs() < 1e-5);
    assert!(state.max_conservation_error() < 1e-6);
    assert_eq!(state.head_relevance.len(), 3);
    assert_eq!(state.head_relevance[0].shape(), &[2, ids.len(), ids.len()]);
}

#[test]
fn qa_targets_propagate() {
    let mut cfg = tiny_config(2, 2, 8, 12, 10, 2);
    cfg.task = headlrp::model::Task::Qa;
    let model = random_model(cfg, 3);
    let trace = model.forward(&[0, 5, 6, 1, 7, 8, 9, 1]).unwrap();
    for target in [Target::Start(5), Target::End(6)] {
        let state = propagate(&model, &trace, target).unwrap();
        assert!((state.deepest().sum() - 1.0).abs() < 1e-5);
        assert!(state.max_conservation_error() < 1e-6);
    }
}

#[test]
fn head_gate_keeps_conservation_and_zeroes_gated_heads() {
    let model = random_model(tiny_config(2, 2, 8, 12, 8, 2), 4);
    let trace = model.forward(&[0, 4, 5, 6, 1]).unwrap();
    let gate = vec![vec![true, false], vec![false, true]];
    let r0 = init_relevance(0, 2).unwrap();
    let state = propagate_from(
        &model,
        &trace,
        Target::Class(0),
        r0,
        PropagationOptions {
            head_gate: Some(&gate),
        },
    )
    .unwrap();
    assert!(state.max_conservation_error() < 1e-6);
    assert!(state.head_relevance[0].slab(1).data().iter().all(|&v| v == 0.0));
    assert!(state.head_relevance[1].slab(0).data().iter().all(|&v| v == 0.0));
}

#[test]
fn propagation_is_homogeneous() {
    let model = random_model(tiny_config(2, 2, 8, 12, 8, 2), 5);
    let trace = model.forward(&[0, 4, 5, 6, 1]).unwrap();
    let base = propagate(&model, &trace, Target::Class(1)).unwrap();
    let s = 3.5;
    let scaled = propagate_from(
        &model,
        &trace,
        Target::Class(1),
        init_relevance(1, 2).unwrap().scale(s),
        PropagationOptions::default(),
    )
    .unwrap();
    for (a, b) in base.layers.iter().zip(&scaled.layers) {
        for (pa, pb) in a.parts.iter().zip(&b.parts) {
            for (x, y) in pa.data().iter().zip(pb.data()) {
                assert!((x * s - y).abs() <= 1e-9 * (1.0 + y.abs()), "{}", a.label);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Hand-unrolled oracle for a 1-block, 1-head, d = 2, T = 2 encoder.
// ---------------------------------------------------------------------------

const EPS: f64 = 1e-9;

fn stab(z: f64) -> f64 {
    if z >= 0.0 {
        z + EPS
    } else {
        z - EPS
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[t.shape().len() - 1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn pos_rule(x: &[f64], w: &[Vec<f64>], r: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..r.len() {
        let mut den = 0.0;
        for j in 0..x.len() {
            if x[j] * w[j][i] >= 0.0 {
                den += x[j] * w[j][i];
            }
        }
        for j in 0..x.len() {
            if x[j] * w[j][i] >= 0.0 {
                out[j] += x[j] * w[j][i] / stab(den) * r[i];
            }
        }
    }
    out
}

fn rescale(v: &mut [Vec<f64>], to: f64) {
    let s: f64 = v.iter().flatten().sum();
    if s == 0.0 {
        return;
    }
    for x in v.iter_mut().flatten() {
        *x *= to / s;
    }
}

fn total(v: &[Vec<f64>]) -> f64 {
    v.iter().flatten().sum()
}

fn add_split(a: &[Vec<f64>], b: &[Vec<f64>], r: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut ra = a.to_vec();
    let mut rb = b.to_vec();
    for i in 0..a.len() {
        for j in 0..a[0].len() {
            let z = stab(a[i][j] + b[i][j]);
            ra[i][j] = a[i][j] * r[i][j] / z;
            rb[i][j] = b[i][j] * r[i][j] / z;
        }
    }
    let (sa, sb, sr) = (total(&ra), total(&rb), total(r));
    for (v, s) in [(&mut ra, sa), (&mut rb, sb)] {
        for x in v.iter_mut().flatten() {
            *x = if s == 0.0 { 0.0 } else { *x * s.abs() / (sa.abs() + sb.abs()) * sr / s };
        }
    }
    (ra, rb)
}

fn linear_rows(x: &[Vec<f64>], w: &[Vec<f64>], r: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = x.iter().zip(r).map(|(xr, rr)| pos_rule(xr, w, rr)).collect();
    rescale(&mut out, total(r));
    out
}

/// Taylor rule for L = X·Y returning the X share, halved, before the joint rescale.
fn taylor_x(x: &[Vec<f64>], y: &[Vec<f64>], r: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let (t, k, c) = (x.len(), y.len(), y[0].len());
    let mut rx = vec![vec![0.0; k]; t];
    let mut both = 0.0;
    for i in 0..t {
        for col in 0..c {
            let l: f64 = (0..k).map(|p| x[i][p] * y[p][col]).sum();
            for p in 0..k {
                let contrib = x[i][p] * y[p][col] * r[i][col] / stab(l);
                rx[i][p] += 0.5 * contrib;
                both += contrib;
            }
        }
    }
    (rx, both)
}

fn tiny_block_model(seed: u64) -> Model {
    let mut cfg = tiny_config(1, 1, 2, 6, 4, 2);
    cfg.ffn_dim = 2;
    random_model(cfg, seed)
}

#[test]
fn head_relevance_matches_hand_unrolled_rules() {
    for seed in [21, 22, 23] {
        let model = tiny_block_model(seed);
        let trace = model.forward(&[0, 4]).unwrap();
        let bt = &trace.blocks()[0];
        let w = model.weights();
        let bw = &w.blocks[0];
        let c = 1;

        // classifier: cls row only
        let out = rows(&bt.output);
        let head = rows(&w.head_weight);
        let mut r_cls = pos_rule(&out[0], &head, &[0.0, 1.0]);
        let s: f64 = r_cls.iter().sum();
        r_cls.iter_mut().for_each(|v| *v /= s);
        let r_top = vec![r_cls, vec![0.0, 0.0]];

        // second residual + FFN
        let (r_h1_res, r_f2) = add_split(&rows(&bt.hidden1), &rows(&bt.ffn_out), &r_top);
        let r_g = linear_rows(&rows(&bt.ffn_act), &rows(&bw.w2), &r_f2);
        let r_h1_ffn = linear_rows(&rows(&bt.hidden1), &rows(&bw.w1), &r_g);
        let r_h1: Vec<Vec<f64>> = r_h1_res
            .iter()
            .zip(&r_h1_ffn)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();

        // first residual + output projection
        let (_, r_attn) = add_split(&rows(&bt.input), &rows(&bt.attn_out), &r_h1);
        let r_ctx = linear_rows(&rows(&bt.context), &rows(&bw.wo), &r_attn);

        // context = A·V
        let a = rows(&bt.head_attention(0));
        let v = rows(&bt.value);
        let (mut r_a, both) = taylor_x(&a, &v, &r_ctx);
        let fix = total(&r_ctx) / both;
        r_a.iter_mut().flatten().for_each(|x| *x *= fix);

        let state = propagate(&model, &trace, Target::Class(c)).unwrap();
        let got = rows(&state.head_relevance[0]);
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (got[i][j] - r_a[i][j]).abs() < 1e-10 * (1.0 + r_a[i][j].abs()),
                    "seed {seed} ({i},{j}): {} vs {}",
                    got[i][j],
                    r_a[i][j]
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conservation_holds_at_every_cut(seed in 0u64..10_000, len in 1usize..7, class in 0usize..3) {
        let model = random_model(tiny_config(2, 2, 8, 12, 10, 3), seed);
        let mut r = rng(seed ^ 0xabc);
        let ids = random_sentence(model.config(), len, &mut r);
        let trace = model.forward(&ids).unwrap();
        let state = propagate(&model, &trace, Target::Class(class)).unwrap();
        prop_assert!(state.max_conservation_error() <= 1e-6);
        prop_assert!((state.deepest().sum() - 1.0).abs() <= 1e-5);
    }
}
