use headlrp::attribution::{
    apply_mask, attribute, baseline_gae, baseline_rawatt, baseline_rollout, explain, renormalize,
    rollout_factor, write_jsonl, ExplainOptions, Method, Normalization,
};
use headlrp::fixtures::{
    planted_classifier, planted_instance, random_model, random_sentence, rng, tiny_config,
};
use headlrp::headmask::{corrupt_mask, random_mask, HeadMask, Source};
use headlrp::lrp::propagate;
use headlrp::model::{Model, Target, Task};
use headlrp::Tensor;
use proptest::prelude::*;
use rand::Rng;

const OPTS: ExplainOptions = ExplainOptions {
    row_normalize: false,
    mask_propagation: false,
};

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn all_ones_mask_reproduces_gae() {
    let mut r = rng(40);
    for i in 0..20 {
        let model = random_model(tiny_config(2, 2, 8, 12, 10, 3), 500 + i);
        let ids = random_sentence(model.config(), r.random_range(1..8), &mut r);
        let target = Target::Class(r.random_range(0..3));
        let ours = explain(&model, &ids, target, &HeadMask::all_ones(2, 2), OPTS).unwrap();
        let trace = model.forward(&ids).unwrap();
        let grads = model.backward_attention_grads(&trace, target).unwrap();
        let gae = baseline_gae(&model, &trace, &grads, target, OPTS).unwrap();
        assert_close(&ours.scores, &gae.scores, 1e-9);
        assert_eq!(ours.degenerate, gae.degenerate);
    }
}

#[test]
fn fully_corrupted_planted_mask_reproduces_gae() {
    let pc = planted_classifier(0.05, 3);
    let mut mask = pc.mask.clone();
    mask.add(
        1,
        2,
        Source::Positional {
            offset: -1,
            frequency: 0.9,
            threshold: 0.8,
        },
    );
    let full = corrupt_mask(&mask, 1.0, 17).unwrap();
    let mut r = rng(2);
    for _ in 0..10 {
        let inst = planted_instance(&mut r);
        let t = Target::Class(inst.label);
        let a = attribute(&pc.model, &inst.ids, &[t], Method::Ours, &full, 0, OPTS).unwrap();
        let b = attribute(&pc.model, &inst.ids, &[t], Method::Gae, &full, 0, OPTS).unwrap();
        assert_close(&a.scores, &b.scores, 1e-9);
    }
}

#[test]
fn qa_attribution_averages_start_and_end() {
    let mut cfg = tiny_config(2, 2, 8, 12, 10, 2);
    cfg.task = Task::Qa;
    let model = random_model(cfg, 8);
    let ids = [0, 5, 6, 1, 7, 8, 9, 1];
    let mask = HeadMask::all_ones(2, 2);
    let both = attribute(&model, &ids, &[Target::Start(4), Target::End(5)], Method::Ours, &mask, 0, OPTS).unwrap();
    let s = explain(&model, &ids, Target::Start(4), &mask, OPTS).unwrap();
    let e = explain(&model, &ids, Target::End(5), &mask, OPTS).unwrap();
    let want: Vec<f64> = s.scores.iter().zip(&e.scores).map(|(a, b)| 0.5 * (a + b)).collect();
    assert_close(&both.scores, &want, 1e-15);
    assert_eq!(both.targets, vec![Target::Start(4), Target::End(5)]);
}

#[test]
fn zero_gradients_are_degenerate() {
    let model = random_model(tiny_config(2, 2, 8, 12, 8, 2), 1);
    let mut w = model.weights().clone();
    w.head_weight = Tensor::zeros(w.head_weight.shape());
    let model = Model::new(model.config().clone(), w).unwrap();
    let ids = [0, 4, 5, 6, 1];
    let r = explain(&model, &ids, Target::Class(0), &HeadMask::all_ones(2, 2), OPTS).unwrap();
    assert!(r.degenerate);
    // uniform over the three content tokens
    assert_close(&r.scores, &[0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0], 1e-15);
    for f in &r.rollout {
        assert_eq!(f, &Tensor::identity(5));
    }
}

#[test]
fn single_token_input() {
    let model = random_model(tiny_config(1, 2, 8, 12, 8, 2), 2);
    let r = explain(&model, &[7], Target::Class(1), &HeadMask::all_ones(1, 2), OPTS).unwrap();
    assert_eq!(r.scores.len(), 1);
}

#[test]
fn empty_mask_row_contributes_identity() {
    let model = random_model(tiny_config(2, 2, 8, 12, 8, 2), 3);
    let mut mask = HeadMask::empty(2, 2);
    mask.add(1, 0, Source::AllOnes);
    let r = explain(&model, &[0, 4, 5, 1], Target::Class(0), &mask, OPTS).unwrap();
    assert_eq!(r.normalization[0], Normalization::Inactive);
    assert_eq!(r.rollout[0], Tensor::identity(4));
}

#[test]
fn rawatt_is_the_last_block_head_mean() {
    let model = random_model(tiny_config(2, 3, 9, 12, 8, 2), 4);
    let ids = [0, 4, 5, 6, 1];
    let trace = model.forward(&ids).unwrap();
    let r = baseline_rawatt(&model, &trace, Target::Class(0)).unwrap();
    let a = &trace.blocks()[1].attention;
    for j in 1..4 {
        let want = (0..3).map(|h| a.data()[h * 25 + j]).sum::<f64>() / 3.0;
        assert!((r.scores[j] - want).abs() < 1e-15);
    }
    assert_eq!(r.scores[0], 0.0);
    assert_eq!(r.scores[4], 0.0);
}

#[test]
fn rollout_matches_hand_product() {
    let model = random_model(tiny_config(2, 2, 8, 12, 8, 2), 5);
    let ids = [0, 4, 1];
    let trace = model.forward(&ids).unwrap();
    let smoothed: Vec<Vec<Vec<f64>>> = trace
        .blocks()
        .iter()
        .map(|bt| {
            (0..3)
                .map(|i| {
                    (0..3)
                        .map(|j| {
                            let mean = (bt.attention.data()[i * 3 + j] + bt.attention.data()[9 + i * 3 + j]) / 2.0;
                            0.5 * (mean + if i == j { 1.0 } else { 0.0 })
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let (a, b) = (&smoothed[0], &smoothed[1]);
    let want: f64 = (0..3).map(|k| a[0][k] * b[k][1]).sum();
    let r = baseline_rollout(&model, &trace, Target::Class(0)).unwrap();
    assert!((r.scores[1] - want).abs() < 1e-15);
}

#[test]
fn identity_attention_rolls_out_to_identity() {
    let t = 4;
    let id = Tensor::stack(&[Tensor::identity(t), Tensor::identity(t)]).unwrap();
    let f = rollout_factor(&Tensor::zeros(&[2, t, t]), &id, false).unwrap();
    assert_eq!(f, Tensor::identity(t));
}

#[test]
fn planted_token_wins_and_occlusion_agrees() {
    let pc = planted_classifier(0.05, 7);
    let cfg = pc.model.config();
    let mut r = rng(9);
    for _ in 0..20 {
        let inst = planted_instance(&mut r);
        let pred = pc.model.predict(&inst.ids).unwrap();
        assert_eq!(pred.label, inst.label);
        let t = Target::Class(pred.label);
        let res = explain(&pc.model, &inst.ids, t, &pc.mask, OPTS).unwrap();
        let top = res.ranking(cfg)[0];
        assert_eq!(top, inst.label_position);

        // brute-force occlusion: masking which token lowers the logit most
        let base = pred.logits.data()[pred.label];
        let mut best = (f64::NEG_INFINITY, 0);
        for j in 1..inst.ids.len() - 1 {
            let mut ids = inst.ids.clone();
            ids[j] = cfg.mask_token_id;
            let drop = base - pc.model.predict(&ids).unwrap().logits.data()[pred.label];
            if drop > best.0 {
                best = (drop, j);
            }
        }
        assert_eq!(best.1, top);
    }
}

#[test]
fn random_method_uses_a_rate_matched_mask() {
    let pc = planted_classifier(0.05, 1);
    let ids = planted_instance(&mut rng(3)).ids;
    let t = [Target::Class(0)];
    let a = attribute(&pc.model, &ids, &t, Method::Random, &pc.mask, 5, OPTS).unwrap();
    let direct = explain(&pc.model, &ids, t[0], &random_mask(&pc.mask, 5), OPTS).unwrap();
    assert_eq!(a.scores, direct.scores);
    assert_eq!(a.method, Method::Random);
}

#[test]
fn jsonl_records() {
    let model = random_model(tiny_config(1, 2, 8, 12, 8, 2), 6);
    let r = explain(&model, &[0, 4, 1], Target::Class(1), &HeadMask::all_ones(1, 2), OPTS).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.jsonl");
    write_jsonl(&path, &[r.clone(), r]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(v["ids"], serde_json::json!([0, 4, 1]));
    assert_eq!(v["method"], "ours");
    assert_eq!(v["targets"][0]["Class"], 1);
    assert!(v["degenerate"].is_boolean());
    assert_eq!(v["scores"].as_array().unwrap().len(), 3);
}

fn random_head_mask(blocks: usize, heads: usize, r: &mut impl Rng) -> HeadMask {
    let mut m = HeadMask::empty(blocks, heads);
    for b in 0..blocks {
        for h in 0..heads {
            match r.random_range(0..5) {
                0 => m.add(b, h, Source::AllOnes),
                1 => m.add(
                    b,
                    h,
                    Source::Positional {
                        offset: 1,
                        frequency: 0.9,
                        threshold: 0.8,
                    },
                ),
                2 => {
                    m.add(
                        b,
                        h,
                        Source::Syntactic {
                            relation: "nsubj".into(),
                            frequency: 0.6,
                            dependent_to_head: 0.6,
                            head_to_dependent: 0.2,
                            threshold: 0.4,
                        },
                    );
                    if r.random_bool(0.5) {
                        m.add(
                            b,
                            h,
                            Source::Positional {
                                offset: -1,
                                frequency: 0.85,
                                threshold: 0.8,
                            },
                        );
                    }
                }
                _ => {}
            }
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scores_are_finite_non_negative_and_deterministic(seed in 0u64..5000, len in 1usize..8) {
        let model = random_model(tiny_config(2, 2, 8, 12, 10, 2), seed);
        let mut r = rng(seed);
        let ids = random_sentence(model.config(), len, &mut r);
        let mask = random_head_mask(2, 2, &mut r);
        let a = explain(&model, &ids, Target::Class(1), &mask, OPTS).unwrap();
        let b = explain(&model, &ids, Target::Class(1), &mask, OPTS).unwrap();
        prop_assert!(a.scores.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert_eq!(a.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn masked_heads_carry_nothing_and_totals_are_restored(seed in 0u64..5000, len in 1usize..8) {
        let model = random_model(tiny_config(2, 3, 9, 12, 10, 2), seed);
        let mut r = rng(seed ^ 7);
        let ids = random_sentence(model.config(), len, &mut r);
        let trace = model.forward(&ids).unwrap();
        let state = propagate(&model, &trace, Target::Class(0)).unwrap();
        let mask = random_head_mask(2, 3, &mut r);
        let t = ids.len();
        for b in 0..2 {
            let rel = &state.head_relevance[b];
            let masked = apply_mask(rel, &mask, b).unwrap();
            let combined = masked.combined();
            for h in 0..3 {
                let slab = &combined.data()[h * t * t..(h + 1) * t * t];
                if !mask.get(b, h) {
                    prop_assert!(slab.iter().all(|&v| v == 0.0));
                }
            }
            if mask.row(b).iter().any(|&g| g) {
                let total = rel.sum();
                let (out, kind) = renormalize(&masked, total).unwrap();
                if kind != Normalization::Degenerate {
                    let after: f64 = out.sums().iter().sum();
                    prop_assert!((after - total).abs() <= 1e-9 * total.abs().max(1e-12));
                }
            }
        }
    }

    #[test]
    fn relevance_and_gradient_scale_cancel(s in 0.1f64..10.0, seed in 0u64..100) {
        let mut r = rng(seed);
        let g = Tensor::new(vec![2, 3, 3], (0..18).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let rel = Tensor::new(vec![2, 3, 3], (0..18).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let a = rollout_factor(&g, &rel, false).unwrap();
        let b = rollout_factor(&g.scale(1.0 / s), &rel.scale(s), false).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
