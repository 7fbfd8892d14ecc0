use std::collections::BTreeMap;

use headlrp::fixtures::{planted_heads, tiny_config, HEAD_WORD};
use headlrp::headmask::{
    build_mask, build_positional_mask, build_syntactic_mask, combine_masks,
    compute_head_frequencies, compute_relation_stats, corrupt_mask, random_mask, Arc, HeadMask,
    MaskOptions, ParsedCorpus, ParsedSentence, Source, SPECIAL,
};
use headlrp::model::{tensor_layout, Model, ModelWeights};
use headlrp::{Error, Tensor};
use proptest::prelude::*;

fn rels(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn sentence(words: usize, arcs: Vec<Arc>) -> ParsedSentence {
    let mut ids = vec![0];
    ids.extend((0..words).map(|i| 3 + i % 5));
    ids.push(1);
    let mut alignment = vec![SPECIAL];
    alignment.extend(0..words as i64);
    alignment.push(SPECIAL);
    ParsedSentence {
        ids,
        alignment,
        words: Vec::new(),
        arcs,
    }
}

fn uniform_model(specials: Vec<usize>) -> Model {
    let mut cfg = tiny_config(1, 2, 4, 10, 12, 2);
    cfg.special_token_ids = specials;
    let tensors = tensor_layout(&cfg)
        .into_iter()
        .map(|(name, shape)| Tensor::filled(&shape, if name.ends_with(".gain") { 1.0 } else { 0.0 }))
        .collect();
    let w = ModelWeights::from_ordered(&cfg, tensors).unwrap();
    Model::new(cfg, w).unwrap()
}

#[test]
fn corpus_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let mut s = sentence(3, vec![Arc(0, 1, "nsubj".into()), Arc(1, -1, "root".into())]);
    s.words = vec!["dogs".into(), "bark".into(), "loudly".into()];
    let corpus = ParsedCorpus::new(vec![s.clone(), sentence(2, vec![])]).unwrap();
    corpus.save(&path).unwrap();
    assert_eq!(ParsedCorpus::load(&path).unwrap(), corpus);
    let line = std::fs::read_to_string(&path).unwrap();
    assert!(line.starts_with(r#"{"ids":[0,3,4,5,1],"alignment":[-1,0,1,2,-1],"words":["dogs","bark","loudly"],"arcs":[[0,1,"nsubj"],[1,-1,"root"]]}"#));
}

#[test]
fn subword_pieces_share_a_word() {
    // [CLS] un ##believ ##able [SEP]
    let s = ParsedSentence {
        ids: vec![0, 5, 6, 7, 1],
        alignment: vec![SPECIAL, 0, 0, 0, SPECIAL],
        words: vec!["unbelievable".into()],
        arcs: vec![],
    };
    let c = ParsedCorpus::new(vec![s]).unwrap();
    assert_eq!(c.sentences[0].span(0), vec![1, 2, 3]);
    assert_eq!(c.sentences[0].first_subword(0), Some(1));
}

#[test]
fn malformed_corpus_lines_are_rejected() {
    let mut bad_len = sentence(2, vec![]);
    bad_len.alignment.pop();
    let bad_arc = sentence(2, vec![Arc(0, 5, "amod".into())]);
    let self_arc = sentence(2, vec![Arc(1, 1, "amod".into())]);
    let mut gap = sentence(3, vec![]);
    gap.alignment[2] = 2;
    for s in [bad_len, bad_arc, self_arc, gap] {
        let err = ParsedCorpus::new(vec![s]).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let err = ParsedCorpus::load(&missing).unwrap_err();
    assert!(err.to_string().starts_with("corpus not found: "), "{err}");
}

#[test]
fn alignment_disagreeing_with_specials_names_the_sentence() {
    let model = uniform_model(vec![0, 1, 2]);
    let mut s = sentence(3, vec![]);
    s.alignment[0] = 0;
    let corpus = ParsedCorpus::new(vec![sentence(3, vec![]), s]).unwrap();
    let err = compute_head_frequencies(&model, &corpus, &rels(&["nsubj"]), &[1]).unwrap_err();
    assert!(err.to_string().contains("sentence 2"), "{err}");
}

#[test]
fn relation_stats_by_counting() {
    let corpus = ParsedCorpus::new(vec![
        sentence(4, vec![Arc(0, 1, "nsubj".into()), Arc(2, 3, "amod".into())]),
        sentence(4, vec![Arc(1, 3, "nsubj".into()), Arc(0, 1, "amod".into())]),
    ])
    .unwrap();
    let stats = compute_relation_stats(&corpus, &rels(&["nsubj", "amod", "dobj"])).unwrap();
    let nsubj = stats.get("nsubj").unwrap();
    assert_eq!(nsubj.at(1), 0.5);
    assert_eq!(nsubj.at(2), 0.5);
    assert_eq!(nsubj.max_lambda(), 0.5);
    let amod = stats.get("amod").unwrap();
    assert_eq!(amod.at(1), 1.0);
    assert_eq!(amod.max_lambda(), 1.0);
    // no dobj arcs: dropped
    assert!(stats.get("dobj").is_none());
    assert!(compute_relation_stats(&ParsedCorpus::default(), &rels(&["nsubj"])).is_err());
}

#[test]
fn relation_stats_match_a_recount() {
    let planted = planted_heads(100, 3);
    let stats = compute_relation_stats(&planted.corpus, &rels(&["nsubj", "amod"])).unwrap();
    for rel in ["nsubj", "amod"] {
        let mut counts: BTreeMap<i64, f64> = BTreeMap::new();
        let mut n = 0.0;
        for s in &planted.corpus.sentences {
            for a in s.arcs.iter().filter(|a| a.2 == rel) {
                *counts.entry((a.1 - a.0 as i64).clamp(-10, 10)).or_default() += 1.0;
                n += 1.0;
            }
        }
        let d = stats.get(rel).unwrap();
        assert!((d.lambda.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for off in -10..=10 {
            let want = counts.get(&off).copied().unwrap_or(0.0) / n;
            assert!((d.at(off) - want).abs() < 1e-12, "{rel} {off}");
        }
    }
    assert!((stats.get("nsubj").unwrap().max_lambda() - 0.3).abs() < 1e-12);
}

#[test]
fn uniform_attention_tie_rule() {
    // no special tokens: every argmax lands on column 0
    let model = uniform_model(vec![9]);
    for t in 1..=8 {
        let s = ParsedSentence {
            ids: vec![4; t],
            alignment: (0..t as i64).collect(),
            words: Vec::new(),
            arcs: vec![],
        };
        let corpus = ParsedCorpus::new(vec![s]).unwrap();
        let offsets = [-2, -1, 1, 2];
        let f = compute_head_frequencies(&model, &corpus, &rels(&["nsubj"]), &offsets).unwrap();
        for (i, &off) in offsets.iter().enumerate() {
            // rows r with 0 == r + off
            let want = if off < 0 && (-off as usize) < t { 1.0 / t as f64 } else { 0.0 };
            for m in 0..2 {
                assert_eq!(f.alpha_pos(i, 0, m).unwrap(), want, "T={t} offset {off}");
            }
        }
        if t >= 3 {
            assert_eq!(build_positional_mask(&f, 0.8).ones(), 0);
        }
    }
}

#[test]
fn planted_heads_are_found_and_nothing_else() {
    let planted = planted_heads(100, 11);
    let build = build_mask(&planted.model, &planted.corpus, &MaskOptions::default()).unwrap();
    let f = &build.frequencies;
    let k = f.syntactic.iter().position(|s| s.relation == "nsubj").unwrap();
    let (b, m) = planted.syntactic;
    assert!((f.alpha_synt(k, b, m).unwrap().0 - 0.9).abs() < 1e-12);
    let i = f.offsets.iter().position(|&o| o == 1).unwrap();
    let (pb, pm) = planted.positional;
    assert!((f.alpha_pos(i, pb, pm).unwrap() - 0.95).abs() < 1e-12);

    let on: Vec<(usize, usize)> = (0..2)
        .flat_map(|b| (0..4).map(move |h| (b, h)))
        .filter(|&(b, h)| build.combined.get(b, h))
        .collect();
    assert_eq!(on, vec![planted.syntactic, planted.positional]);
    assert!(build.combined.sources(0, 0).iter().all(Source::is_syntactic));
    assert!(build.combined.sources(0, 1).iter().all(Source::is_positional));
}

#[test]
fn planted_syntactic_frequency_matches_direct_recount() {
    let planted = planted_heads(100, 5);
    let f = compute_head_frequencies(&planted.model, &planted.corpus, &rels(&["nsubj"]), &[1]).unwrap();
    let (b, m) = planted.syntactic;
    let mut hits = 0.0;
    let mut structural = 0.0;
    let mut n = 0.0;
    for s in &planted.corpus.sentences {
        let trace = planted.model.forward(&s.ids).unwrap();
        let att = trace.blocks()[b].head_attention(m);
        let t = s.ids.len();
        for a in s.arcs.iter().filter(|a| a.2 == "nsubj") {
            let row = a.0 + 1;
            let mut best = 1;
            for j in 1..t - 1 {
                if att.get(row, j) > att.get(row, best) {
                    best = j;
                }
            }
            if best == a.1 as usize + 1 {
                hits += 1.0;
            }
            if s.ids[a.1 as usize + 1] == HEAD_WORD {
                structural += 1.0;
            }
            n += 1.0;
        }
    }
    let alpha = f.alpha_synt(0, b, m).unwrap().0;
    assert!((alpha - hits / n).abs() < 1e-12);
    assert!((alpha - structural / n).abs() < 1e-12);
    assert!((planted.syntactic_hit_rate - 0.9).abs() < 1e-12);
}

#[test]
fn mask_building_is_reproducible() {
    let planted = planted_heads(100, 2);
    let a = build_mask(&planted.model, &planted.corpus, &MaskOptions::default()).unwrap();
    let b = build_mask(&planted.model, &planted.corpus, &MaskOptions::default()).unwrap();
    assert_eq!(a.combined.to_json().unwrap(), b.combined.to_json().unwrap());
}

fn mask_from(bits: &[bool], blocks: usize, heads: usize) -> HeadMask {
    let mut m = HeadMask::empty(blocks, heads);
    for (i, &on) in bits.iter().enumerate() {
        if on {
            m.add(i / heads, i % heads, Source::AllOnes);
        }
    }
    m
}

#[test]
fn random_mask_matches_rate_and_is_seeded() {
    let mut reference = HeadMask::empty(4, 6);
    for (b, h) in [(0, 1), (0, 4), (1, 2), (2, 0), (2, 5), (3, 3), (3, 1)] {
        reference.add(b, h, Source::AllOnes);
    }
    let a = random_mask(&reference, 9);
    assert_eq!(a.ones(), 7);
    assert_eq!(a, random_mask(&reference, 9));
    assert_ne!(a, random_mask(&reference, 10));
}

#[test]
fn random_mask_positions_are_uniform() {
    let reference = mask_from(&[true, true, false, true, false, false, false, false, true, false, false, false], 3, 4);
    let draws = 1000;
    let p = reference.ones() as f64 / 12.0;
    let mut counts = vec![0usize; 12];
    for seed in 0..draws {
        let m = random_mask(&reference, seed);
        for (i, c) in counts.iter_mut().enumerate() {
            if m.get(i / 4, i % 4) {
                *c += 1;
            }
        }
    }
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{c}");
    }
}

#[test]
fn combining_basics() {
    let a = mask_from(&[true, false, false, false], 2, 2);
    let b = mask_from(&[false, false, false, true], 2, 2);
    let u = combine_masks(&a, &b).unwrap();
    assert!((u.rate() - (a.rate() + b.rate())).abs() < 1e-15);
    assert_eq!(combine_masks(&a, &a).unwrap(), a);
    assert_eq!(combine_masks(&a, &HeadMask::empty(2, 2)).unwrap(), a);
    assert!(combine_masks(&a, &HeadMask::empty(3, 2)).is_err());
}

fn bits(n: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), n)
}

proptest! {
    #[test]
    fn combine_is_commutative_associative_idempotent(a in bits(6), b in bits(6), c in bits(6)) {
        let (a, b, c) = (mask_from(&a, 2, 3), mask_from(&b, 2, 3), mask_from(&c, 2, 3));
        let ab = combine_masks(&a, &b).unwrap();
        prop_assert_eq!(ab.grid(), combine_masks(&b, &a).unwrap().grid());
        let left = combine_masks(&ab, &c).unwrap();
        let right = combine_masks(&a, &combine_masks(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(left.grid(), right.grid());
        prop_assert_eq!(combine_masks(&ab, &ab).unwrap(), ab);
    }

    #[test]
    fn corruption_is_nested_in_rate(m in bits(12), seed in 0u64..1000, r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
        let m = mask_from(&m, 3, 4);
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let a = corrupt_mask(&m, lo, seed).unwrap();
        let b = corrupt_mask(&m, hi, seed).unwrap();
        let zeros = 12 - m.ones();
        prop_assert_eq!(a.ones() - m.ones(), ((lo * zeros as f64) - 1e-9).ceil().max(0.0) as usize);
        for bl in 0..3 {
            for h in 0..4 {
                prop_assert!(!m.get(bl, h) || a.get(bl, h));
                prop_assert!(!a.get(bl, h) || b.get(bl, h));
            }
        }
        prop_assert_eq!(corrupt_mask(&m, 1.0, seed).unwrap().ones(), 12);
    }

    #[test]
    fn raising_thresholds_never_adds_heads(seed in 0u64..50, lo in 0.0f64..0.5, step in 0.0f64..0.5) {
        let planted = planted_heads(20, seed);
        let relations = rels(&["nsubj", "amod"]);
        let f = compute_head_frequencies(&planted.model, &planted.corpus, &relations, &[-2, -1, 1, 2]).unwrap();
        let stats = compute_relation_stats(&planted.corpus, &relations).unwrap();
        let hi = lo + step;
        let (s_lo, s_hi) = (build_syntactic_mask(&f, &stats, lo), build_syntactic_mask(&f, &stats, hi));
        let (p_lo, p_hi) = (build_positional_mask(&f, lo), build_positional_mask(&f, hi));
        for b in 0..2 {
            for h in 0..4 {
                prop_assert!(!s_hi.get(b, h) || s_lo.get(b, h));
                prop_assert!(!p_hi.get(b, h) || p_lo.get(b, h));
            }
        }
    }
}
