//! Seeded synthetic models and data used by tests, the `toy` CLI command
//! and the Python smoke test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{tensor_layout, Model, ModelConfig, ModelWeights, Task};
use crate::numerics::Tensor;

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;

/// Small classification config with `[CLS]=0`, `[SEP]=1`, `[MASK]=2` specials.
pub fn tiny_config(
    num_blocks: usize,
    num_heads: usize,
    hidden_dim: usize,
    vocab_size: usize,
    max_positions: usize,
    num_classes: usize,
) -> ModelConfig {
    ModelConfig {
        num_blocks,
        num_heads,
        hidden_dim,
        ffn_dim: 2 * hidden_dim,
        vocab_size,
        max_positions,
        num_classes,
        mask_token_id: MASK,
        cls_index: 0,
        special_token_ids: vec![CLS, SEP, MASK],
        causal: false,
        task: Task::Classification,
        layer_norm_eps: 1e-12,
    }
}

/// Gaussian weights with standard deviation `scale`; layer-norm gains are
/// drawn around 1.
pub fn random_weights(cfg: &ModelConfig, seed: u64, scale: f64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let tensors = tensor_layout(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gain") {
                (0..n).map(|_| 1.0 + 0.1 * normal.sample(&mut rng)).collect()
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            Tensor::new(shape, data).expect("layout shapes are valid")
        })
        .collect();
    ModelWeights::from_ordered(cfg, tensors).expect("layout order")
}

/// All-zero weights with unit layer-norm gains.
pub fn identity_weights(cfg: &ModelConfig) -> ModelWeights {
    let tensors = tensor_layout(cfg)
        .into_iter()
        .map(|(name, shape)| Tensor::filled(&shape, if name.ends_with(".gain") { 1.0 } else { 0.0 }))
        .collect();
    ModelWeights::from_ordered(cfg, tensors).expect("layout order")
}

pub fn random_model(cfg: ModelConfig, seed: u64) -> Model {
    let weights = random_weights(&cfg, seed, 0.5);
    Model::new(cfg, weights).expect("valid random model")
}

/// `[CLS] w_1 .. w_n [SEP]` with content ids drawn from the non-special range.
pub fn random_sentence(cfg: &ModelConfig, content_len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let first = cfg.special_token_ids.iter().max().map_or(0, |m| m + 1);
    let mut ids = vec![CLS];
    ids.extend((0..content_len).map(|_| rng.random_range(first..cfg.vocab_size)));
    ids.push(SEP);
    ids
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Token ids of the planted-head vocabulary.
pub const HEAD_WORD: usize = 3;
pub const DEP_WORD: usize = 4;
const FIRST_FILLER: usize = 5;

/// Model and corpus with two planted heads in block 0: head 0 attends every
/// row to the unique [`HEAD_WORD`] token, head 1 attends each token to its
/// right neighbour. All other heads attend uniformly.
#[derive(Debug, Clone)]
pub struct PlantedHeads {
    pub model: Model,
    pub corpus: crate::headmask::ParsedCorpus,
    pub syntactic: (usize, usize),
    pub positional: (usize, usize),
    /// Fraction of `nsubj` arcs whose head word is [`HEAD_WORD`].
    pub syntactic_hit_rate: f64,
    /// Content words per sentence.
    pub sentence_words: usize,
}

/// Embeddings with zero mean and constant norm so the embedding layer norm
/// is a fixed rescaling: three one-hot type dimensions, a rotary pair for
/// the position, and the negations of both.
fn planted_model(max_positions: usize, vocab: usize) -> Model {
    let mut cfg = tiny_config(2, 4, 12, vocab, max_positions, 2);
    cfg.ffn_dim = 12;
    let mut w = identity_weights(&cfg);

    for id in 0..vocab {
        let kind = match id {
            HEAD_WORD => 0,
            DEP_WORD => 1,
            _ => 2,
        };
        w.token_embeddings.set(id, kind, 1.0);
        w.token_embeddings.set(id, kind + 3, -1.0);
    }
    let theta = std::f64::consts::PI / max_positions as f64;
    for p in 0..max_positions {
        let (s, c) = (theta * p as f64).sin_cos();
        for (j, v) in [(6, c), (7, s), (8, -c), (9, -s)] {
            w.position_embeddings.set(p, j, v);
        }
    }

    let b0 = &mut w.blocks[0];
    // head 0: constant query, key fires on the head-word type
    b0.bq.data_mut()[0] = 4.0;
    b0.wk.set(0, 0, 4.0);
    // head 1: query is the position rotated one step forward
    let (s, c) = theta.sin_cos();
    let g = 4.0;
    b0.wq.set(6, 3, g * c);
    b0.wq.set(6, 4, g * s);
    b0.wq.set(7, 3, -g * s);
    b0.wq.set(7, 4, g * c);
    b0.wk.set(6, 3, g);
    b0.wk.set(7, 4, g);
    Model::new(cfg, w).expect("valid planted model")
}

/// `sentences` should be a multiple of 100 for the exact rates: 90% of
/// `nsubj` arcs point at [`HEAD_WORD`], and head-minus-dependent offsets
/// follow `{+1: .3, -1: .2, +2: .2, -2: .15, +3: .15}`. Each sentence also
/// carries one `amod` arc between fillers with offsets spread over ±1..±3.
pub fn planted_heads(sentences: usize, seed: u64) -> PlantedHeads {
    use crate::headmask::{Arc, ParsedCorpus, ParsedSentence, SPECIAL};

    const WORDS: usize = 20;
    let vocab = 16;
    let model = planted_model(WORDS + 4, vocab);
    let mut r = rng(seed);
    let schedule: Vec<i64> = [(1, 30), (-1, 20), (2, 20), (-2, 15), (3, 15)]
        .iter()
        .flat_map(|&(o, n)| std::iter::repeat_n(o, n))
        .collect();
    let amod_offsets = [1i64, -1, 2, -2, 3, -3];

    let mut out = Vec::with_capacity(sentences);
    let mut hits = 0;
    for i in 0..sentences {
        let offset = schedule[i % schedule.len()];
        let hit = i % 10 != 9;
        // word 0 is where uniform heads land; keep planted words off it
        let (dep, head) = loop {
            let d = r.random_range(3..WORDS as i64);
            let h = d + offset;
            if (2..WORDS as i64).contains(&h) {
                break (d as usize, h as usize);
            }
        };
        let mut words: Vec<usize> = (0..WORDS)
            .map(|_| r.random_range(FIRST_FILLER..vocab))
            .collect();
        words[dep] = DEP_WORD;
        let taken = |w: usize| w == dep || w == head;
        if hit {
            words[head] = HEAD_WORD;
            hits += 1;
        } else {
            let elsewhere = loop {
                let w = r.random_range(2..WORDS);
                if !taken(w) {
                    break w;
                }
            };
            words[elsewhere] = HEAD_WORD;
        }
        let amod_off = amod_offsets[i % amod_offsets.len()];
        let (adep, ahead) = loop {
            let d = r.random_range(2..WORDS as i64);
            let h = d + amod_off;
            if (2..WORDS as i64).contains(&h)
                && [d, h].iter().all(|&x| !taken(x as usize) && words[x as usize] >= FIRST_FILLER)
            {
                break (d as usize, h as usize);
            }
        };

        let mut ids = vec![CLS];
        ids.extend(&words);
        ids.push(SEP);
        let mut alignment = vec![SPECIAL];
        alignment.extend((0..WORDS as i64).collect::<Vec<_>>());
        alignment.push(SPECIAL);
        out.push(ParsedSentence {
            ids,
            alignment,
            words: words.iter().map(|w| format!("w{w}")).collect(),
            arcs: vec![
                Arc(dep, head as i64, "nsubj".into()),
                Arc(adep, ahead as i64, "amod".into()),
            ],
        });
    }
    PlantedHeads {
        model,
        corpus: ParsedCorpus::new(out).expect("well-formed planted corpus"),
        syntactic: (0, 0),
        positional: (0, 1),
        syntactic_hit_rate: hits as f64 / sentences.max(1) as f64,
        sentence_words: WORDS,
    }
}

/// Label tokens of the planted classifier: class 0 and class 1.
pub const LABEL_TOKENS: [usize; 2] = [3, 4];
/// Token every distractor head locks onto.
pub const DISTRACTOR: usize = 5;

/// Classifier whose block-0 head 0 copies the label token's value into
/// every row, the CLS row included. Heads 1..4 attend sharply to
/// [`DISTRACTOR`] but carry no value, so attention-only explanations
/// favour the distractor while the label token alone decides the class.
#[derive(Debug, Clone)]
pub struct PlantedClassifier {
    pub model: Model,
    /// Mask selecting the routing head.
    pub mask: crate::headmask::HeadMask,
    pub routing_head: (usize, usize),
}

/// One sentence of the planted classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInstance {
    pub ids: Vec<usize>,
    pub label: usize,
    pub label_position: usize,
}

/// `noise` adds Gaussian perturbations of that scale to every weight.
pub fn planted_classifier(noise: f64, seed: u64) -> PlantedClassifier {
    let vocab = 12;
    let max_positions = 16;
    let mut cfg = tiny_config(2, 4, 16, vocab, max_positions, 2);
    cfg.ffn_dim = 16;
    let mut w = if noise > 0.0 {
        random_weights(&cfg, seed, noise)
    } else {
        identity_weights(&cfg)
    };

    // type one-hots at 0..4 with negations at 4..8
    for id in 0..vocab {
        let kind = match id {
            3 => 0,
            4 => 1,
            DISTRACTOR => 2,
            _ => 3,
        };
        add(&mut w.token_embeddings, id, kind, 1.0);
        add(&mut w.token_embeddings, id, kind + 4, -1.0);
    }
    let b0 = &mut w.blocks[0];
    let beta = 4.0;
    // head 0 (cols 0..4): keys fire on either label token, value carries ±1
    b0.bq.data_mut()[0] += beta;
    add(&mut b0.wk, 0, 0, beta);
    add(&mut b0.wk, 1, 0, beta);
    add(&mut b0.wv, 0, 1, 1.0);
    add(&mut b0.wv, 1, 1, -1.0);
    // output projection writes the sign into dims 12/13 of the residual
    add(&mut b0.wo, 1, 12, 3.0);
    add(&mut b0.wo, 1, 13, -3.0);
    // heads 1..4: lock onto the distractor, no value
    for h in 1..4 {
        b0.bq.data_mut()[4 * h] += 2.0 * beta;
        add(&mut b0.wk, 2, 4 * h, 2.0 * beta);
    }
    add(&mut w.head_weight, 12, 0, 2.0);
    add(&mut w.head_weight, 13, 0, -2.0);
    add(&mut w.head_weight, 12, 1, -2.0);
    add(&mut w.head_weight, 13, 1, 2.0);

    let model = Model::new(cfg, w).expect("valid planted classifier");
    let mut mask = crate::headmask::HeadMask::empty(2, 4);
    mask.add(0, 0, crate::headmask::Source::AllOnes);
    PlantedClassifier {
        model,
        mask,
        routing_head: (0, 0),
    }
}

fn add(t: &mut Tensor, i: usize, j: usize, v: f64) {
    let cur = t.get(i, j);
    t.set(i, j, cur + v);
}

/// `[CLS] … [SEP]` with 3..=12 content tokens, exactly one label token and
/// one distractor at distinct random positions.
pub fn planted_instance(rng: &mut impl Rng) -> PlantedInstance {
    let content = rng.random_range(3..=12);
    let mut ids = vec![CLS];
    ids.extend((0..content).map(|_| rng.random_range(DISTRACTOR + 1..12)));
    ids.push(SEP);
    let label = rng.random_range(0..2);
    let label_position = rng.random_range(1..=content);
    let distractor = loop {
        let p = rng.random_range(1..=content);
        if p != label_position {
            break p;
        }
    };
    ids[label_position] = LABEL_TOKENS[label];
    ids[distractor] = DISTRACTOR;
    PlantedInstance {
        ids,
        label,
        label_position,
    }
}

/// Classification examples `[CLS] w.. [SEP]` with 1..=`max_content` content
/// tokens, labelled with the model's own prediction.
pub fn random_dataset(model: &Model, n: usize, max_content: usize, seed: u64) -> crate::eval::EvalDataset {
    use crate::eval::{EvalDataset, Example};
    let cfg = model.config();
    let mut rng = rng(seed);
    let examples = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_content);
            let ids = random_sentence(cfg, len, &mut rng);
            let label = model.predict(&ids).expect("valid sentence").label;
            Example::classification(ids, label)
        })
        .collect();
    EvalDataset::new(Task::Classification, examples)
}

/// QA examples `[CLS] question [SEP] context [SEP]` with a gold span inside
/// the context.
pub fn random_qa_dataset(cfg: &ModelConfig, n: usize, seed: u64) -> crate::eval::EvalDataset {
    use crate::eval::{EvalDataset, Example};
    let mut rng = rng(seed);
    let first = cfg.special_token_ids.iter().max().map_or(0, |m| m + 1);
    let examples = (0..n)
        .map(|_| {
            let q = rng.random_range(1..=3);
            let c = rng.random_range(2..=cfg.max_positions.saturating_sub(q + 3).max(2));
            let mut ids = vec![CLS];
            ids.extend((0..q).map(|_| rng.random_range(first..cfg.vocab_size)));
            ids.push(SEP);
            let context_start = ids.len();
            ids.extend((0..c).map(|_| rng.random_range(first..cfg.vocab_size)));
            ids.push(SEP);
            let s = context_start + rng.random_range(0..c);
            let e = (s + rng.random_range(0..3)).min(context_start + c - 1);
            Example::qa(ids, Some([s, e]), context_start)
        })
        .collect();
    EvalDataset::new(Task::Qa, examples)
}

/// Planted classifier plus a matching corpus and dataset, as written by the
/// `toy` command.
#[derive(Debug, Clone)]
pub struct ToyBundle {
    pub model: Model,
    pub corpus: crate::headmask::ParsedCorpus,
    pub dataset: crate::eval::EvalDataset,
}

/// Corpus sentences are planted instances whose content tokens are all
/// `nsubj` dependents of the label token; dataset examples carry the gold
/// label.
pub fn toy_bundle(sentences: usize, examples: usize, seed: u64) -> ToyBundle {
    use crate::eval::{EvalDataset, Example};
    use crate::headmask::{Arc, ParsedCorpus, ParsedSentence, SPECIAL};

    let planted = planted_classifier(0.05, seed);
    let mut r = rng(seed.wrapping_add(1));
    let corpus = (0..sentences)
        .map(|_| {
            let inst = planted_instance(&mut r);
            let words = inst.ids.len() - 2;
            let mut alignment = vec![SPECIAL];
            alignment.extend(0..words as i64);
            alignment.push(SPECIAL);
            let head = inst.label_position as i64 - 1;
            let arcs = (0..words)
                .filter(|&w| w as i64 != head)
                .map(|w| Arc(w, head, "nsubj".into()))
                .chain([Arc(head as usize, crate::headmask::ROOT, "root".into())])
                .collect();
            ParsedSentence {
                ids: inst.ids,
                alignment,
                words: Vec::new(),
                arcs,
            }
        })
        .collect();
    let dataset = (0..examples)
        .map(|_| {
            let inst = planted_instance(&mut r);
            Example::classification(inst.ids, inst.label)
        })
        .collect();
    ToyBundle {
        model: planted.model,
        corpus: ParsedCorpus::new(corpus).expect("well-formed toy corpus"),
        dataset: EvalDataset::new(Task::Classification, dataset),
    }
}
