use serde::Serialize;

use super::config::{ModelConfig, Task};
use super::weights::{BlockWeights, ModelWeights};
use crate::error::{Error, Result};
use crate::numerics::{self, gelu, layer_norm, matmul, softmax_in_place, Tensor};

/// Which output logit a backward pass or relevance propagation starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Target {
    Class(usize),
    /// QA start logit at a token position.
    Start(usize),
    /// QA end logit at a token position.
    End(usize),
}

impl Target {
    /// Row of the encoder output the target logit reads from.
    pub fn source_row(&self, cfg: &ModelConfig) -> usize {
        match *self {
            Target::Class(_) => cfg.cls_index,
            Target::Start(p) | Target::End(p) => p,
        }
    }

    /// Column of the output head weight matrix.
    pub fn head_column(&self) -> usize {
        match *self {
            Target::Class(c) => c,
            Target::Start(_) => 0,
            Target::End(_) => 1,
        }
    }

    pub fn index(&self) -> usize {
        match *self {
            Target::Class(c) | Target::Start(c) | Target::End(c) => c,
        }
    }
}

/// Intermediates of one encoder block.
#[derive(Debug, Clone, Serialize)]
pub struct BlockTrace {
    pub input: Tensor,
    /// Projections `[T×d]`; head `h` owns columns `h·d_h .. (h+1)·d_h`.
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    /// Post-softmax attention, `[M×T×T]`.
    pub attention: Tensor,
    /// Concatenated head outputs before the output projection.
    pub context: Tensor,
    pub attn_out: Tensor,
    pub resid1: Tensor,
    pub hidden1: Tensor,
    pub ffn_pre: Tensor,
    pub ffn_act: Tensor,
    pub ffn_out: Tensor,
    pub resid2: Tensor,
    pub output: Tensor,
}

impl BlockTrace {
    pub fn head_attention(&self, head: usize) -> Tensor {
        self.attention.slab(head)
    }
}

/// Everything recorded during one forward pass.
#[derive(Debug, Clone, Serialize)]
pub struct ForwardTrace {
    token_ids: Vec<usize>,
    embeddings: Tensor,
    embedded: Tensor,
    blocks: Vec<BlockTrace>,
    logits: Tensor,
    predicted: usize,
    num_heads: usize,
}

impl ForwardTrace {
    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Token + position embeddings before the embedding layer norm.
    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    /// Input of the first block.
    pub fn embedded(&self) -> &Tensor {
        &self.embedded
    }

    pub fn blocks(&self) -> &[BlockTrace] {
        &self.blocks
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    /// `[K]` class logits, or `[2×T]` start/end logits for QA.
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Predicted class (QA: predicted start position).
    pub fn predicted(&self) -> usize {
        self.predicted
    }

    pub fn logit(&self, target: Target) -> Result<f64> {
        let t = self.seq_len();
        match target {
            Target::Class(c) if self.logits.shape().len() == 1 && c < self.logits.len() => {
                Ok(self.logits.data()[c])
            }
            Target::Start(p) if self.logits.shape().len() == 2 && p < t => Ok(self.logits.get(0, p)),
            Target::End(p) if self.logits.shape().len() == 2 && p < t => Ok(self.logits.get(1, p)),
            other => Err(Error::State(format!(
                "target {other:?} does not exist for logits of shape {:?}",
                self.logits.shape()
            ))),
        }
    }

    pub(crate) fn check_complete(&self, cfg: &ModelConfig) -> Result<()> {
        if self.blocks.len() != cfg.num_blocks || self.num_heads != cfg.num_heads {
            return Err(Error::State(format!(
                "trace has {} blocks × {} heads, model has {} × {}",
                self.blocks.len(),
                self.num_heads,
                cfg.num_blocks,
                cfg.num_heads
            )));
        }
        Ok(())
    }
}

/// Replaces the post-softmax attention of one block during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOverride<'a> {
    pub block: usize,
    /// `[M×T×T]`
    pub attention: &'a Tensor,
}

#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub logits: Tensor,
    pub label: usize,
    pub confidence: f64,
}

/// Immutable encoder: config plus weights.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    pub fn load(manifest: &std::path::Path) -> Result<Self> {
        let (config, weights) = super::weights::load_weights(manifest)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn check_input(&self, token_ids: &[usize]) -> Result<()> {
        if token_ids.is_empty() || token_ids.len() > self.config.max_positions {
            return Err(Error::Data(format!(
                "sequence length {} outside 1..={}",
                token_ids.len(),
                self.config.max_positions
            )));
        }
        if let Some((pos, id)) = token_ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id >= self.config.vocab_size)
        {
            return Err(Error::Data(format!(
                "token id {id} at position {pos} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if self.config.task == Task::Classification && self.config.cls_index >= token_ids.len() {
            return Err(Error::Data(format!(
                "cls_index {} beyond sequence length {}",
                self.config.cls_index,
                token_ids.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, token_ids: &[usize]) -> Result<ForwardTrace> {
        self.forward_with(token_ids, None)
    }

    /// Forward pass that optionally substitutes one block's attention matrices.
    pub fn forward_with(
        &self,
        token_ids: &[usize],
        attention_override: Option<AttentionOverride<'_>>,
    ) -> Result<ForwardTrace> {
        self.check_input(token_ids)?;
        let cfg = &self.config;
        let w = &self.weights;
        let t = token_ids.len();
        let d = cfg.hidden_dim;

        let mut emb = Vec::with_capacity(t * d);
        for (pos, &id) in token_ids.iter().enumerate() {
            let tok = w.token_embeddings.row(id);
            let p = w.position_embeddings.row(pos);
            emb.extend(tok.iter().zip(p).map(|(a, b)| a + b));
        }
        let embeddings = Tensor::new(vec![t, d], emb)?;
        let embedded = layer_norm(&embeddings, &w.emb_ln_gain, &w.emb_ln_bias, cfg.layer_norm_eps)?;

        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let mut x = embedded.clone();
        for (b, bw) in w.blocks.iter().enumerate() {
            let over = attention_override
                .filter(|o| o.block == b)
                .map(|o| o.attention);
            let trace = self.block_forward(bw, x, over)?;
            x = trace.output.clone();
            blocks.push(trace);
        }

        let (logits, predicted) = match cfg.task {
            Task::Classification => {
                let cls = Tensor::new(vec![1, d], x.row(cfg.cls_index).to_vec())?;
                let logits = matmul(&cls, &w.head_weight)?.add_row_vector(&w.head_bias)?;
                let logits = logits.reshape(vec![cfg.num_classes])?;
                let predicted = numerics::argmax(logits.data());
                (logits, predicted)
            }
            Task::Qa => {
                let per_row = matmul(&x, &w.head_weight)?.add_row_vector(&w.head_bias)?;
                let logits = per_row.transpose();
                let predicted = numerics::argmax(logits.row(0));
                (logits, predicted)
            }
        };

        Ok(ForwardTrace {
            token_ids: token_ids.to_vec(),
            embeddings,
            embedded,
            blocks,
            logits,
            predicted,
            num_heads: cfg.num_heads,
        })
    }

    fn block_forward(
        &self,
        bw: &BlockWeights,
        input: Tensor,
        attention_override: Option<&Tensor>,
    ) -> Result<BlockTrace> {
        let cfg = &self.config;
        let t = input.rows();
        let m = cfg.num_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let query = matmul(&input, &bw.wq)?.add_row_vector(&bw.bq)?;
        let key = matmul(&input, &bw.wk)?.add_row_vector(&bw.bk)?;
        let value = matmul(&input, &bw.wv)?.add_row_vector(&bw.bv)?;

        let attention = match attention_override {
            Some(a) => {
                if a.shape() != [m, t, t] {
                    return Err(Error::dim(format!(
                        "attention override {:?}, expected {:?}",
                        a.shape(),
                        [m, t, t]
                    )));
                }
                a.clone()
            }
            None => {
                let mut heads = Vec::with_capacity(m);
                for h in 0..m {
                    let qh = query.col_block(h * dh, dh);
                    let kh = key.col_block(h * dh, dh);
                    let mut scores = matmul(&qh, &kh.transpose())?.scale(scale);
                    for i in 0..t {
                        let row = scores.row_mut(i);
                        if cfg.causal {
                            for v in &mut row[i + 1..] {
                                *v = f64::NEG_INFINITY;
                            }
                        }
                        softmax_in_place(row);
                    }
                    heads.push(scores);
                }
                Tensor::stack(&heads)?
            }
        };

        let mut context = Tensor::zeros(&[t, cfg.hidden_dim]);
        for h in 0..m {
            let ctx_h = matmul(&attention.slab(h), &value.col_block(h * dh, dh))?;
            context.set_col_block(h * dh, &ctx_h);
        }
        let attn_out = matmul(&context, &bw.wo)?.add_row_vector(&bw.bo)?;
        let resid1 = input.add(&attn_out)?;
        let hidden1 = layer_norm(&resid1, &bw.ln1_gain, &bw.ln1_bias, cfg.layer_norm_eps)?;
        let ffn_pre = matmul(&hidden1, &bw.w1)?.add_row_vector(&bw.b1)?;
        let ffn_act = gelu(&ffn_pre);
        let ffn_out = matmul(&ffn_act, &bw.w2)?.add_row_vector(&bw.b2)?;
        let resid2 = hidden1.add(&ffn_out)?;
        let output = layer_norm(&resid2, &bw.ln2_gain, &bw.ln2_bias, cfg.layer_norm_eps)?;

        Ok(BlockTrace {
            input,
            query,
            key,
            value,
            attention,
            context,
            attn_out,
            resid1,
            hidden1,
            ffn_pre,
            ffn_act,
            ffn_out,
            resid2,
            output,
        })
    }

    /// Logits, predicted label (smallest index on ties) and its softmax confidence.
    pub fn predict(&self, token_ids: &[usize]) -> Result<Prediction> {
        let trace = self.forward(token_ids)?;
        Ok(prediction_from_trace(&trace))
    }
}

pub(crate) fn prediction_from_trace(trace: &ForwardTrace) -> Prediction {
    let logits = trace.logits().clone();
    let scores = if logits.shape().len() == 2 {
        logits.row(0).to_vec()
    } else {
        logits.data().to_vec()
    };
    let mut probs = scores;
    softmax_in_place(&mut probs);
    let label = trace.predicted();
    Prediction {
        logits,
        label,
        confidence: probs[label],
    }
}
