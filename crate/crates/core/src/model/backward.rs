//! Reverse-mode gradients of one output logit with respect to every
//! post-softmax attention matrix.

use serde::Serialize;

use super::forward::{BlockTrace, ForwardTrace, Model, Target};
use super::weights::BlockWeights;
use crate::error::{Error, Result};
use crate::numerics::{gelu_grad_scalar, matmul, row_moments, Tensor};

/// `∂logit/∂A` for every block, each `[M×T×T]` and aligned with the trace.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionGrads {
    pub per_block: Vec<Tensor>,
}

impl AttentionGrads {
    pub fn block(&self, b: usize) -> &Tensor {
        &self.per_block[b]
    }

    pub fn scale(&self, s: f64) -> AttentionGrads {
        AttentionGrads {
            per_block: self.per_block.iter().map(|g| g.scale(s)).collect(),
        }
    }
}

/// Gradient of a layer norm's input given the gradient of its output.
fn layer_norm_backward(input: &Tensor, gain: &Tensor, eps: f64, grad_out: &Tensor) -> Tensor {
    let d = input.cols();
    let moments = row_moments(input, eps);
    let mut grad_in = Tensor::zeros(input.shape());
    for (i, &(mean, rstd)) in moments.iter().enumerate() {
        let x = input.row(i);
        let dy = grad_out.row(i);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxhat = dy[j] * gain.data()[j];
            let xhat = (x[j] - mean) * rstd;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let out = grad_in.row_mut(i);
        for j in 0..d {
            let dxhat = dy[j] * gain.data()[j];
            let xhat = (x[j] - mean) * rstd;
            out[j] = rstd / d as f64 * (d as f64 * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    grad_in
}

impl Model {
    /// Exact gradients of the target logit with respect to each block's
    /// post-softmax attention, treating that matrix as a free variable.
    pub fn backward_attention_grads(
        &self,
        trace: &ForwardTrace,
        target: Target,
    ) -> Result<AttentionGrads> {
        let cfg = self.config();
        trace.check_complete(cfg)?;
        trace.logit(target)?;
        let t = trace.seq_len();
        let d = cfg.hidden_dim;
        let w = self.weights();

        let mut grad = Tensor::zeros(&[t, d]);
        let col = target.head_column();
        let row = target.source_row(cfg);
        for j in 0..d {
            grad.set(row, j, w.head_weight.get(j, col));
        }

        let mut per_block = vec![Tensor::zeros(&[1]); cfg.num_blocks];
        for b in (0..cfg.num_blocks).rev() {
            let (grad_input, grad_attention) =
                self.block_backward(&w.blocks[b], &trace.blocks()[b], &grad)?;
            per_block[b] = grad_attention;
            grad = grad_input;
        }
        Ok(AttentionGrads { per_block })
    }

    fn block_backward(
        &self,
        bw: &BlockWeights,
        bt: &BlockTrace,
        grad_output: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let cfg = self.config();
        let eps = cfg.layer_norm_eps;
        let m = cfg.num_heads;
        let dh = cfg.head_dim();
        let t = bt.input.rows();
        let scale = 1.0 / (dh as f64).sqrt();

        let grad_resid2 = layer_norm_backward(&bt.resid2, &bw.ln2_gain, eps, grad_output);
        let grad_act = matmul(&grad_resid2, &bw.w2.transpose())?;
        let grad_pre = grad_act.zip_with(&bt.ffn_pre, |g, x| g * gelu_grad_scalar(x))?;
        let mut grad_hidden1 = grad_resid2;
        grad_hidden1.add_assign(&matmul(&grad_pre, &bw.w1.transpose())?)?;
        let grad_resid1 = layer_norm_backward(&bt.resid1, &bw.ln1_gain, eps, &grad_hidden1);

        let grad_context = matmul(&grad_resid1, &bw.wo.transpose())?;
        let mut grad_query = Tensor::zeros(&[t, cfg.hidden_dim]);
        let mut grad_key = Tensor::zeros(&[t, cfg.hidden_dim]);
        let mut grad_value = Tensor::zeros(&[t, cfg.hidden_dim]);
        let mut grad_attention = Vec::with_capacity(m);
        for h in 0..m {
            let a = bt.head_attention(h);
            let v = bt.value.col_block(h * dh, dh);
            let g_ctx = grad_context.col_block(h * dh, dh);
            let g_a = matmul(&g_ctx, &v.transpose())?;
            grad_value.set_col_block(h * dh, &matmul(&a.transpose(), &g_ctx)?);

            // softmax: dS = A ⊙ (dA − rowsum(dA ⊙ A))
            let mut g_scores = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let dot: f64 = a.row(i).iter().zip(g_a.row(i)).map(|(x, y)| x * y).sum();
                for j in 0..t {
                    g_scores.set(i, j, a.get(i, j) * (g_a.get(i, j) - dot));
                }
            }
            let q = bt.query.col_block(h * dh, dh);
            let k = bt.key.col_block(h * dh, dh);
            grad_query.set_col_block(h * dh, &matmul(&g_scores, &k)?.scale(scale));
            grad_key.set_col_block(h * dh, &matmul(&g_scores.transpose(), &q)?.scale(scale));
            grad_attention.push(g_a);
        }

        let mut grad_input = grad_resid1;
        grad_input.add_assign(&matmul(&grad_query, &bw.wq.transpose())?)?;
        grad_input.add_assign(&matmul(&grad_key, &bw.wk.transpose())?)?;
        grad_input.add_assign(&matmul(&grad_value, &bw.wv.transpose())?)?;
        let grad_attention = Tensor::stack(&grad_attention)?;
        if !grad_attention.is_finite() {
            return Err(Error::Numeric("non-finite attention gradient".into()));
        }
        Ok((grad_input, grad_attention))
    }
}
