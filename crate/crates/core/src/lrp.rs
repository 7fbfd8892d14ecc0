//! Relevance propagation from a one-hot output back to per-head attention
//! relevance.
//!
//! Linear layers use the positive-subset rule, two-operand products use the
//! generic Taylor rule with a half/half operand split, residual additions are
//! split proportionally to their operands, and layer norm / GELU pass
//! relevance through unchanged. Every step ends with the sum of relevance
//! equal to the sum that entered it.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model, Target};
use crate::numerics::Tensor;

/// Signed stabilizer added to every relevance denominator.
pub const LRP_EPS: f64 = 1e-9;

/// Sums below this are treated as zero when rescaling.
const TINY: f64 = 1e-300;

fn stabilize(z: f64) -> f64 {
    if z >= 0.0 {
        z + LRP_EPS
    } else {
        z - LRP_EPS
    }
}

/// One-hot `R^(0)` of length `k` at `target`.
pub fn init_relevance(target: usize, k: usize) -> Result<Tensor> {
    if target >= k {
        return Err(Error::dim(format!("target {target} out of range for {k} outputs")));
    }
    let mut data = vec![0.0; k];
    data[target] = 1.0;
    Tensor::new(vec![k], data)
}

/// Positive-subset rule for `z = x·w`: only contributions `x_j·w_ji ≥ 0`
/// receive relevance, in proportion to their share of the positive sum.
pub fn relprop_linear(x: &Tensor, w: &Tensor, r_in: &Tensor) -> Result<Tensor> {
    let (t, j_dim) = (x.rows(), x.cols());
    let i_dim = w.cols();
    if w.rows() != j_dim || r_in.rows() != t || r_in.cols() != i_dim {
        return Err(Error::dim(format!(
            "relprop_linear with x {:?}, w {:?}, R {:?}",
            x.shape(),
            w.shape(),
            r_in.shape()
        )));
    }
    let mut out = Tensor::zeros(&[t, j_dim]);
    let mut denom = vec![0.0; i_dim];
    for row in 0..t {
        let xr = x.row(row);
        denom.iter_mut().for_each(|v| *v = 0.0);
        for (j, &xj) in xr.iter().enumerate() {
            for (i, d) in denom.iter_mut().enumerate() {
                let z = xj * w.get(j, i);
                if z >= 0.0 {
                    *d += z;
                }
            }
        }
        let scaled: Vec<f64> = denom
            .iter()
            .zip(r_in.row(row))
            .map(|(&d, &r)| r / stabilize(d))
            .collect();
        let out_row = out.row_mut(row);
        for (j, &xj) in xr.iter().enumerate() {
            let mut acc = 0.0;
            for (i, &s) in scaled.iter().enumerate() {
                let z = xj * w.get(j, i);
                if z >= 0.0 {
                    acc += z * s;
                }
            }
            out_row[j] = acc;
        }
    }
    Ok(out)
}

/// Generic two-operand rule for `L = X·Y`, split half to each operand and
/// rescaled so the two halves together carry exactly `Σ R_in`.
pub fn relprop_matmul(x: &Tensor, y: &Tensor, r_in: &Tensor) -> Result<(Tensor, Tensor)> {
    let (t, k) = (x.rows(), x.cols());
    let c = y.cols();
    if y.rows() != k || r_in.rows() != t || r_in.cols() != c {
        return Err(Error::dim(format!(
            "relprop_matmul with X {:?}, Y {:?}, R {:?}",
            x.shape(),
            y.shape(),
            r_in.shape()
        )));
    }
    let mut r_x = Tensor::zeros(&[t, k]);
    let mut r_y = Tensor::zeros(&[k, c]);
    for row in 0..t {
        for col in 0..c {
            let r = r_in.get(row, col);
            if r == 0.0 {
                continue;
            }
            let mut l = 0.0;
            for p in 0..k {
                l += x.get(row, p) * y.get(p, col);
            }
            let s = r / stabilize(l);
            for p in 0..k {
                let contrib = x.get(row, p) * y.get(p, col) * s;
                r_x.data_mut()[row * k + p] += contrib;
                r_y.data_mut()[p * c + col] += contrib;
            }
        }
    }
    let r_x = r_x.scale(0.5);
    let r_y = r_y.scale(0.5);
    let total = r_in.sum();
    let got = r_x.sum() + r_y.sum();
    if got.abs() > TINY {
        let f = total / got;
        Ok((r_x.scale(f), r_y.scale(f)))
    } else {
        Ok((r_x, r_y))
    }
}

/// Proportional split of relevance over the two summands of a residual
/// connection, then rescaled so `Σ R_a + Σ R_b = Σ R_in`.
pub fn relprop_add(a: &Tensor, b: &Tensor, r_in: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.shape() != b.shape() || a.shape() != r_in.shape() {
        return Err(Error::dim(format!(
            "relprop_add with {:?}, {:?}, R {:?}",
            a.shape(),
            b.shape(),
            r_in.shape()
        )));
    }
    let n = a.len();
    let mut ra = Vec::with_capacity(n);
    let mut rb = Vec::with_capacity(n);
    for ((&xa, &xb), &r) in a.data().iter().zip(b.data()).zip(r_in.data()) {
        let s = r / stabilize(xa + xb);
        ra.push(xa * s);
        rb.push(xb * s);
    }
    let ra = Tensor::new(a.shape().to_vec(), ra)?;
    let rb = Tensor::new(a.shape().to_vec(), rb)?;
    let (sa, sb) = (ra.sum(), rb.sum());
    let total = r_in.sum();
    let denom = sa.abs() + sb.abs();
    if denom <= TINY {
        return Ok((r_in.scale(0.5), r_in.scale(0.5)));
    }
    let share = |r: Tensor, s: f64| {
        if s.abs() <= TINY {
            Tensor::zeros(r.shape())
        } else {
            r.scale(s.abs() / denom * total / s)
        }
    };
    Ok((share(ra, sa), share(rb, sb)))
}

/// Layer norm is relevance-transparent.
pub fn relprop_layer_norm(r: &Tensor) -> Tensor {
    r.clone()
}

/// GELU is relevance-transparent.
pub fn relprop_gelu(r: &Tensor) -> Tensor {
    r.clone()
}

/// Rescales `r` to sum to `target`; returns it unchanged when its sum is ~0.
pub fn renormalize_to(r: Tensor, target: f64) -> Tensor {
    let s = r.sum();
    if s.abs() <= TINY {
        r
    } else {
        r.scale(target / s)
    }
}

/// Relevance at one cut through the network. Branches that run in parallel
/// (residual path and sublayer) are kept as separate parts.
#[derive(Debug, Clone, Serialize)]
pub struct RelevanceLayer {
    pub label: String,
    pub parts: Vec<Tensor>,
}

impl RelevanceLayer {
    fn new(label: impl Into<String>, parts: Vec<Tensor>) -> Self {
        Self {
            label: label.into(),
            parts,
        }
    }

    pub fn sum(&self) -> f64 {
        self.parts.iter().map(Tensor::sum).sum()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RelevanceState {
    pub target: Target,
    /// Cuts from the one-hot output (index 0) down to the first block's input.
    pub layers: Vec<RelevanceLayer>,
    /// Per-block `[M×T×T]` attention relevance, in forward block order.
    pub head_relevance: Vec<Tensor>,
}

impl RelevanceState {
    /// Largest `|Σ R^(n) − Σ R^(n−1)| / max(1, |Σ R^(n−1)|)` over consecutive cuts.
    pub fn max_conservation_error(&self) -> f64 {
        self.layers
            .windows(2)
            .map(|w| {
                let prev = w[0].sum();
                (w[1].sum() - prev).abs() / prev.abs().max(1.0)
            })
            .fold(0.0, f64::max)
    }

    /// Relevance at the deepest cut (input of the first block).
    pub fn deepest(&self) -> &RelevanceLayer {
        self.layers.last().expect("at least the output layer")
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PropagationOptions<'a> {
    /// `gate[b][m] == false` drops head `m` of block `b` from the relevance
    /// that continues to lower blocks.
    pub head_gate: Option<&'a [Vec<bool>]>,
}

pub fn propagate(model: &Model, trace: &ForwardTrace, target: Target) -> Result<RelevanceState> {
    let r0 = init_relevance(target.head_column(), model.config().output_width())?;
    propagate_from(model, trace, target, r0, PropagationOptions::default())
}

/// Propagation starting from an arbitrary output relevance vector.
pub fn propagate_from(
    model: &Model,
    trace: &ForwardTrace,
    target: Target,
    r0: Tensor,
    options: PropagationOptions<'_>,
) -> Result<RelevanceState> {
    let cfg = model.config();
    trace.check_complete(cfg)?;
    trace.logit(target)?;
    if r0.len() != cfg.output_width() {
        return Err(Error::dim(format!(
            "output relevance of length {}, head width {}",
            r0.len(),
            cfg.output_width()
        )));
    }
    let w = model.weights();
    let t = trace.seq_len();
    let d = cfg.hidden_dim;
    let m = cfg.num_heads;
    let dh = cfg.head_dim();
    let top = &trace.blocks()[cfg.num_blocks - 1];

    let mut layers = vec![RelevanceLayer::new("output", vec![r0.clone()])];

    let row = target.source_row(cfg);
    let x_row = Tensor::new(vec![1, d], top.output.row(row).to_vec())?;
    let r0_row = r0.clone().reshape(vec![1, r0.len()])?;
    let r_row = renormalize_to(relprop_linear(&x_row, &w.head_weight, &r0_row)?, r0.sum());
    let mut r = Tensor::zeros(&[t, d]);
    r.row_mut(row).copy_from_slice(r_row.data());
    layers.push(RelevanceLayer::new(
        format!("block{}.output", cfg.num_blocks - 1),
        vec![r.clone()],
    ));

    let mut head_relevance = vec![Tensor::zeros(&[1]); cfg.num_blocks];
    for b in (0..cfg.num_blocks).rev() {
        let bt = &trace.blocks()[b];
        let bw = &w.blocks[b];
        let tag = |s: &str| format!("block{b}.{s}");

        let r_resid2 = relprop_layer_norm(&r);
        layers.push(RelevanceLayer::new(tag("resid2"), vec![r_resid2.clone()]));

        let (r_h1_res, r_ffn_out) = relprop_add(&bt.hidden1, &bt.ffn_out, &r_resid2)?;
        layers.push(RelevanceLayer::new(
            tag("resid2.split"),
            vec![r_h1_res.clone(), r_ffn_out.clone()],
        ));

        let r_act = renormalize_to(relprop_linear(&bt.ffn_act, &bw.w2, &r_ffn_out)?, r_ffn_out.sum());
        layers.push(RelevanceLayer::new(tag("ffn_act"), vec![r_h1_res.clone(), r_act.clone()]));

        let r_pre = relprop_gelu(&r_act);
        layers.push(RelevanceLayer::new(tag("ffn_pre"), vec![r_h1_res.clone(), r_pre.clone()]));

        let r_h1_ffn = renormalize_to(relprop_linear(&bt.hidden1, &bw.w1, &r_pre)?, r_pre.sum());
        let r_hidden1 = r_h1_res.add(&r_h1_ffn)?;
        layers.push(RelevanceLayer::new(tag("hidden1"), vec![r_hidden1.clone()]));

        let r_resid1 = relprop_layer_norm(&r_hidden1);
        layers.push(RelevanceLayer::new(tag("resid1"), vec![r_resid1.clone()]));

        let (r_x_res, r_attn_out) = relprop_add(&bt.input, &bt.attn_out, &r_resid1)?;
        layers.push(RelevanceLayer::new(
            tag("resid1.split"),
            vec![r_x_res.clone(), r_attn_out.clone()],
        ));

        let mut r_ctx =
            renormalize_to(relprop_linear(&bt.context, &bw.wo, &r_attn_out)?, r_attn_out.sum());
        if let Some(gate) = options.head_gate {
            r_ctx = gate_heads(r_ctx, &gate[b], dh);
        }
        layers.push(RelevanceLayer::new(tag("context"), vec![r_x_res.clone(), r_ctx.clone()]));

        let mut r_heads = Vec::with_capacity(m);
        let mut r_value = Tensor::zeros(&[t, d]);
        let mut r_query = Tensor::zeros(&[t, d]);
        let mut r_key = Tensor::zeros(&[t, d]);
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..m {
            let a = bt.head_attention(h);
            let v = bt.value.col_block(h * dh, dh);
            let (r_a, r_v) = relprop_matmul(&a, &v, &r_ctx.col_block(h * dh, dh))?;
            r_value.set_col_block(h * dh, &r_v);

            // softmax passes relevance straight to the scaled scores q·kᵀ/√d_h
            let q = bt.query.col_block(h * dh, dh).scale(scale);
            let kt = bt.key.col_block(h * dh, dh).transpose();
            let (r_q, r_kt) = relprop_matmul(&q, &kt, &r_a)?;
            r_query.set_col_block(h * dh, &r_q);
            r_key.set_col_block(h * dh, &r_kt.transpose());
            r_heads.push(r_a);
        }
        let r_att = Tensor::stack(&r_heads)?;
        layers.push(RelevanceLayer::new(
            tag("attention"),
            vec![r_x_res.clone(), r_att.clone(), r_value.clone()],
        ));
        layers.push(RelevanceLayer::new(
            tag("scores"),
            vec![r_x_res.clone(), r_query.clone(), r_key.clone(), r_value.clone()],
        ));
        head_relevance[b] = r_att;

        let r_xq = renormalize_to(relprop_linear(&bt.input, &bw.wq, &r_query)?, r_query.sum());
        let r_xk = renormalize_to(relprop_linear(&bt.input, &bw.wk, &r_key)?, r_key.sum());
        let r_xv = renormalize_to(relprop_linear(&bt.input, &bw.wv, &r_value)?, r_value.sum());
        let mut r_input = r_x_res;
        r_input.add_assign(&r_xq)?;
        r_input.add_assign(&r_xk)?;
        r_input.add_assign(&r_xv)?;
        layers.push(RelevanceLayer::new(tag("input"), vec![r_input.clone()]));
        r = r_input;
    }

    Ok(RelevanceState {
        target,
        layers,
        head_relevance,
    })
}

/// Zeroes gated-off heads' columns of the context relevance and rescales the
/// survivors to the original total. Leaves `r` unchanged if nothing survives.
fn gate_heads(r: Tensor, gate: &[bool], dh: usize) -> Tensor {
    let total = r.sum();
    let mut gated = r.clone();
    for (h, &keep) in gate.iter().enumerate() {
        if !keep {
            gated.set_col_block(h * dh, &Tensor::zeros(&[r.rows(), dh]));
        }
    }
    if gated.sum().abs() <= TINY {
        return r;
    }
    renormalize_to(gated, total)
}
