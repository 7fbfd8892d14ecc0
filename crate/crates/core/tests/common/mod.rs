//! Straight-line reference encoder written with plain nested `Vec`s.
//! Shares no code with the library's forward pass.
#![allow(dead_code)]

use headlrp::model::{Model, Task};

type Mat = Vec<Vec<f64>>;

fn mat(t: &headlrp::Tensor) -> Mat {
    let c = t.shape()[t.shape().len() - 1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn vecv(t: &headlrp::Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| {
                    let mut s = b[j];
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w[i][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / sd * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Logits from the reference encoder. `override_attention` replaces the
/// flattened `[M×T×T]` attention of one block.
pub fn reference_logits(
    model: &Model,
    ids: &[usize],
    override_attention: Option<(usize, &[f64])>,
) -> Vec<f64> {
    let cfg = model.config();
    let w = model.weights();
    let t = ids.len();
    let d = cfg.hidden_dim;
    let m = cfg.num_heads;
    let dh = d / m;
    let tok = mat(&w.token_embeddings);
    let pos = mat(&w.position_embeddings);
    let mut x: Mat = (0..t)
        .map(|i| (0..d).map(|j| tok[ids[i]][j] + pos[i][j]).collect())
        .collect();
    x = norm(&x, &vecv(&w.emb_ln_gain), &vecv(&w.emb_ln_bias), cfg.layer_norm_eps);

    for (bi, bw) in w.blocks.iter().enumerate() {
        let q = affine(&x, &mat(&bw.wq), &vecv(&bw.bq));
        let k = affine(&x, &mat(&bw.wk), &vecv(&bw.bk));
        let v = affine(&x, &mat(&bw.wv), &vecv(&bw.bv));
        let mut ctx = vec![vec![0.0; d]; t];
        for h in 0..m {
            for i in 0..t {
                let mut a = vec![0.0; t];
                match override_attention {
                    Some((ob, flat)) if ob == bi => {
                        for j in 0..t {
                            a[j] = flat[h * t * t + i * t + j];
                        }
                    }
                    _ => {
                        let mut logits = vec![f64::NEG_INFINITY; t];
                        for j in 0..t {
                            if cfg.causal && j > i {
                                continue;
                            }
                            let mut s = 0.0;
                            for c in 0..dh {
                                s += q[i][h * dh + c] * k[j][h * dh + c];
                            }
                            logits[j] = s / (dh as f64).sqrt();
                        }
                        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                        for j in 0..t {
                            a[j] = (logits[j] - mx).exp() / z;
                        }
                    }
                }
                for c in 0..dh {
                    let mut s = 0.0;
                    for j in 0..t {
                        s += a[j] * v[j][h * dh + c];
                    }
                    ctx[i][h * dh + c] = s;
                }
            }
        }
        let attn = affine(&ctx, &mat(&bw.wo), &vecv(&bw.bo));
        let h1 = norm(&add(&x, &attn), &vecv(&bw.ln1_gain), &vecv(&bw.ln1_bias), cfg.layer_norm_eps);
        let f1 = affine(&h1, &mat(&bw.w1), &vecv(&bw.b1));
        let g: Mat = f1
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&z| 0.5 * z * (1.0 + libm::erf(z / 2f64.sqrt())))
                    .collect()
            })
            .collect();
        let f2 = affine(&g, &mat(&bw.w2), &vecv(&bw.b2));
        x = norm(&add(&h1, &f2), &vecv(&bw.ln2_gain), &vecv(&bw.ln2_bias), cfg.layer_norm_eps);
    }

    let hw = mat(&w.head_weight);
    let hb = vecv(&w.head_bias);
    match cfg.task {
        Task::Classification => affine(&vec![x[cfg.cls_index].clone()], &hw, &hb).remove(0),
        Task::Qa => {
            let per_row = affine(&x, &hw, &hb);
            let mut out: Vec<f64> = per_row.iter().map(|r| r[0]).collect();
            out.extend(per_row.iter().map(|r| r[1]));
            out
        }
    }
}

/// Central finite differences of one logit with respect to every entry of
/// one block's attention, via the reference encoder.
pub fn finite_difference_attention_grad(
    model: &Model,
    ids: &[usize],
    block: usize,
    base_attention: &[f64],
    logit_index: usize,
    h: f64,
) -> Vec<f64> {
    let mut grads = Vec::with_capacity(base_attention.len());
    let mut a = base_attention.to_vec();
    for i in 0..a.len() {
        let orig = a[i];
        a[i] = orig + h;
        let up = reference_logits(model, ids, Some((block, &a)))[logit_index];
        a[i] = orig - h;
        let down = reference_logits(model, ids, Some((block, &a)))[logit_index];
        a[i] = orig;
        grads.push((up - down) / (2.0 * h));
    }
    grads
}

/// Largest `|a − n| / max(|a|, |n|, 1e-3 · max|a|)`. Entries far below the
/// block's gradient scale are measured against that scale, where central
/// differences with h = 1e-5 resolve only ~1e-10 absolute.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let floor = 1e-3 * analytic.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
