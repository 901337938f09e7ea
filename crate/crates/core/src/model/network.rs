//! Forward pass with activation caching, and the matching backward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Axis};

use super::{Block, Mat, ModelConfig, Params, TrainingBatchItem};
use crate::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

struct LnCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    a: Mat,
    qkv: Mat,
    /// Attention weights per head, zero above the diagonal.
    attn: Vec<Mat>,
    att: Mat,
    ln2: LnCache,
    c: Mat,
    pre_gelu: Mat,
    post_gelu: Mat,
}

pub(super) struct Cache {
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    xf: Mat,
}

fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> (Mat, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Mat::zeros((t, d));
    let mut rstd = Vec::with_capacity(t);
    for (row, mut out) in x.rows().into_iter().zip(xhat.rows_mut()) {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        out.zip_mut_with(&row, |o, &v| *o = (v - mean) * r);
        rstd.push(r);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Mat, g: &Mat, cache: &LnCache, dg: &mut Mat, db: &mut Mat) -> Mat {
    let d = dy.ncols() as f64;
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let mut dx = Mat::zeros(dy.dim());
    for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dh_xh = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let r = cache.rstd[i];
        for ((o, &a), &b) in out.iter_mut().zip(dh).zip(xh) {
            *o = r * (a - mean_dh - b * mean_dh_xh);
        }
    }
    dx
}

fn linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    x.dot(w) + b
}

/// Accumulates `dw += x^T dy`, `db += colsum(dy)` and returns `dy w^T`.
fn linear_backward(x: &Mat, w: &Mat, dy: &Mat, dw: &mut Mat, db: &mut Mat) -> Mat {
    general_mat_mul(1.0, &x.t(), dy, 1.0, dw);
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&w.t())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(super) fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub(super) fn log_softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

fn block_forward(cfg: &ModelConfig, blk: &Block, x: &mut Mat) -> BlockCache {
    let t = x.nrows();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, ln1) = layer_norm(x, &blk.ln1_g, &blk.ln1_b);
    let qkv = linear(&a, &blk.w_qkv, &blk.b_qkv);
    let mut att = Mat::zeros((t, d));
    let mut attn = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut p = q.dot(&k.t());
        for i in 0..t {
            let mut row = p.row_mut(i);
            let max = (0..=i).map(|j| row[j] * scale).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=i {
                let e = (row[j] * scale - max).exp();
                row[j] = e;
                sum += e;
            }
            for j in 0..=i {
                row[j] /= sum;
            }
            for j in i + 1..t {
                row[j] = 0.0;
            }
        }
        att.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
        attn.push(p);
    }
    *x += &linear(&att, &blk.w_o, &blk.b_o);

    let (c, ln2) = layer_norm(x, &blk.ln2_g, &blk.ln2_b);
    let pre_gelu = linear(&c, &blk.w_fc, &blk.b_fc);
    let post_gelu = pre_gelu.mapv(gelu);
    *x += &linear(&post_gelu, &blk.w_proj, &blk.b_proj);

    BlockCache {
        ln1,
        a,
        qkv,
        attn,
        att,
        ln2,
        c,
        pre_gelu,
        post_gelu,
    }
}

/// Returns the logits (`len x vocab`) and the activations needed for backward.
pub(super) fn forward(cfg: &ModelConfig, p: &Params, ids: &[TokenId]) -> (Mat, Cache) {
    let t = ids.len();
    let mut x = Mat::zeros((t, cfg.d_model));
    for (j, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(j);
        row += &p.tok_emb.row(id as usize);
        row += &p.pos_emb.row(j);
    }
    let blocks = p.blocks.iter().map(|blk| block_forward(cfg, blk, &mut x)).collect();
    let (xf, lnf) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
    let logits = linear(&xf, &p.w_out, &p.b_out);
    (logits, Cache { blocks, lnf, xf })
}

fn block_backward(cfg: &ModelConfig, blk: &Block, c: &BlockCache, dx: &mut Mat, g: &mut Block) {
    let t = dx.nrows();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP branch
    let dpost = linear_backward(&c.post_gelu, &blk.w_proj, dx, &mut g.w_proj, &mut g.b_proj);
    let mut dpre = dpost;
    dpre.zip_mut_with(&c.pre_gelu, |d, &x| *d *= gelu_grad(x));
    let dc = linear_backward(&c.c, &blk.w_fc, &dpre, &mut g.w_fc, &mut g.b_fc);
    *dx += &layer_norm_backward(&dc, &blk.ln2_g, &c.ln2, &mut g.ln2_g, &mut g.ln2_b);

    // Attention branch
    let datt = linear_backward(&c.att, &blk.w_o, dx, &mut g.w_o, &mut g.b_o);
    let mut dqkv = Mat::zeros((t, 3 * d));
    for h in 0..cfg.n_heads {
        let q = c.qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = c.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = c.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let p = &c.attn[h];
        let datt_h = datt.slice(s![.., h * dh..(h + 1) * dh]);
        let dp = datt_h.dot(&v.t());
        dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
            .assign(&p.t().dot(&datt_h));
        let mut ds = Mat::zeros((t, t));
        for i in 0..t {
            let dot: f64 = (0..=i).map(|j| p[[i, j]] * dp[[i, j]]).sum();
            for j in 0..=i {
                ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
            }
        }
        dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
        dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
            .assign(&ds.t().dot(&q));
    }
    let da = linear_backward(&c.a, &blk.w_qkv, &dqkv, &mut g.w_qkv, &mut g.b_qkv);
    *dx += &layer_norm_backward(&da, &blk.ln1_g, &c.ln1, &mut g.ln1_g, &mut g.ln1_b);
}

/// Adds `scale * d(sum of label NLL)/d(params)` into `grads`; returns the
/// unscaled summed negative log-likelihood of the supervised labels.
pub(super) fn loss_and_backward(
    cfg: &ModelConfig,
    p: &Params,
    item: &TrainingBatchItem,
    scale: f64,
    grads: &mut Params,
) -> f64 {
    let ids = &item.input_ids;
    let (mut logits, cache) = forward(cfg, p, ids);
    softmax_rows(&mut logits);
    let mut dlogits = logits;
    let mut nll = 0.0;
    for (j, label) in item.label_ids.iter().enumerate() {
        let mut row = dlogits.row_mut(j);
        match label {
            Some(t) => {
                let t = *t as usize;
                nll -= row[t].ln();
                row[t] -= 1.0;
                row *= scale;
            }
            None => row.fill(0.0),
        }
    }

    let dxf = linear_backward(&cache.xf, &p.w_out, &dlogits, &mut grads.w_out, &mut grads.b_out);
    let mut dx = layer_norm_backward(&dxf, &p.lnf_g, &cache.lnf, &mut grads.lnf_g, &mut grads.lnf_b);
    for ((blk, c), g) in p.blocks.iter().zip(&cache.blocks).zip(&mut grads.blocks).rev() {
        block_backward(cfg, blk, c, &mut dx, g);
    }
    for (j, &id) in ids.iter().enumerate() {
        let row = dx.row(j);
        let mut te = grads.tok_emb.row_mut(id as usize);
        te += &row;
        let mut pe = grads.pos_emb.row_mut(j);
        pe += &row;
    }
    nll
}
