//! Hand-written reverse-mode gradients through the encoder, for parameter
//! gradients (distillation) and head/FFN-unit mask gradients (importance
//! scoring). Not a general tape: the backward pass mirrors the fixed
//! topology of `encoder::forward` step by step and is verified against
//! central finite differences in f64.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::{Activation, EncoderWeights, MaskSet, ModelConfig};
use crate::runtime::Batch;
use crate::tensor::{
    gelu, gelu_grad, gemm, matmul_at, matmul_bt, relu, softmax_row_in_place, Epilogue, Matrix,
    Scalar, ShapeError,
};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("labels required for cross-entropy loss")]
    MissingLabels,
    #[error("teacher logits required for soft cross-entropy distillation loss")]
    MissingTeacher,
    #[error("labels/teacher shape does not match batch: {0}")]
    TargetShape(String),
    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Scalar loss differentiated by `backward`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    KdSoftCe { temperature: f32 },
}

/// Parameter gradients mirroring the weight shapes, plus per-layer mask
/// gradients for heads and post-activation FFN units.
#[derive(Debug, Clone)]
pub struct GradientBundle<T> {
    pub params: EncoderWeights<T>,
    pub head_mask: Vec<Vec<T>>,
    pub ffn_mask: Vec<Vec<T>>,
}

impl<T: Scalar> GradientBundle<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        GradientBundle {
            params: EncoderWeights::zeros(cfg),
            head_mask: vec![vec![T::zero(); cfg.num_heads]; cfg.num_layers],
            ffn_mask: vec![vec![T::zero(); cfg.ffn_size]; cfg.num_layers],
        }
    }
}

struct LnCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
}

fn ln_forward<T: Scalar>(x: &Matrix<T>, gamma: &[T], beta: &[T], eps: T) -> (Matrix<T>, LnCache<T>) {
    let (rows, cols) = (x.rows(), x.cols());
    let n = T::from_f64(cols as f64);
    let mut out = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = x.row(r);
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let is = (var + eps).sqrt().recip();
        inv_std[r] = is;
        let xh = xhat.row_mut(r);
        let o = out.row_mut(r);
        for j in 0..cols {
            xh[j] = (row[j] - mean) * is;
            o[j] = xh[j] * gamma[j] + beta[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn ln_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    gamma: &[T],
) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let (rows, cols) = (dy.rows(), dy.cols());
    let n = T::from_f64(cols as f64);
    let mut dx = Matrix::zeros(rows, cols);
    let mut dgamma = vec![T::zero(); cols];
    let mut dbeta = vec![T::zero(); cols];
    for r in 0..rows {
        let dy_r = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut m1 = T::zero(); // mean of dxhat
        let mut m2 = T::zero(); // mean of dxhat * xhat
        for j in 0..cols {
            let dxh = dy_r[j] * gamma[j];
            m1 = m1 + dxh;
            m2 = m2 + dxh * xh[j];
            dgamma[j] = dgamma[j] + dy_r[j] * xh[j];
            dbeta[j] = dbeta[j] + dy_r[j];
        }
        m1 = m1 / n;
        m2 = m2 / n;
        let is = cache.inv_std[r];
        let dx_r = dx.row_mut(r);
        for j in 0..cols {
            let dxh = dy_r[j] * gamma[j];
            dx_r[j] = is * (dxh - m1 - xh[j] * m2);
        }
    }
    (dx, dgamma, dbeta)
}

struct LayerCache<T> {
    x_in: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>, // indexed example * num_heads + head
    ctx_pre: Matrix<T>,
    ctx: Matrix<T>,
    ln1: LnCache<T>,
    x_mid: Matrix<T>,
    ffn_pre: Matrix<T>,
    ffn_act: Matrix<T>,
    ffn_masked: Matrix<T>,
    ln2: LnCache<T>,
}

struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    emb_ln: LnCache<T>,
    first: Matrix<T>,
    pooled: Matrix<T>,
    logits: Matrix<T>,
}

fn forward_cache<T: Scalar>(
    cfg: &ModelConfig,
    w: &EncoderWeights<T>,
    batch: &Batch,
    masks: &MaskSet<T>,
) -> Result<ForwardCache<T>, AutodiffError> {
    let (b, s) = (batch.batch, batch.seq_len);
    if s > cfg.max_seq_len {
        return Err(AutodiffError::SequenceTooLong { len: s, max: cfg.max_seq_len });
    }
    for &t in &batch.tokens {
        if t as usize >= cfg.vocab {
            return Err(AutodiffError::TokenOutOfRange { token: t, vocab: cfg.vocab });
        }
    }
    let (h, ad, d, a) = (cfg.hidden, cfg.attn_dim(), cfg.head_dim, cfg.num_heads);
    let rows = b * s;
    let eps = T::from_f64(cfg.ln_eps as f64);
    let pad_value = T::from_f64(crate::encoder::PAD_MASK_VALUE as f64);
    let scale = T::from_f64(1.0 / (d as f64).sqrt());

    let mut emb = Matrix::zeros(rows, h);
    for i in 0..b {
        for p in 0..s {
            let id = batch.tokens[i * s + p] as usize;
            let row = emb.row_mut(i * s + p);
            for (j, v) in row.iter_mut().enumerate() {
                *v = w.tok_emb.get(id, j) + w.pos_emb.get(p, j);
            }
        }
    }
    let (mut x, emb_ln) = ln_forward(&emb, &w.emb_ln_gamma, &w.emb_ln_beta, eps);

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (li, lw) in w.layers.iter().enumerate() {
        let x_in = x.clone();
        let q = gemm(&x_in, &lw.wq, Some(&lw.bq), Epilogue::None)?;
        let k = gemm(&x_in, &lw.wk, Some(&lw.bk), Epilogue::None)?;
        let v = gemm(&x_in, &lw.wv, Some(&lw.bv), Epilogue::None)?;

        let mut probs = Vec::with_capacity(b * a);
        let mut ctx_pre = Matrix::zeros(rows, ad);
        let mut ctx = Matrix::zeros(rows, ad);
        for bi in 0..b {
            let pad = &batch.mask[bi * s..(bi + 1) * s];
            for head in 0..a {
                let (c0, c1) = (head * d, (head + 1) * d);
                let qh = sub(&q, bi * s, s, c0, c1);
                let kh = sub(&k, bi * s, s, c0, c1);
                let vh = sub(&v, bi * s, s, c0, c1);
                let mut scores = matmul_bt(&qh, &kh)?;
                for qi in 0..s {
                    let row = scores.row_mut(qi);
                    for ki in 0..s {
                        let add = if pad[ki] == 0 { pad_value } else { T::zero() };
                        row[ki] = row[ki] * scale + add;
                    }
                    softmax_row_in_place(row);
                }
                let chm = gemm(&scores, &vh, None, Epilogue::None)?;
                let hm = masks.head[li][head];
                for qi in 0..s {
                    for (jj, &cv) in chm.row(qi).iter().enumerate() {
                        ctx_pre.set(bi * s + qi, c0 + jj, cv);
                        ctx.set(bi * s + qi, c0 + jj, cv * hm);
                    }
                }
                probs.push(scores);
            }
        }

        let attn_out = gemm(&ctx, &lw.wo, Some(&lw.bo), Epilogue::None)?;
        let mut res = x_in.clone();
        res.add_assign(&attn_out)?;
        let (x_mid, ln1) = ln_forward(&res, &lw.ln_attn_gamma, &lw.ln_attn_beta, eps);

        let ffn_pre = gemm(&x_mid, &lw.w1, Some(&lw.b1), Epilogue::None)?;
        let ffn_act = match cfg.activation {
            Activation::Gelu => ffn_pre.map(gelu),
            Activation::Relu => ffn_pre.map(relu),
        };
        let mut ffn_masked = ffn_act.clone();
        for r in 0..rows {
            for (vv, &mu) in ffn_masked.row_mut(r).iter_mut().zip(&masks.ffn[li]) {
                *vv = *vv * mu;
            }
        }
        let ffn_out = gemm(&ffn_masked, &lw.w2, Some(&lw.b2), Epilogue::None)?;
        let mut res = x_mid.clone();
        res.add_assign(&ffn_out)?;
        let (x_next, ln2) = ln_forward(&res, &lw.ln_ffn_gamma, &lw.ln_ffn_beta, eps);

        layers.push(LayerCache {
            x_in,
            q,
            k,
            v,
            probs,
            ctx_pre,
            ctx,
            ln1,
            x_mid,
            ffn_pre,
            ffn_act,
            ffn_masked,
            ln2,
        });
        x = x_next;
    }

    let mut first = Matrix::zeros(b, h);
    for bi in 0..b {
        first.row_mut(bi).copy_from_slice(x.row(bi * s));
    }
    let pooled = gemm(&first, &w.pooler_w, Some(&w.pooler_b), Epilogue::None)?.map(|v| v.tanh());
    let logits = gemm(&pooled, &w.cls_w, Some(&w.cls_b), Epilogue::None)?;
    Ok(ForwardCache { layers, emb_ln, first, pooled, logits })
}

fn sub<T: Scalar>(m: &Matrix<T>, r0: usize, nrows: usize, c0: usize, c1: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(nrows, c1 - c0);
    for r in 0..nrows {
        out.row_mut(r).copy_from_slice(&m.row(r0 + r)[c0..c1]);
    }
    out
}

fn colsum<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for r in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(r)) {
            *o = *o + v;
        }
    }
    out
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let mut max = T::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    let log_z = max + sum.ln();
    row.iter().map(|&v| v - log_z).collect()
}

/// Mean loss over the batch and its gradient w.r.t. the logits.
fn loss_and_dlogits<T: Scalar>(
    logits: &Matrix<T>,
    labels: Option<&[u32]>,
    teacher_logits: Option<&Matrix<T>>,
    loss: LossKind,
) -> Result<(T, Matrix<T>), AutodiffError> {
    let (b, c) = (logits.rows(), logits.cols());
    let inv_b = T::from_f64(1.0 / b as f64);
    let mut dlogits = Matrix::zeros(b, c);
    let mut total = T::zero();
    match loss {
        LossKind::CrossEntropy => {
            let labels = labels.ok_or(AutodiffError::MissingLabels)?;
            if labels.len() != b {
                return Err(AutodiffError::TargetShape(format!(
                    "{} labels for batch of {b}",
                    labels.len()
                )));
            }
            for bi in 0..b {
                let logp = log_softmax_row(logits.row(bi));
                let y = labels[bi] as usize;
                if y >= c {
                    return Err(AutodiffError::TargetShape(format!("label {y} >= {c} classes")));
                }
                total = total - logp[y];
                let dl = dlogits.row_mut(bi);
                for j in 0..c {
                    let p = logp[j].exp();
                    dl[j] = (p - if j == y { T::one() } else { T::zero() }) * inv_b;
                }
            }
        }
        LossKind::KdSoftCe { temperature } => {
            let teacher = teacher_logits.ok_or(AutodiffError::MissingTeacher)?;
            if teacher.rows() != b || teacher.cols() != c {
                return Err(AutodiffError::TargetShape(format!(
                    "teacher logits {}x{} vs student {b}x{c}",
                    teacher.rows(),
                    teacher.cols()
                )));
            }
            let t = T::from_f64(temperature as f64);
            for bi in 0..b {
                let s_row: Vec<T> = logits.row(bi).iter().map(|&v| v / t).collect();
                let t_row: Vec<T> = teacher.row(bi).iter().map(|&v| v / t).collect();
                let logp_s = log_softmax_row(&s_row);
                let logp_t = log_softmax_row(&t_row);
                let dl = dlogits.row_mut(bi);
                for j in 0..c {
                    let q_t = logp_t[j].exp();
                    total = total - q_t * logp_s[j];
                    dl[j] = (logp_s[j].exp() - q_t) * inv_b / t;
                }
            }
        }
    }
    Ok((total * inv_b, dlogits))
}

/// Exact reverse-mode gradients of the scalar mean loss.
pub fn backward<T: Scalar>(
    cfg: &ModelConfig,
    w: &EncoderWeights<T>,
    batch: &Batch,
    labels: Option<&[u32]>,
    teacher_logits: Option<&Matrix<T>>,
    loss: LossKind,
    masks: &MaskSet<T>,
) -> Result<(T, GradientBundle<T>), AutodiffError> {
    let cache = forward_cache(cfg, w, batch, masks)?;
    let (loss_value, dlogits) = loss_and_dlogits(&cache.logits, labels, teacher_logits, loss)?;

    let (b, s) = (batch.batch, batch.seq_len);
    let (d, a) = (cfg.head_dim, cfg.num_heads);
    let rows = b * s;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut g = GradientBundle::zeros(cfg);

    // Classifier and pooler.
    g.params.cls_w = matmul_at(&cache.pooled, &dlogits)?;
    g.params.cls_b = colsum(&dlogits);
    let d_pooled = matmul_bt(&dlogits, &w.cls_w)?;
    let mut dz = d_pooled;
    for r in 0..b {
        for (v, &p) in dz.row_mut(r).iter_mut().zip(cache.pooled.row(r)) {
            *v = *v * (T::one() - p * p);
        }
    }
    g.params.pooler_w = matmul_at(&cache.first, &dz)?;
    g.params.pooler_b = colsum(&dz);
    let d_first = matmul_bt(&dz, &w.pooler_w)?;

    let mut d_x = Matrix::zeros(rows, cfg.hidden);
    for bi in 0..b {
        d_x.row_mut(bi * s).copy_from_slice(d_first.row(bi));
    }

    for li in (0..cfg.num_layers).rev() {
        let lw = &w.layers[li];
        let lc = &cache.layers[li];
        let gl = &mut g.params.layers[li];

        // FFN block in reverse.
        let (d_res2, dg2, db2) = ln_backward(&d_x, &lc.ln2, &lw.ln_ffn_gamma);
        gl.ln_ffn_gamma = dg2;
        gl.ln_ffn_beta = db2;
        let mut d_x_mid = d_res2.clone();
        let d_ffn_out = d_res2;

        gl.w2 = matmul_at(&lc.ffn_masked, &d_ffn_out)?;
        gl.b2 = colsum(&d_ffn_out);
        let d_ffn_masked = matmul_bt(&d_ffn_out, &lw.w2)?;

        let mut d_ffn_act = d_ffn_masked.clone();
        for r in 0..rows {
            let act_row = lc.ffn_act.row(r);
            let dm_row = d_ffn_masked.row(r);
            let da_row = d_ffn_act.row_mut(r);
            for u in 0..cfg.ffn_size {
                g.ffn_mask[li][u] = g.ffn_mask[li][u] + act_row[u] * dm_row[u];
                da_row[u] = dm_row[u] * masks.ffn[li][u];
            }
        }
        let mut d_ffn_pre = d_ffn_act;
        for r in 0..rows {
            let pre_row = lc.ffn_pre.row(r);
            let dp = d_ffn_pre.row_mut(r);
            for u in 0..cfg.ffn_size {
                let gprime = match cfg.activation {
                    Activation::Gelu => gelu_grad(pre_row[u]),
                    Activation::Relu => {
                        if pre_row[u] > T::zero() {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }
                };
                dp[u] = dp[u] * gprime;
            }
        }
        gl.w1 = matmul_at(&lc.x_mid, &d_ffn_pre)?;
        gl.b1 = colsum(&d_ffn_pre);
        d_x_mid.add_assign(&matmul_bt(&d_ffn_pre, &lw.w1)?)?;

        // Attention block in reverse.
        let (d_res1, dg1, db1) = ln_backward(&d_x_mid, &lc.ln1, &lw.ln_attn_gamma);
        gl.ln_attn_gamma = dg1;
        gl.ln_attn_beta = db1;
        let mut d_x_in = d_res1.clone();
        let d_attn_out = d_res1;

        gl.wo = matmul_at(&lc.ctx, &d_attn_out)?;
        gl.bo = colsum(&d_attn_out);
        let d_ctx = matmul_bt(&d_attn_out, &lw.wo)?;

        let mut dq = Matrix::zeros(rows, cfg.attn_dim());
        let mut dk = Matrix::zeros(rows, cfg.attn_dim());
        let mut dv = Matrix::zeros(rows, cfg.attn_dim());
        for bi in 0..b {
            for head in 0..a {
                let (c0, c1) = (head * d, (head + 1) * d);
                let hm = masks.head[li][head];
                let ctx_pre_s = sub(&lc.ctx_pre, bi * s, s, c0, c1);
                let d_ctx_s = sub(&d_ctx, bi * s, s, c0, c1);
                for r in 0..s {
                    for j in 0..d {
                        g.head_mask[li][head] =
                            g.head_mask[li][head] + ctx_pre_s.get(r, j) * d_ctx_s.get(r, j);
                    }
                }
                let mut d_ctx_pre = d_ctx_s;
                d_ctx_pre.scale_assign(hm);

                let probs = &lc.probs[bi * a + head];
                let vh = sub(&lc.v, bi * s, s, c0, c1);
                let qh = sub(&lc.q, bi * s, s, c0, c1);
                let kh = sub(&lc.k, bi * s, s, c0, c1);

                let d_probs = matmul_bt(&d_ctx_pre, &vh)?;
                let d_vh = matmul_at(probs, &d_ctx_pre)?;
                // Softmax backward per row; the additive pad mask is constant.
                let mut d_scores = Matrix::zeros(s, s);
                for r in 0..s {
                    let p_row = probs.row(r);
                    let dp_row = d_probs.row(r);
                    let mut dot = T::zero();
                    for j in 0..s {
                        dot = dot + p_row[j] * dp_row[j];
                    }
                    let ds = d_scores.row_mut(r);
                    for j in 0..s {
                        ds[j] = p_row[j] * (dp_row[j] - dot);
                    }
                }
                let mut d_qh = gemm(&d_scores, &kh, None, Epilogue::None)?;
                d_qh.scale_assign(scale);
                let mut d_kh = matmul_at(&d_scores, &qh)?;
                d_kh.scale_assign(scale);

                for r in 0..s {
                    dq.row_mut(bi * s + r)[c0..c1].copy_from_slice(d_qh.row(r));
                    dk.row_mut(bi * s + r)[c0..c1].copy_from_slice(d_kh.row(r));
                    dv.row_mut(bi * s + r)[c0..c1].copy_from_slice(d_vh.row(r));
                }
            }
        }

        gl.wq = matmul_at(&lc.x_in, &dq)?;
        gl.bq = colsum(&dq);
        gl.wk = matmul_at(&lc.x_in, &dk)?;
        gl.bk = colsum(&dk);
        gl.wv = matmul_at(&lc.x_in, &dv)?;
        gl.bv = colsum(&dv);
        d_x_in.add_assign(&matmul_bt(&dq, &lw.wq)?)?;
        d_x_in.add_assign(&matmul_bt(&dk, &lw.wk)?)?;
        d_x_in.add_assign(&matmul_bt(&dv, &lw.wv)?)?;
        d_x = d_x_in;
    }

    // Embedding LN and scatter into the lookup tables.
    let (d_emb, dg, db) = ln_backward(&d_x, &cache.emb_ln, &w.emb_ln_gamma);
    g.params.emb_ln_gamma = dg;
    g.params.emb_ln_beta = db;
    for bi in 0..b {
        for p in 0..s {
            let id = batch.tokens[bi * s + p] as usize;
            let src = d_emb.row(bi * s + p);
            for j in 0..cfg.hidden {
                let tv = g.params.tok_emb.get(id, j) + src[j];
                g.params.tok_emb.set(id, j, tv);
                let pv = g.params.pos_emb.get(p, j) + src[j];
                g.params.pos_emb.set(p, j, pv);
            }
        }
    }

    Ok((loss_value, g))
}

/// Loss without gradients; the finite-difference probe.
pub fn loss_value<T: Scalar>(
    cfg: &ModelConfig,
    w: &EncoderWeights<T>,
    batch: &Batch,
    labels: Option<&[u32]>,
    teacher_logits: Option<&Matrix<T>>,
    loss: LossKind,
    masks: &MaskSet<T>,
) -> Result<T, AutodiffError> {
    let cache = forward_cache(cfg, w, batch, masks)?;
    Ok(loss_and_dlogits(&cache.logits, labels, teacher_logits, loss)?.0)
}

/// Logits through the training-path forward. Must agree with the encoder's
/// unfused fp32 plan; a test pins the two together.
pub fn forward_logits<T: Scalar>(
    cfg: &ModelConfig,
    w: &EncoderWeights<T>,
    batch: &Batch,
    masks: &MaskSet<T>,
) -> Result<Matrix<T>, AutodiffError> {
    Ok(forward_cache(cfg, w, batch, masks)?.logits)
}

#[derive(Debug, Clone, Copy)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub samples: usize,
    /// True when samples == 0 and the pass is vacuous.
    pub vacuous: bool,
}

/// Compare analytic gradients against central finite differences on randomly
/// sampled parameter and mask coordinates. f64 only: f32 has no headroom for
/// the epsilon used here.
pub fn finite_diff_check(
    cfg: &ModelConfig,
    w: &EncoderWeights<f64>,
    batch: &Batch,
    labels: &[u32],
    masks: &MaskSet<f64>,
    samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<FiniteDiffReport, AutodiffError> {
    if samples == 0 {
        return Ok(FiniteDiffReport { max_rel_err: 0.0, samples: 0, vacuous: true });
    }
    let loss = LossKind::CrossEntropy;
    let (_, analytic) = backward(cfg, w, batch, Some(labels), None, loss, masks)?;

    let mut probe = w.clone();
    let param_lens: Vec<usize> = probe.param_slices_mut().iter().map(|(_, s)| s.len()).collect();
    let total_params: usize = param_lens.iter().sum();
    let head_coords = cfg.num_layers * cfg.num_heads;
    let ffn_coords = cfg.num_layers * cfg.ffn_size;
    let total = total_params + head_coords + ffn_coords;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        let coord = rng.gen_range(0..total);
        let (analytic_g, fd) = if coord < total_params {
            // Locate the owning tensor in canonical order.
            let mut idx = coord;
            let mut tensor = 0;
            while idx >= param_lens[tensor] {
                idx -= param_lens[tensor];
                tensor += 1;
            }
            let base = {
                let slices = probe.param_slices_mut();
                slices[tensor].1[idx]
            };
            let mut eval = |v: f64| -> Result<f64, AutodiffError> {
                probe.param_slices_mut()[tensor].1[idx] = v;
                loss_value(cfg, &probe, batch, Some(labels), None, loss, masks)
            };
            let lp = eval(base + epsilon)?;
            let lm = eval(base - epsilon)?;
            probe.param_slices_mut()[tensor].1[idx] = base;
            let mut grads = analytic.params.clone();
            let ag = grads.param_slices_mut()[tensor].1[idx];
            (ag, (lp - lm) / (2.0 * epsilon))
        } else if coord < total_params + head_coords {
            let c = coord - total_params;
            let (li, hi) = (c / cfg.num_heads, c % cfg.num_heads);
            let base = masks.head[li][hi];
            let mut m2 = masks.clone();
            m2.head[li][hi] = base + epsilon;
            let lp = loss_value(cfg, w, batch, Some(labels), None, loss, &m2)?;
            m2.head[li][hi] = base - epsilon;
            let lm = loss_value(cfg, w, batch, Some(labels), None, loss, &m2)?;
            (analytic.head_mask[li][hi], (lp - lm) / (2.0 * epsilon))
        } else {
            let c = coord - total_params - head_coords;
            let (li, ui) = (c / cfg.ffn_size, c % cfg.ffn_size);
            let base = masks.ffn[li][ui];
            let mut m2 = masks.clone();
            m2.ffn[li][ui] = base + epsilon;
            let lp = loss_value(cfg, w, batch, Some(labels), None, loss, &m2)?;
            m2.ffn[li][ui] = base - epsilon;
            let lm = loss_value(cfg, w, batch, Some(labels), None, loss, &m2)?;
            (analytic.ffn_mask[li][ui], (lp - lm) / (2.0 * epsilon))
        };
        let denom = analytic_g.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max((analytic_g - fd).abs() / denom);
    }
    Ok(FiniteDiffReport { max_rel_err: max_rel, samples, vacuous: false })
}
