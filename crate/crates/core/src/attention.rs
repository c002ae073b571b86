//! Self-attention and the stage-aware variants that replace or augment its
//! keys and values with those cached from an earlier stage.
//!
//! All variants share [`attend`]: per head, `softmax(Q Kᵀ / √d_head) V`.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Token features, `N × d`.
pub type FeatureMap = Matrix;

/// Query/key/value projections (`d × d_k`), split into `heads` equal
/// column groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, heads: usize) -> Result<Self> {
        let p = AttentionParams { w_q, w_k, w_v, heads };
        if p.w_q.cols == 0 || p.heads == 0 || p.w_q.cols % p.heads != 0 {
            return Err(Error::validation("attention", "d_k must be a positive multiple of heads"));
        }
        if p.w_k.rows != p.w_q.rows || p.w_v.rows != p.w_q.rows || p.w_k.cols != p.w_q.cols || p.w_v.cols != p.w_q.cols {
            return Err(Error::validation("attention", "projection shapes differ"));
        }
        Ok(p)
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows
    }

    pub fn d_k(&self) -> usize {
        self.w_q.cols
    }

    fn check_features(&self, f: &FeatureMap) -> Result<()> {
        if f.cols != self.d_model() {
            return Err(Error::validation(
                "features",
                format!("feature dim {} != projection input {}", f.cols, self.d_model()),
            ));
        }
        Ok(())
    }

    fn check_kv(&self, kv: &KVRecord) -> Result<()> {
        if kv.k.cols != self.d_k() || kv.v.cols != self.d_k() || kv.k.rows != kv.v.rows {
            return Err(Error::validation("kv", "cached keys/values do not match d_k"));
        }
        Ok(())
    }

    pub fn keys_values(&self, f: &FeatureMap) -> (Matrix, Matrix) {
        (f.matmul(&self.w_k), f.matmul(&self.w_v))
    }
}

/// Keys and values captured from one attention layer at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct KVRecord {
    pub layer: usize,
    pub timestep: usize,
    pub k: Matrix,
    pub v: Matrix,
}

impl KVRecord {
    pub fn entries(&self) -> usize {
        self.k.data.len() + self.v.data.len()
    }
}

/// Per-token 0/1 mask on an attention layer's token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Vec<bool>,
}

impl TokenMask {
    pub fn filled(grid_h: usize, grid_w: usize, v: bool) -> Self {
        TokenMask {
            grid_h,
            grid_w,
            data: vec![v; grid_h * grid_w],
        }
    }
}

/// Multi-head scaled dot-product attention. Returns the attention output and
/// the head-averaged probability matrix (`N_q × N_k`).
pub fn attend_with_probs(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> (Matrix, Matrix) {
    assert_eq!(q.cols, k.cols);
    assert_eq!(k.rows, v.rows);
    let dh = q.cols / heads;
    let vh = v.cols / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(q.rows, v.cols);
    let mut probs = Matrix::zeros(q.rows, k.rows);
    let mut logits = vec![0.0; k.rows];
    for h in 0..heads {
        let (qc, vc) = (h * dh, h * vh);
        for i in 0..q.rows {
            let qi = &q.row(i)[qc..qc + dh];
            let mut max = f64::NEG_INFINITY;
            for (j, l) in logits.iter_mut().enumerate() {
                let kj = &k.row(j)[qc..qc + dh];
                *l = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*l);
            }
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                z += *l;
            }
            let orow = &mut out.data[i * v.cols + vc..i * v.cols + vc + vh];
            for (j, l) in logits.iter().enumerate() {
                let p = l / z;
                probs.data[i * k.rows + j] += p / heads as f64;
                for (o, vv) in orow.iter_mut().zip(&v.row(j)[vc..vc + vh]) {
                    *o += p * vv;
                }
            }
        }
    }
    (out, probs)
}

pub fn attend(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Matrix {
    attend_with_probs(q, k, v, heads).0
}

/// `softmax(QKᵀ/√d_k) V` with `Q, K, V = f·W`.
pub fn self_attention(f: &FeatureMap, params: &AttentionParams) -> Result<FeatureMap> {
    params.check_features(f)?;
    let (k, v) = params.keys_values(f);
    Ok(attend(&f.matmul(&params.w_q), &k, &v, params.heads))
}

/// Current queries against the previous stage's keys and values only.
pub fn cross_frame_attention(f_cur: &FeatureMap, kv_prev: &KVRecord, params: &AttentionParams) -> Result<FeatureMap> {
    params.check_features(f_cur)?;
    params.check_kv(kv_prev)?;
    Ok(attend(&f_cur.matmul(&params.w_q), &kv_prev.k, &kv_prev.v, params.heads))
}

/// Current queries against the current keys/values concatenated with every
/// listed record.
pub fn extended_attention(f_cur: &FeatureMap, kv_list: &[&KVRecord], params: &AttentionParams) -> Result<FeatureMap> {
    params.check_features(f_cur)?;
    if kv_list.is_empty() {
        return Err(Error::validation("kv_list", "must not be empty"));
    }
    for kv in kv_list {
        params.check_kv(kv)?;
    }
    let (k, v) = params.keys_values(f_cur);
    let mut ks = vec![&k];
    let mut vs = vec![&v];
    ks.extend(kv_list.iter().map(|r| &r.k));
    vs.extend(kv_list.iter().map(|r| &r.v));
    Ok(attend(&f_cur.matmul(&params.w_q), &Matrix::vstack(&ks), &Matrix::vstack(&vs), params.heads))
}

fn mask_rows(m: &Matrix, mask: &[bool]) -> Matrix {
    let mut out = m.clone();
    for (r, keep) in mask.iter().enumerate() {
        if !keep {
            out.row_mut(r).fill(0.0);
        }
    }
    out
}

/// Dynamic self-attention: keys are the previous stage's keys followed by the
/// current keys with rows outside the foreground zeroed; values mirror keys.
///
/// Masked rows stay in the softmax as zero keys with zero values, so each
/// contributes logit 0 and pulls the output towards the origin by its share
/// of the normalizer. With an all-zero mask the output is therefore the
/// attention over the previous stage scaled by `Σ exp(l_prev) / (Σ exp(l_prev) + N)`.
pub fn dsa_attention(
    f_cur: &FeatureMap,
    kv_prev: &KVRecord,
    m_fg_tokens: &TokenMask,
    params: &AttentionParams,
) -> Result<FeatureMap> {
    params.check_features(f_cur)?;
    params.check_kv(kv_prev)?;
    if m_fg_tokens.data.len() != f_cur.rows {
        return Err(Error::validation(
            "m_fg_tokens",
            format!("{} mask values for {} tokens", m_fg_tokens.data.len(), f_cur.rows),
        ));
    }
    let (k, v) = params.keys_values(f_cur);
    let k_hat = Matrix::vstack(&[&kv_prev.k, &mask_rows(&k, &m_fg_tokens.data)]);
    let v_hat = Matrix::vstack(&[&kv_prev.v, &mask_rows(&v, &m_fg_tokens.data)]);
    Ok(attend(&f_cur.matmul(&params.w_q), &k_hat, &v_hat, params.heads))
}
