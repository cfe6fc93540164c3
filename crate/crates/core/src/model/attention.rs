use ndarray::Array2;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::Bound;

/// Additive score for masked slots; large enough that `exp` underflows to 0.
pub const MASKED: f64 = -1e9;

/// Projection weights of one multi-head attention block.
pub struct AttnWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttnWeights {
    pub fn from_bound(b: &Bound, prefix: &str) -> Result<Self> {
        let g = |n: &str| b.get(&format!("{prefix}.{n}")).cloned();
        Ok(AttnWeights {
            wq: g("wq")?,
            bq: g("bq")?,
            wk: g("wk")?,
            bk: g("bk")?,
            wv: g("wv")?,
            bv: g("bv")?,
            wo: g("wo")?,
            bo: g("bo")?,
        })
    }
}

/// Which kv positions a query may see. Prefix slots are always visible.
#[derive(Debug, Clone, Copy)]
pub struct AttnMask<'a> {
    /// `true` for real (non-PAD) kv positions.
    pub kv_valid: &'a [bool],
    /// Query `i` sees kv positions `0..=i` only.
    pub causal: bool,
}

fn additive_mask(q_len: usize, prefix_len: usize, mask: &AttnMask<'_>) -> Option<Array2<f64>> {
    let kv_len = mask.kv_valid.len();
    let needed = mask.causal || mask.kv_valid.iter().any(|v| !v);
    if !needed {
        return None;
    }
    let mut m = Array2::zeros((q_len, prefix_len + kv_len));
    for i in 0..q_len {
        for j in 0..kv_len {
            if !mask.kv_valid[j] || (mask.causal && j > i) {
                m[[i, prefix_len + j]] = MASKED;
            }
        }
    }
    Some(m)
}

/// Multi-head attention whose keys and values are computed from
/// `[prefix; kv_input]`. Also returns each head's attention weights
/// (`q_len x (prefix_len + kv_len)`).
pub fn attention_with_weights(
    w: &AttnWeights,
    n_heads: usize,
    queries: &Var,
    kv_input: &Var,
    prefix: Option<&Var>,
    mask: &AttnMask<'_>,
) -> Result<(Var, Vec<Var>)> {
    let d = queries.cols();
    if !d.is_multiple_of(n_heads) {
        return Err(Error::Contract(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    if kv_input.cols() != d || mask.kv_valid.len() != kv_input.rows() {
        return Err(Error::Contract(format!(
            "attention shapes: queries {:?}, kv {:?}, mask {}",
            queries.shape(),
            kv_input.shape(),
            mask.kv_valid.len()
        )));
    }
    let prefix = prefix.filter(|p| p.rows() > 0);
    if let Some(p) = prefix {
        if p.cols() != d {
            return Err(Error::Contract(format!("prefix width {} != d_model {d}", p.cols())));
        }
    }
    if mask.causal && queries.rows() != kv_input.rows() {
        return Err(Error::Contract("causal attention needs equal query and kv lengths".into()));
    }
    let p_len = prefix.map_or(0, Var::rows);
    let kv = match prefix {
        Some(p) => Var::concat_rows(&[p.clone(), kv_input.clone()]),
        None => kv_input.clone(),
    };
    let q = queries.matmul(&w.wq).add_row(&w.bq);
    let k = kv.matmul(&w.wk).add_row(&w.bk);
    let v = kv.matmul(&w.wv).add_row(&w.bv);
    let add_mask = additive_mask(queries.rows(), p_len, mask).map(Var::constant);

    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (q.slice_cols(h * dh, dh), k.slice_cols(h * dh, dh), v.slice_cols(h * dh, dh))
        };
        let mut scores = qh.matmul(&kh.t()).scale(scale);
        if let Some(m) = &add_mask {
            scores = scores.add(m);
        }
        let a = scores.softmax_rows();
        heads.push(a.matmul(&vh));
        weights.push(a);
    }
    let ctx = if n_heads == 1 { heads.pop().expect("one head") } else { Var::concat_cols(&heads) };
    Ok((ctx.matmul(&w.wo).add_row(&w.bo), weights))
}

pub fn attention_with_prefix(
    w: &AttnWeights,
    n_heads: usize,
    queries: &Var,
    kv_input: &Var,
    prefix: Option<&Var>,
    mask: &AttnMask<'_>,
) -> Result<Var> {
    attention_with_weights(w, n_heads, queries, kv_input, prefix, mask).map(|(out, _)| out)
}
