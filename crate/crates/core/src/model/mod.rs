//! Transformer encoder-decoder summarizer with optional prefix injection.
//!
//! Layers are post-norm: `LN(x + sublayer(x))`. Token embeddings are scaled
//! by `sqrt(d_model)` and summed with fixed sinusoidal position encodings.
//! All parameters are `f64`.

pub mod attention;
pub mod prefix;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, softmax_rows_value, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, xavier, Bound, ParamSet};
use crate::seed;
use crate::textcodec::{EncodedPair, BOS, EOS, PAD};

pub use attention::{attention_with_prefix, attention_with_weights, AttnMask, AttnWeights};
pub use prefix::{prefix_vars, PrefixParams, PrefixVars, Site};

pub const OUTPUT_WEIGHT: &str = "out.w";
pub const OUTPUT_BIAS: &str = "out.b";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_code_len: usize,
    pub max_sum_len: usize,
    pub dropout: f64,
    pub prefix_len: usize,
    pub prefix_mlp_hidden: usize,
    pub prefix_sites: Vec<Site>,
    pub code_vocab_size: usize,
    pub summary_vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 8,
            d_model: 512,
            d_ff: 2048,
            max_code_len: 150,
            max_sum_len: 30,
            dropout: 0.1,
            prefix_len: 16,
            prefix_mlp_hidden: 512,
            prefix_sites: Site::ALL.to_vec(),
            code_vocab_size: 31945,
            summary_vocab_size: 28354,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for tests and smoke runs.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 8,
            d_ff: 16,
            max_code_len: 12,
            max_sum_len: 8,
            dropout: 0.0,
            prefix_len: 4,
            prefix_mlp_hidden: 8,
            prefix_sites: Site::ALL.to_vec(),
            code_vocab_size: 50,
            summary_vocab_size: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layer, head, model and feed-forward sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_code_len == 0 || self.max_sum_len < 2 {
            return fail("max_code_len must be >= 1 and max_sum_len >= 2".into());
        }
        if self.code_vocab_size < 5 || self.summary_vocab_size < 5 {
            return fail("vocabularies need at least 5 entries".into());
        }
        if self.prefix_len > 0 && self.prefix_mlp_hidden == 0 {
            return fail("prefix_mlp_hidden must be positive when prefixes are enabled".into());
        }
        Ok(())
    }

    pub fn enabled_sites(&self) -> Vec<Site> {
        Site::ALL.into_iter().filter(|s| self.prefix_sites.contains(s)).collect()
    }

    pub(crate) fn prefix_init_scale(&self) -> f64 {
        1.0 / (self.d_model as f64).sqrt()
    }

    /// Shapes of every backbone tensor, in name order.
    pub fn base_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut v = vec![
            ("enc.embed".to_string(), (self.code_vocab_size, d)),
            ("dec.embed".to_string(), (self.summary_vocab_size, d)),
            (OUTPUT_WEIGHT.to_string(), (d, self.summary_vocab_size)),
            (OUTPUT_BIAS.to_string(), (1, self.summary_vocab_size)),
        ];
        let attn = |v: &mut Vec<_>, p: String| {
            for m in ["wq", "wk", "wv", "wo"] {
                v.push((format!("{p}.{m}"), (d, d)));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                v.push((format!("{p}.{b}"), (1, d)));
            }
        };
        let norm = |v: &mut Vec<_>, p: String| {
            v.push((format!("{p}.gain"), (1, d)));
            v.push((format!("{p}.bias"), (1, d)));
        };
        let ffn = |v: &mut Vec<_>, p: String| {
            v.push((format!("{p}.w1"), (d, f)));
            v.push((format!("{p}.b1"), (1, f)));
            v.push((format!("{p}.w2"), (f, d)));
            v.push((format!("{p}.b2"), (1, d)));
        };
        for l in 0..self.n_layers {
            attn(&mut v, format!("enc.{l}.self"));
            norm(&mut v, format!("enc.{l}.ln1"));
            ffn(&mut v, format!("enc.{l}.ffn"));
            norm(&mut v, format!("enc.{l}.ln2"));
            attn(&mut v, format!("dec.{l}.self"));
            norm(&mut v, format!("dec.{l}.ln1"));
            attn(&mut v, format!("dec.{l}.cross"));
            norm(&mut v, format!("dec.{l}.ln2"));
            ffn(&mut v, format!("dec.{l}.ffn"));
            norm(&mut v, format!("dec.{l}.ln3"));
        }
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn base_param_count(&self) -> usize {
        self.base_shapes().iter().map(|(_, (r, c))| r * c).sum()
    }

    /// Scalars in the reparametrized prefix stack (shared MLPs plus
    /// `n_projects` embeddings).
    pub fn prefix_param_count(&self, n_projects: usize) -> usize {
        if self.prefix_len == 0 {
            return 0;
        }
        let (d, h) = (self.d_model, self.prefix_mlp_hidden);
        let slots = self.enabled_sites().len() * self.n_layers;
        slots * (d * h + h + h * d + d + n_projects * self.prefix_len * d)
    }

    /// Scalars kept per project once the MLP is dropped.
    pub fn cached_prefix_count(&self) -> usize {
        self.prefix_len * self.d_model * self.enabled_sites().len() * self.n_layers
    }
}

/// Inverted dropout driven by its own seeded stream; a no-op when disabled.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn new(p: f64, seed: u64) -> Self {
        if p > 0.0 {
            Dropout { p, rng: Some(seed::rng(seed)) }
        } else {
            Self::off()
        }
    }

    fn apply(&mut self, x: &Var) -> Var {
        let Some(rng) = self.rng.as_mut() else { return x.clone() };
        let keep = 1.0 / (1.0 - self.p);
        let p = self.p;
        let mask = Array2::from_shape_fn(x.shape(), |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
        x.mul(&Var::constant(mask))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Beam(usize),
}

fn sinusoidal(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn layer_norm(x: &Var, gain: &Var, bias: &Var) -> Var {
    let n = x.cols();
    let mean = x.sum_cols().scale(1.0 / n as f64).broadcast_cols(n);
    let centered = x.sub(&mean);
    let var = centered.mul(&centered).sum_cols().scale(1.0 / n as f64);
    let inv = var.add_scalar(LN_EPS).powf(-0.5).broadcast_cols(n);
    centered.mul(&inv).mul_row(gain).add_row(bias)
}

/// Mean negative log-likelihood of `targets` over positions where `mask` is
/// true; `logits` is `len x vocab`.
pub fn nll_loss(logits: &Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    if targets.len() != logits.rows() || mask.len() != targets.len() {
        return Err(Error::Contract(format!(
            "nll_loss: logits {:?}, {} targets, {} mask entries",
            logits.shape(),
            targets.len(),
            mask.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyTarget);
    }
    let mut pick = Array2::zeros(logits.shape());
    for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            if y >= logits.cols() {
                return Err(Error::Contract(format!("target id {y} outside vocabulary")));
            }
            pick[[t, y]] = 1.0;
        }
    }
    let logp = logits.log_softmax_rows();
    Ok(logp.mul(&Var::constant(pick)).sum_all().scale(-1.0 / n as f64))
}

/// The summarizer. Parameters live outside, in a [`ParamSet`] bound per pass.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    cfg: ModelConfig,
    positions: Array2<f64>,
}

impl Seq2Seq {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let positions = sinusoidal(cfg.max_code_len.max(cfg.max_sum_len), cfg.d_model);
        Ok(Seq2Seq { cfg, positions })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let emb_scale = (3.0 / self.cfg.d_model as f64).sqrt();
        let mut set = ParamSet::new();
        for (name, (r, c)) in self.cfg.base_shapes() {
            let value = if name.ends_with(".embed") {
                uniform(rng, r, c, emb_scale)
            } else if name.ends_with(".gain") {
                Array2::ones((r, c))
            } else if r == 1 {
                Array2::zeros((r, c))
            } else {
                xavier(rng, r, c)
            };
            set.insert(name, value);
        }
        set
    }

    /// Errors unless `set` has exactly the backbone tensors with the configured shapes.
    pub fn check_params(&self, set: &ParamSet) -> Result<()> {
        let shapes = self.cfg.base_shapes();
        if set.len() != shapes.len() {
            return Err(Error::Contract(format!("expected {} tensors, found {}", shapes.len(), set.len())));
        }
        for (name, dim) in shapes {
            let t = set.require(&name)?;
            if t.dim() != dim {
                return Err(Error::Contract(format!("`{name}` has shape {:?}, config says {dim:?}", t.dim())));
            }
        }
        Ok(())
    }

    fn embed(&self, b: &Bound, table: &str, ids: &[usize], drop: &mut Dropout) -> Result<Var> {
        let table = b.get(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= table.rows()) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", table.rows())));
        }
        let pos = self.positions.slice(ndarray::s![..ids.len(), ..]).to_owned();
        let x = table.gather_rows(ids).scale((self.cfg.d_model as f64).sqrt()).add(&Var::constant(pos));
        Ok(drop.apply(&x))
    }

    fn sublayer_norm(&self, b: &Bound, name: &str, x: &Var, delta: &Var, drop: &mut Dropout) -> Result<Var> {
        let y = x.add(&drop.apply(delta));
        Ok(layer_norm(&y, b.get(&format!("{name}.gain"))?, b.get(&format!("{name}.bias"))?))
    }

    fn ffn(&self, b: &Bound, name: &str, x: &Var) -> Result<Var> {
        let g = |n: &str| b.get(&format!("{name}.{n}"));
        Ok(x.matmul(g("w1")?).add_row(g("b1")?).relu().matmul(g("w2")?).add_row(g("b2")?))
    }

    /// Encoder states `H` (`max_code_len x d_model`).
    pub fn encode(
        &self,
        b: &Bound,
        prefix: Option<&PrefixVars>,
        code_ids: &[usize],
        code_mask: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if code_ids.len() != self.cfg.max_code_len || code_mask.len() != code_ids.len() {
            return Err(Error::Contract(format!(
                "code sequence must have length {} (got {} ids, {} mask)",
                self.cfg.max_code_len,
                code_ids.len(),
                code_mask.len()
            )));
        }
        let mut x = self.embed(b, "enc.embed", code_ids, drop)?;
        let mask = AttnMask { kv_valid: code_mask, causal: false };
        for l in 0..self.cfg.n_layers {
            let p = prefix.and_then(|m| m.get(&(Site::EncSelf, l)));
            let w = AttnWeights::from_bound(b, &format!("enc.{l}.self"))?;
            let a = attention_with_prefix(&w, self.cfg.n_heads, &x, &x, p, &mask)?;
            x = self.sublayer_norm(b, &format!("enc.{l}.ln1"), &x, &a, drop)?;
            let f = self.ffn(b, &format!("enc.{l}.ffn"), &x)?;
            x = self.sublayer_norm(b, &format!("enc.{l}.ln2"), &x, &f, drop)?;
        }
        Ok(x)
    }

    /// Decoder states for every position of `dec_ids` (which starts with BOS).
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        b: &Bound,
        prefix: Option<&PrefixVars>,
        h: &Var,
        code_mask: &[bool],
        dec_ids: &[usize],
        dec_mask: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if dec_ids.is_empty() || dec_ids.len() > self.cfg.max_sum_len || dec_mask.len() != dec_ids.len() {
            return Err(Error::Contract(format!("decoder input length {} invalid", dec_ids.len())));
        }
        let mut y = self.embed(b, "dec.embed", dec_ids, drop)?;
        let self_mask = AttnMask { kv_valid: dec_mask, causal: true };
        let cross_mask = AttnMask { kv_valid: code_mask, causal: false };
        for l in 0..self.cfg.n_layers {
            let ps = prefix.and_then(|m| m.get(&(Site::DecSelf, l)));
            let pc = prefix.and_then(|m| m.get(&(Site::DecCross, l)));
            let w = AttnWeights::from_bound(b, &format!("dec.{l}.self"))?;
            let a = attention_with_prefix(&w, self.cfg.n_heads, &y, &y, ps, &self_mask)?;
            y = self.sublayer_norm(b, &format!("dec.{l}.ln1"), &y, &a, drop)?;
            let w = AttnWeights::from_bound(b, &format!("dec.{l}.cross"))?;
            let c = attention_with_prefix(&w, self.cfg.n_heads, &y, h, pc, &cross_mask)?;
            y = self.sublayer_norm(b, &format!("dec.{l}.ln2"), &y, &c, drop)?;
            let f = self.ffn(b, &format!("dec.{l}.ffn"), &y)?;
            y = self.sublayer_norm(b, &format!("dec.{l}.ln3"), &y, &f, drop)?;
        }
        Ok(y)
    }

    /// `S W^Y + b`, one row of summary-vocabulary logits per decoder position.
    pub fn logits(&self, b: &Bound, states: &Var) -> Result<Var> {
        Ok(states.matmul(b.get(OUTPUT_WEIGHT)?).add_row(b.get(OUTPUT_BIAS)?))
    }

    /// Teacher-forced mean NLL of one pair's summary.
    pub fn pair_loss(&self, b: &Bound, prefix: Option<&PrefixVars>, pair: &EncodedPair, drop: &mut Dropout) -> Result<Var> {
        let n = pair.summary_ids.len();
        if n < 2 {
            return Err(Error::Contract("summary must hold at least BOS and one target".into()));
        }
        let h = self.encode(b, prefix, &pair.code_ids, &pair.code_mask, drop)?;
        let s = self.decode(b, prefix, &h, &pair.code_mask, &pair.summary_ids[..n - 1], &pair.summary_mask[..n - 1], drop)?;
        let logits = self.logits(b, &s)?;
        nll_loss(&logits, &pair.summary_ids[1..], &pair.summary_mask[1..])
    }

    /// Probability distribution over the summary vocabulary for the position
    /// following `prefix_ids` (which begins with BOS).
    pub fn decode_step(
        &self,
        b: &Bound,
        prefix: Option<&PrefixVars>,
        h: &Var,
        code_mask: &[bool],
        prefix_ids: &[usize],
    ) -> Result<Vec<f64>> {
        if prefix_ids.first() != Some(&BOS) {
            return Err(Error::Contract("decoder input must begin with BOS".into()));
        }
        let _g = no_grad();
        let mask = vec![true; prefix_ids.len()];
        let s = self.decode(b, prefix, h, code_mask, prefix_ids, &mask, &mut Dropout::off())?;
        let last = s.slice_rows(s.rows() - 1, 1);
        let logits = self.logits(b, &last)?;
        Ok(softmax_rows_value(logits.value()).row(0).to_vec())
    }

    /// Autoregressive decoding from BOS until EOS or `max_sum_len`. Returns
    /// the generated ids without BOS/EOS. PAD and BOS are never emitted.
    pub fn generate(
        &self,
        b: &Bound,
        prefix: Option<&PrefixVars>,
        code_ids: &[usize],
        code_mask: &[bool],
        strategy: Decoding,
    ) -> Result<Vec<usize>> {
        let _g = no_grad();
        let h = self.encode(b, prefix, code_ids, code_mask, &mut Dropout::off())?;
        let max_new = self.cfg.max_sum_len - 1;
        let log_step = |ids: &[usize]| -> Result<Vec<f64>> {
            let mut p = self.decode_step(b, prefix, &h, code_mask, ids)?;
            p[PAD] = 0.0;
            p[BOS] = 0.0;
            Ok(p.into_iter().map(f64::ln).collect())
        };
        match strategy {
            Decoding::Greedy => {
                let mut ids = vec![BOS];
                for _ in 0..max_new {
                    let lp = log_step(&ids)?;
                    let next = argmax(&lp);
                    if next == EOS {
                        break;
                    }
                    ids.push(next);
                }
                Ok(ids[1..].to_vec())
            }
            Decoding::Beam(k) => beam_search(k.max(1), max_new, log_step),
        }
    }
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

struct Hyp {
    ids: Vec<usize>,
    logp: f64,
}

/// Beam search ranked by length-normalized log-probability (generated
/// tokens, EOS included). Ties go to the earlier hypothesis, then the lower
/// token id.
fn beam_search(k: usize, max_new: usize, mut log_step: impl FnMut(&[usize]) -> Result<Vec<f64>>) -> Result<Vec<usize>> {
    let mut beams = vec![Hyp { ids: vec![BOS], logp: 0.0 }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_new {
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (hi, hyp) in beams.iter().enumerate() {
            for (tok, lp) in log_step(&hyp.ids)?.into_iter().enumerate() {
                if lp.is_finite() {
                    cands.push((hi, tok, hyp.logp + lp));
                }
            }
        }
        // Hypotheses in one step share a length, so raw log-probability orders them.
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut next = Vec::new();
        for (hi, tok, logp) in cands.into_iter().take(k) {
            let mut ids = beams[hi].ids.clone();
            if tok == EOS {
                let len = ids.len();
                finished.push((ids[1..].to_vec(), logp / len as f64));
            } else {
                ids.push(tok);
                next.push(Hyp { ids, logp });
            }
        }
        beams = next;
        if beams.is_empty() || finished.len() >= k {
            break;
        }
    }
    for hyp in beams {
        let len = hyp.ids.len() - 1;
        finished.push((hyp.ids[1..].to_vec(), hyp.logp / len.max(1) as f64));
    }
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.1.total_cmp(&b.1).then(ib.cmp(ia)))
        .map(|(_, h)| h.0)
        .unwrap_or_default();
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad;
    use ndarray::array;

    fn pair(code: &[usize], summary: &[usize], cfg: &ModelConfig) -> EncodedPair {
        let mut code_ids = code.to_vec();
        let mut code_mask = vec![true; code.len()];
        code_ids.resize(cfg.max_code_len, PAD);
        code_mask.resize(cfg.max_code_len, false);
        let mut summary_ids = vec![BOS];
        summary_ids.extend_from_slice(summary);
        summary_ids.push(EOS);
        let mut summary_mask = vec![true; summary_ids.len()];
        summary_ids.resize(cfg.max_sum_len, PAD);
        summary_mask.resize(cfg.max_sum_len, false);
        EncodedPair { code_ids, code_mask, summary_ids, summary_mask }
    }

    fn setup(cfg: &ModelConfig, seed_value: u64) -> (Seq2Seq, ParamSet) {
        let m = Seq2Seq::new(cfg.clone()).unwrap();
        let p = m.init_params(&mut seed::rng(seed_value));
        (m, p)
    }

    #[test]
    fn nll_examples() {
        let certain = Var::constant(array![[0.0, 1e3, 0.0], [1e3, 0.0, 0.0]]);
        assert!(nll_loss(&certain, &[1, 0], &[true, true]).unwrap().item().abs() < 1e-12);

        let uniform = Var::constant(Array2::zeros((3, 50)));
        let l = nll_loss(&uniform, &[4, 7, 9], &[true, true, true]).unwrap().item();
        assert!((l - 50f64.ln()).abs() < 1e-12);

        let probs = Var::constant(array![[0.5f64.ln(), 0.5f64.ln()], [0.25f64.ln(), 0.75f64.ln()], [0.0, 0.0]]);
        let l = nll_loss(&probs, &[0, 0, 1], &[true, true, false]).unwrap().item();
        assert!((l - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);

        assert!(matches!(nll_loss(&uniform, &[0, 0, 0], &[false; 3]), Err(Error::EmptyTarget)));
    }

    #[test]
    fn decode_step_softmax_by_hand() {
        // d=2, |V|=3: W^Y and S_t set by hand.
        let w = array![[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]];
        let s = array![[0.3, -0.2]];
        let mut b = Bound::default();
        b.insert(OUTPUT_WEIGHT, Var::constant(w.clone()));
        b.insert(OUTPUT_BIAS, Var::constant(Array2::zeros((1, 3))));
        let cfg = ModelConfig { d_model: 2, n_heads: 1, summary_vocab_size: 5, ..ModelConfig::tiny() };
        let m = Seq2Seq::new(cfg).unwrap();
        let logits = m.logits(&b, &Var::constant(s.clone())).unwrap();
        let p = softmax_rows_value(logits.value());
        let z: Vec<f64> = (0..3).map(|j| s[[0, 0]] * w[[0, j]] + s[[0, 1]] * w[[1, j]]).collect();
        let denom: f64 = z.iter().map(|x| x.exp()).sum();
        for j in 0..3 {
            assert!((p[[0, j]] - z[j].exp() / denom).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_step_is_normalized_and_causal() {
        let cfg = ModelConfig::tiny();
        let (m, params) = setup(&cfg, 5);
        let b = Bound::constants(&params);
        let p = pair(&[5, 6, 7], &[8, 9], &cfg);
        let h = m.encode(&b, None, &p.code_ids, &p.code_mask, &mut Dropout::off()).unwrap();
        let probs = m.decode_step(&b, None, &h, &p.code_mask, &[BOS, 8]).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let s1 = m.decode(&b, None, &h, &p.code_mask, &[BOS, 8, 9], &[true; 3], &mut Dropout::off()).unwrap();
        let s2 = m.decode(&b, None, &h, &p.code_mask, &[BOS, 8, 11], &[true; 3], &mut Dropout::off()).unwrap();
        assert_eq!(s1.value().row(1), s2.value().row(1));
        assert_ne!(s1.value().row(2), s2.value().row(2));
    }

    #[test]
    fn encoder_is_position_sensitive_and_pad_hygienic() {
        let cfg = ModelConfig::tiny();
        let (m, params) = setup(&cfg, 6);
        let b = Bound::constants(&params);
        let a = pair(&[5, 6, 7], &[8], &cfg);
        let swapped = pair(&[6, 5, 7], &[8], &cfg);
        let ha = m.encode(&b, None, &a.code_ids, &a.code_mask, &mut Dropout::off()).unwrap();
        let hs = m.encode(&b, None, &swapped.code_ids, &swapped.code_mask, &mut Dropout::off()).unwrap();
        assert_eq!(ha.shape(), (cfg.max_code_len, cfg.d_model));
        assert_ne!(ha.value(), hs.value());

        // Changing token content under PAD positions leaves real positions untouched.
        let mut noisy = a.clone();
        for i in 3..cfg.max_code_len {
            noisy.code_ids[i] = 10 + i;
        }
        let hn = m.encode(&b, None, &noisy.code_ids, &noisy.code_mask, &mut Dropout::off()).unwrap();
        for r in 0..3 {
            assert_eq!(ha.value().row(r), hn.value().row(r));
        }
        let la = m.pair_loss(&b, None, &a, &mut Dropout::off()).unwrap().item();
        let ln = m.pair_loss(&b, None, &noisy, &mut Dropout::off()).unwrap().item();
        assert_eq!(la, ln);

        let all_pad = pair(&[], &[8], &cfg);
        let hp = m.encode(&b, None, &all_pad.code_ids, &all_pad.code_mask, &mut Dropout::off()).unwrap();
        assert!(hp.value().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn absent_prefix_equals_zero_length_prefix() {
        let cfg = ModelConfig { prefix_len: 0, ..ModelConfig::tiny() };
        let (m, params) = setup(&cfg, 7);
        let mut r = seed::rng(8);
        let mut phi = PrefixParams::new(&cfg, &mut r);
        phi.register_project("x", &mut r).unwrap();
        let pv = prefix_vars(&cfg, &Bound::constants(&phi.view("x").unwrap())).unwrap();
        let b = Bound::constants(&params);
        let p = pair(&[5, 6], &[8, 9], &cfg);
        let a = m.encode(&b, None, &p.code_ids, &p.code_mask, &mut Dropout::off()).unwrap();
        let z = m.encode(&b, Some(&pv), &p.code_ids, &p.code_mask, &mut Dropout::off()).unwrap();
        assert_eq!(a.value(), z.value());
    }

    #[test]
    fn prefix_changes_outputs_and_receives_gradient() {
        let cfg = ModelConfig::tiny();
        let (m, params) = setup(&cfg, 9);
        let mut r = seed::rng(10);
        let mut phi = PrefixParams::new(&cfg, &mut r);
        phi.register_project("x", &mut r).unwrap();
        let (pb, leaves) = Bound::bind(&phi.view("x").unwrap(), |_| true);
        let pv = prefix_vars(&cfg, &pb).unwrap();
        let b = Bound::constants(&params);
        let p = pair(&[5, 6], &[8, 9], &cfg);
        let with = m.pair_loss(&b, Some(&pv), &p, &mut Dropout::off()).unwrap();
        let without = m.pair_loss(&b, None, &p, &mut Dropout::off()).unwrap();
        assert_ne!(with.item(), without.item());
        let vars: Vec<Var> = leaves.iter().map(|(_, v)| v.clone()).collect();
        let gs = grad(&with, &vars, false);
        for ((name, _), g) in leaves.iter().zip(&gs) {
            assert!(g.value().iter().any(|x| *x != 0.0), "{name} got no gradient");
        }
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let cfg = ModelConfig::tiny();
        let (m, params) = setup(&cfg, 13);
        let mut r = seed::rng(14);
        let mut phi = PrefixParams::new(&cfg, &mut r);
        phi.register_project("x", &mut r).unwrap();
        let view = phi.view("x").unwrap();
        let p = pair(&[5, 6, 7, 8], &[9, 10, 11], &cfg);

        let loss_of = |theta: &ParamSet, phi: &ParamSet| -> f64 {
            let _g = no_grad();
            let pv = prefix_vars(&cfg, &Bound::constants(phi)).unwrap();
            m.pair_loss(&Bound::constants(theta), Some(&pv), &p, &mut Dropout::off()).unwrap().item()
        };

        let (tb, tleaves) = Bound::bind(&params, |_| true);
        let (pb, pleaves) = Bound::bind(&view, |_| true);
        let pv = prefix_vars(&cfg, &pb).unwrap();
        let loss = m.pair_loss(&tb, Some(&pv), &p, &mut Dropout::off()).unwrap();
        let all: Vec<(String, Var, bool)> = tleaves
            .into_iter()
            .map(|(n, v)| (n, v, true))
            .chain(pleaves.into_iter().map(|(n, v)| (n, v, false)))
            .collect();
        let vars: Vec<Var> = all.iter().map(|(_, v, _)| v.clone()).collect();
        let grads = grad(&loss, &vars, false);

        let eps = 1e-6;
        let mut pick = seed::rng(15);
        for ((name, var, is_theta), g) in all.iter().zip(&grads) {
            let (rows, cols) = var.shape();
            for _ in 0..2 {
                let (i, j) = (pick.gen_range(0..rows), pick.gen_range(0..cols));
                let (mut tp, mut tm, mut pp, mut pm) = (params.clone(), params.clone(), view.clone(), view.clone());
                if *is_theta {
                    tp.get_mut(name).unwrap()[[i, j]] += eps;
                    tm.get_mut(name).unwrap()[[i, j]] -= eps;
                } else {
                    pp.get_mut(name).unwrap()[[i, j]] += eps;
                    pm.get_mut(name).unwrap()[[i, j]] -= eps;
                }
                let fd = (loss_of(&tp, &pp) - loss_of(&tm, &pm)) / (2.0 * eps);
                let an = g.value()[[i, j]];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())), "{name}[{i},{j}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn greedy_is_deterministic_and_beam_one_matches() {
        let cfg = ModelConfig::tiny();
        let (m, params) = setup(&cfg, 11);
        let b = Bound::constants(&params);
        for code in [[5, 6, 7], [9, 3, 12], [20, 21, 22]] {
            let p = pair(&code, &[8], &cfg);
            let g1 = m.generate(&b, None, &p.code_ids, &p.code_mask, Decoding::Greedy).unwrap();
            let g2 = m.generate(&b, None, &p.code_ids, &p.code_mask, Decoding::Greedy).unwrap();
            let b1 = m.generate(&b, None, &p.code_ids, &p.code_mask, Decoding::Beam(1)).unwrap();
            assert_eq!(g1, g2);
            assert_eq!(g1, b1);
            assert!(g1.len() < cfg.max_sum_len);
            let b3 = m.generate(&b, None, &p.code_ids, &p.code_mask, Decoding::Beam(3)).unwrap();
            assert!(b3.len() < cfg.max_sum_len);
        }
    }

    #[test]
    fn beam_prefers_higher_normalized_score() {
        // Step 1: token 4 (p=.6) vs 5 (p=.4). After 4 the best option is EOS at
        // .4; after 5 EOS is certain, so beam(2) recovers [5] (.4 > .24).
        let step = |ids: &[usize]| -> Result<Vec<f64>> {
            let mut p = vec![0.0; 6];
            match ids {
                [BOS] => {
                    p[4] = 0.6;
                    p[5] = 0.4;
                }
                [BOS, 4] => {
                    p[EOS] = 0.4;
                    p[3] = 0.3;
                    p[4] = 0.3;
                }
                [BOS, 5] => p[EOS] = 1.0,
                _ => p[EOS] = 1.0,
            }
            Ok(p.into_iter().map(f64::ln).collect())
        };
        assert_eq!(beam_search(1, 5, step).unwrap(), vec![4]);
        assert_eq!(beam_search(2, 5, step).unwrap(), vec![5]);
    }

    #[test]
    fn default_config_parameter_budget() {
        let cfg = ModelConfig::default();
        let theta = cfg.base_param_count();
        assert!(theta > 80_000_000 && theta < 100_000_000, "{theta}");
        assert_eq!(cfg.cached_prefix_count(), 16 * 512 * 3 * 6);
        assert!((cfg.cached_prefix_count() as f64) < 0.05 * theta as f64);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { n_heads: 3, ..ModelConfig::tiny() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..ModelConfig::tiny() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn check_params_rejects_wrong_shapes() {
        let cfg = ModelConfig::tiny();
        let (m, mut params) = setup(&cfg, 12);
        assert!(m.check_params(&params).is_ok());
        params.insert(OUTPUT_BIAS, Array2::zeros((1, 3)));
        assert!(m.check_params(&params).is_err());
    }
}
