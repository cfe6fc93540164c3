//! MAML-style meta-learning of prefix parameters, meta-task construction
//! and source-project selection.

use std::collections::HashMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, no_grad, Var};
use crate::corpus::{CodeSummaryPair, ProjectCorpus};
use crate::error::{Error, Result};
use crate::evalbench::rouge_n;
use crate::model::{prefix_vars, Dropout, Seq2Seq};
use crate::params::{Bound, ParamSet};
use crate::seed::{derive_seed, derive_seed_str, rng};
use crate::textcodec::{Codec, EncodedPair};

/// Relative epoch-over-epoch meta-loss improvement below which training stops.
pub const CONVERGENCE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    SecondOrder,
    FirstOrder,
}

impl std::str::FromStr for GradientMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "second_order" => Ok(Self::SecondOrder),
            "first_order" => Ok(Self::FirstOrder),
            _ => Err(Error::Config(format!("unknown gradient mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub k: usize,
    pub meta_batch_size: usize,
    pub meta_epochs: usize,
    pub gradient_mode: GradientMode,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 5e-5,
            outer_lr: 5e-5,
            inner_steps: 1,
            k: 10,
            meta_batch_size: 1,
            meta_epochs: 10,
            gradient_mode: GradientMode::SecondOrder,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.outer_lr >= 0.0) {
            return Err(Error::Config("meta learning rates must be non-negative".into()));
        }
        if self.inner_steps == 0 || self.k == 0 || self.meta_batch_size == 0 {
            return Err(Error::Config("inner_steps, k and meta_batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A differentiable loss over named parameters.
pub trait MetaObjective: Sync {
    type Data: Sync;

    fn loss(&self, params: &Bound, data: &Self::Data) -> Result<Var>;
}

/// One support/query episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<D> {
    pub support: D,
    pub query: D,
}

fn bind_all(phi: &ParamSet) -> (Bound, Vec<(String, Var)>) {
    Bound::bind(phi, |_| true)
}

fn values(b: &Bound, names: &[String]) -> Result<ParamSet> {
    names.iter().map(|n| Ok((n.clone(), b.get(n)?.value().clone()))).collect()
}

/// Runs `steps` gradient steps from `start`; with `create_graph` the result
/// stays differentiable with respect to `start`.
fn adapt<O: MetaObjective>(
    obj: &O,
    start: &Bound,
    names: &[String],
    support: &O::Data,
    lr: f64,
    steps: usize,
    create_graph: bool,
) -> Result<Bound> {
    let mut cur = start.clone();
    for _ in 0..steps {
        let loss = obj.loss(&cur, support)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite { stage: "meta inner step", value });
        }
        let vars: Vec<Var> = names.iter().map(|n| cur.get(n).cloned()).collect::<Result<_>>()?;
        let grads = grad(&loss, &vars, create_graph);
        let mut next = Bound::default();
        for ((n, v), g) in names.iter().zip(&vars).zip(&grads) {
            let stepped = if create_graph { v.sub(&g.scale(lr)) } else { Var::param(v.value() - &(g.value() * lr)) };
            next.insert(n.clone(), stepped);
        }
        cur = next;
    }
    Ok(cur)
}

/// `phi' = phi - lr * grad L(phi, support)`, repeated `inner_steps` times.
/// `phi` is not modified.
pub fn inner_step<O: MetaObjective>(obj: &O, phi: &ParamSet, support: &O::Data, cfg: &MetaConfig) -> Result<ParamSet> {
    let names: Vec<String> = phi.names().cloned().collect();
    let (b, _) = bind_all(phi);
    let adapted = adapt(obj, &b, &names, support, cfg.inner_lr, cfg.inner_steps, false)?;
    values(&adapted, &names)
}

/// Query loss after adaptation and its gradient with respect to `phi`.
/// Second order differentiates through the inner steps; first order takes
/// the gradient at `phi'`.
pub fn meta_gradient<O: MetaObjective>(
    obj: &O,
    phi: &ParamSet,
    episode: &Episode<O::Data>,
    cfg: &MetaConfig,
) -> Result<(f64, ParamSet)> {
    let names: Vec<String> = phi.names().cloned().collect();
    let (loss, grads) = match cfg.gradient_mode {
        GradientMode::SecondOrder => {
            let (b, leaves) = bind_all(phi);
            let adapted = adapt(obj, &b, &names, &episode.support, cfg.inner_lr, cfg.inner_steps, true)?;
            let loss = obj.loss(&adapted, &episode.query)?;
            let vars: Vec<Var> = leaves.into_iter().map(|(_, v)| v).collect();
            let g = grad(&loss, &vars, false);
            (loss.item(), g)
        }
        GradientMode::FirstOrder => {
            let adapted = inner_step(obj, phi, &episode.support, cfg)?;
            let (b, leaves) = bind_all(&adapted);
            let loss = obj.loss(&b, &episode.query)?;
            let vars: Vec<Var> = leaves.into_iter().map(|(_, v)| v).collect();
            let g = grad(&loss, &vars, false);
            (loss.item(), g)
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite { stage: "meta outer step", value: loss });
    }
    Ok((loss, names.into_iter().zip(grads.into_iter().map(|g| g.value().clone())).collect()))
}

fn apply(phi: &ParamSet, grads: &ParamSet, lr: f64) -> ParamSet {
    phi.iter().map(|(n, p)| (n.clone(), p - &(grads.get(n).expect("same structure") * lr))).collect()
}

/// One outer update of `phi` given its adapted copy `phi_prime` (computed by
/// [`inner_step`] on `episode.support`).
pub fn outer_step<O: MetaObjective>(
    obj: &O,
    phi: &ParamSet,
    phi_prime: &ParamSet,
    episode: &Episode<O::Data>,
    cfg: &MetaConfig,
) -> Result<(ParamSet, f64)> {
    phi.check_same_structure(phi_prime)?;
    let (loss, grads) = match cfg.gradient_mode {
        GradientMode::SecondOrder => meta_gradient(obj, phi, episode, cfg)?,
        GradientMode::FirstOrder => {
            let names: Vec<String> = phi_prime.names().cloned().collect();
            let (b, leaves) = bind_all(phi_prime);
            let loss = obj.loss(&b, &episode.query)?;
            let vars: Vec<Var> = leaves.into_iter().map(|(_, v)| v).collect();
            let g = grad(&loss, &vars, false);
            (loss.item(), names.into_iter().zip(g.into_iter().map(|g| g.value().clone())).collect())
        }
    };
    Ok((apply(phi, &grads, cfg.outer_lr), loss))
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    pub phi: ParamSet,
    /// Mean pre-update query loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub converged: bool,
}

/// Outer loop: per batch of episodes, adapt on support, average
/// the query meta-gradients and take one outer step.
pub fn meta_train<O: MetaObjective>(
    obj: &O,
    phi_init: &ParamSet,
    episodes: &[Episode<O::Data>],
    cfg: &MetaConfig,
) -> Result<MetaOutcome> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::Config("meta-training needs at least one meta-task".into()));
    }
    let mut phi = phi_init.clone();
    let mut epoch_losses = Vec::new();
    let mut converged = false;
    for epoch in 0..cfg.meta_epochs {
        let mut order: Vec<usize> = (0..episodes.len()).collect();
        order.shuffle(&mut rng(derive_seed(cfg.seed, "meta_order", &[epoch as u64])));
        let mut total = 0.0;
        for batch in order.chunks(cfg.meta_batch_size) {
            let results: Vec<Result<(f64, ParamSet)>> =
                batch.par_iter().map(|&i| meta_gradient(obj, &phi, &episodes[i], cfg)).collect();
            let mut sum: Option<ParamSet> = None;
            for r in results {
                let (loss, g) = r?;
                total += loss;
                match sum.as_mut() {
                    None => sum = Some(g),
                    Some(acc) => {
                        for (n, t) in g.iter() {
                            *acc.get_mut(n).expect("same names") += t;
                        }
                    }
                }
            }
            let mut mean = sum.expect("non-empty batch");
            for (_, t) in mean.iter_mut() {
                *t /= batch.len() as f64;
            }
            phi = apply(&phi, &mean, cfg.outer_lr);
        }
        let loss = total / episodes.len() as f64;
        if let Some(&prev) = epoch_losses.last() {
            let prev: f64 = prev;
            if (prev - loss) / prev.abs().max(f64::MIN_POSITIVE) < CONVERGENCE_TOLERANCE {
                epoch_losses.push(loss);
                converged = true;
                break;
            }
        }
        epoch_losses.push(loss);
    }
    Ok(MetaOutcome { phi, epoch_losses, converged })
}

/// Summed NLL of a pair set under the frozen backbone with `params`
/// (prefix view and/or output layer) swapped in.
pub struct SummarizerObjective<'a> {
    pub model: &'a Seq2Seq,
    pub theta: &'a ParamSet,
    pub use_prefix: bool,
}

impl MetaObjective for SummarizerObjective<'_> {
    type Data = Vec<EncodedPair>;

    fn loss(&self, params: &Bound, data: &Self::Data) -> Result<Var> {
        if data.is_empty() {
            return Err(Error::Contract("empty support or query set".into()));
        }
        let mut b = Bound::constants(self.theta);
        for (n, v) in params.iter() {
            b.insert(n.clone(), v.clone());
        }
        let pv = if self.use_prefix { Some(prefix_vars(self.model.config(), &b)?) } else { None };
        let mut total: Option<Var> = None;
        for pair in data {
            let l = self.model.pair_loss(&b, pv.as_ref(), pair, &mut Dropout::off())?;
            total = Some(match total {
                None => l,
                Some(t) => t.add(&l),
            });
        }
        Ok(total.expect("non-empty data"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTask {
    pub project_id: String,
    pub support: Vec<CodeSummaryPair>,
    pub query: Vec<CodeSummaryPair>,
}

impl MetaTask {
    pub fn encode(&self, codec: &Codec) -> Episode<Vec<EncodedPair>> {
        Episode { support: codec.encode_pairs(&self.support), query: codec.encode_pairs(&self.query) }
    }
}

/// Disjoint K-sized support and query sets per project, sampled without
/// replacement. Projects with fewer than 2K pairs are skipped with a warning.
pub fn build_meta_tasks(projects: &[ProjectCorpus], k: usize, seed: u64) -> (Vec<MetaTask>, Vec<String>) {
    let mut tasks = Vec::new();
    let mut warnings = Vec::new();
    for p in projects {
        if p.len() < 2 * k || k == 0 {
            warnings.push(format!("project `{}` has {} pairs, fewer than 2K = {}; skipped", p.project_id, p.len(), 2 * k));
            continue;
        }
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(&mut rng(derive_seed_str(seed, "meta_tasks", &p.project_id)));
        let pick = |r: &[usize]| r.iter().map(|&i| p.pairs[i].clone()).collect();
        tasks.push(MetaTask { project_id: p.project_id.clone(), support: pick(&idx[..k]), query: pick(&idx[k..2 * k]) });
    }
    (tasks, warnings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CriterionRanks {
    pub rouge2_recall: usize,
    pub rouge2_precision: usize,
    pub code_repr_sim: usize,
    pub cosine_sim: usize,
    pub length_sim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionScore {
    pub candidate_id: String,
    pub rouge2_recall: f64,
    pub rouge2_precision: f64,
    pub code_repr_sim: f64,
    pub cosine_sim: f64,
    pub length_sim: f64,
    pub ranks: CriterionRanks,
    /// Mean rank over ROUGE-2 recall, code representation and length similarity.
    pub avg_rank: f64,
}

impl SelectionScore {
    pub fn new(candidate_id: impl Into<String>, metrics: [f64; 5]) -> Self {
        let [rouge2_recall, rouge2_precision, code_repr_sim, cosine_sim, length_sim] = metrics;
        SelectionScore {
            candidate_id: candidate_id.into(),
            rouge2_recall,
            rouge2_precision,
            code_repr_sim,
            cosine_sim,
            length_sim,
            ranks: CriterionRanks::default(),
            avg_rank: 0.0,
        }
    }
}

/// Competition ranks (1 = highest value; equal values share a rank).
fn competition_ranks(values: &[f64]) -> Vec<usize> {
    values.iter().map(|v| 1 + values.iter().filter(|w| **w > *v).count()).collect()
}

/// Fills ranks and `avg_rank`, then orders by `avg_rank` with ties broken
/// by candidate id.
pub fn rank_candidates(mut scores: Vec<SelectionScore>) -> Vec<SelectionScore> {
    let col = |f: fn(&SelectionScore) -> f64, s: &[SelectionScore]| competition_ranks(&s.iter().map(f).collect::<Vec<_>>());
    let r2r = col(|s| s.rouge2_recall, &scores);
    let r2p = col(|s| s.rouge2_precision, &scores);
    let crs = col(|s| s.code_repr_sim, &scores);
    let cos = col(|s| s.cosine_sim, &scores);
    let len = col(|s| s.length_sim, &scores);
    for (i, s) in scores.iter_mut().enumerate() {
        s.ranks = CriterionRanks {
            rouge2_recall: r2r[i],
            rouge2_precision: r2p[i],
            code_repr_sim: crs[i],
            cosine_sim: cos[i],
            length_sim: len[i],
        };
        s.avg_rank = (r2r[i] + crs[i] + len[i]) as f64 / 3.0;
    }
    scores.sort_by(|a, b| a.avg_rank.total_cmp(&b.avg_rank).then_with(|| a.candidate_id.cmp(&b.candidate_id)));
    scores
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selected: Vec<String>,
    /// Every candidate, best first.
    pub scores: Vec<SelectionScore>,
    pub warnings: Vec<String>,
}

impl Selection {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<20} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8}  ranks(r2r,r2p,repr,cos,len)\n",
            "candidate", "r2_rec", "r2_prec", "repr", "cosine", "length", "avg_rank"
        );
        for s in &self.scores {
            let r = s.ranks;
            out.push_str(&format!(
                "{:<20} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.3} {:>8.3}  {},{},{},{},{}{}\n",
                s.candidate_id,
                s.rouge2_recall,
                s.rouge2_precision,
                s.code_repr_sim,
                s.cosine_sim,
                s.length_sim,
                s.avg_rank,
                r.rouge2_recall,
                r.rouge2_precision,
                r.code_repr_sim,
                r.cosine_sim,
                r.length_sim,
                if self.selected.contains(&s.candidate_id) { "  *" } else { "" }
            ));
        }
        out
    }
}

/// Pairs per corpus fed to the encoder for representation similarity.
pub const REPR_SAMPLE: usize = 32;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Centroid of mean-pooled (non-PAD) encoder states over the first
/// [`REPR_SAMPLE`] pairs.
fn code_centroid(model: &Seq2Seq, theta: &ParamSet, codec: &Codec, pairs: &[CodeSummaryPair]) -> Result<Vec<f64>> {
    let _g = no_grad();
    let b = Bound::constants(theta);
    let d = model.config().d_model;
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for pair in pairs.iter().take(REPR_SAMPLE) {
        let enc = codec.encode_code(&pair.code_tokens);
        let real = enc.mask.iter().filter(|&&m| m).count();
        if real == 0 {
            continue;
        }
        let h = model.encode(&b, None, &enc.ids, &enc.mask, &mut Dropout::off())?;
        let h = h.value();
        let mut pooled = Array2::<f64>::zeros((1, d));
        for (row, &m) in h.rows().into_iter().zip(&enc.mask) {
            if m {
                pooled.row_mut(0).zip_mut_with(&row, |a, &x| *a += x);
            }
        }
        for (a, x) in acc.iter_mut().zip(pooled.iter()) {
            *a += x / real as f64;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    Ok(acc)
}

fn summary_tokens(pairs: &[CodeSummaryPair]) -> Vec<String> {
    pairs.iter().flat_map(|p| p.summary_tokens.iter().cloned()).collect()
}

fn mean_code_len(pairs: &[CodeSummaryPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|p| p.code_tokens.len()).sum::<usize>() as f64 / pairs.len() as f64
}

fn count_cosine(a: &[String], b: &[String]) -> f64 {
    let mut index: HashMap<&str, usize> = HashMap::new();
    for w in a.iter().chain(b) {
        let next = index.len();
        index.entry(w.as_str()).or_insert(next);
    }
    let vec = |ws: &[String]| {
        let mut v = vec![0.0; index.len()];
        for w in ws {
            v[index[w.as_str()]] += 1.0;
        }
        v
    };
    cosine(&vec(a), &vec(b))
}

/// All five similarity metrics of `candidate` against the target sample.
pub fn score_candidate(
    model: &Seq2Seq,
    theta: &ParamSet,
    codec: &Codec,
    target: &ProjectCorpus,
    target_centroid: &[f64],
    candidate: &ProjectCorpus,
) -> Result<SelectionScore> {
    let ts = summary_tokens(&target.pairs);
    let cs = summary_tokens(&candidate.pairs);
    let (recall, precision) = rouge_n(&cs, &ts, 2);
    let repr = cosine(target_centroid, &code_centroid(model, theta, codec, &candidate.pairs)?);
    let cos = count_cosine(&ts, &cs);
    let len = -(mean_code_len(&target.pairs) - mean_code_len(&candidate.pairs)).abs();
    Ok(SelectionScore::new(candidate.project_id.clone(), [recall, precision, repr, cos, len]))
}

/// Ranks `candidates` against the target's labelled sample and returns the
/// `top_n` with the lowest average rank.
pub fn select_sources(
    target_sample: &ProjectCorpus,
    candidates: &[ProjectCorpus],
    model: &Seq2Seq,
    theta: &ParamSet,
    codec: &Codec,
    top_n: usize,
) -> Result<Selection> {
    if let Some(c) = candidates.iter().find(|c| c.project_id == target_sample.project_id) {
        return Err(Error::Contract(format!("candidate pool contains the target `{}`", c.project_id)));
    }
    let centroid = code_centroid(model, theta, codec, &target_sample.pairs)?;
    let scores = candidates
        .iter()
        .map(|c| score_candidate(model, theta, codec, target_sample, &centroid, c))
        .collect::<Result<Vec<_>>>()?;
    let scores = rank_candidates(scores);
    let mut warnings = Vec::new();
    if candidates.len() < top_n {
        warnings.push(format!("only {} candidates for top_n = {top_n}; selecting all", candidates.len()));
    }
    let selected = scores.iter().take(top_n).map(|s| s.candidate_id.clone()).collect();
    Ok(Selection { selected, scores, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PrefixParams};
    use crate::textcodec::{Side, Vocabulary};

    /// `weight * (phi - center)^2` on a single scalar parameter.
    struct Quadratic;

    #[derive(Clone, Copy)]
    struct Quad {
        center: f64,
        weight: f64,
    }

    impl MetaObjective for Quadratic {
        type Data = Quad;
        fn loss(&self, params: &Bound, q: &Quad) -> Result<Var> {
            let d = params.get("phi")?.add_scalar(-q.center);
            Ok(d.mul(&d).scale(q.weight).sum_all())
        }
    }

    fn scalar(x: f64) -> ParamSet {
        [("phi".to_string(), Array2::from_elem((1, 1), x))].into_iter().collect()
    }

    fn get(p: &ParamSet) -> f64 {
        p.get("phi").unwrap()[[0, 0]]
    }

    fn oracle_cfg(mode: GradientMode) -> MetaConfig {
        MetaConfig { inner_lr: 0.1, outer_lr: 0.1, gradient_mode: mode, ..Default::default() }
    }

    const INNER: Quad = Quad { center: 3.0, weight: 1.0 };
    const OUTER: Quad = Quad { center: 0.0, weight: 1.0 };

    #[test]
    fn inner_step_examples() {
        let phi = scalar(0.0);
        let before = phi.clone();
        let cfg = oracle_cfg(GradientMode::SecondOrder);
        assert!((get(&inner_step(&Quadratic, &phi, &INNER, &cfg).unwrap()) - 0.6).abs() < 1e-15);
        assert_eq!(phi, before);
        let frozen = MetaConfig { inner_lr: 0.0, ..cfg.clone() };
        assert_eq!(inner_step(&Quadratic, &scalar(1.7), &INNER, &frozen).unwrap(), scalar(1.7));
        // Two steps: 0 -> 0.6 -> 0.6 - 0.1 * 2 * (0.6 - 3) = 1.08.
        let two = MetaConfig { inner_steps: 2, ..cfg };
        assert!((get(&inner_step(&Quadratic, &phi, &INNER, &two).unwrap()) - 1.08).abs() < 1e-12);
    }

    #[test]
    fn outer_step_scalar_chain_rule() {
        let phi = scalar(0.0);
        let ep = Episode { support: INNER, query: OUTER };
        for (mode, expected) in [(GradientMode::SecondOrder, -0.096), (GradientMode::FirstOrder, -0.12)] {
            let cfg = oracle_cfg(mode);
            let prime = inner_step(&Quadratic, &phi, &INNER, &cfg).unwrap();
            let (updated, _) = outer_step(&Quadratic, &phi, &prime, &ep, &cfg).unwrap();
            assert!((get(&updated) - expected).abs() < 1e-10, "{mode:?}: {}", get(&updated));
        }
    }

    #[test]
    fn second_order_meta_gradient_matches_finite_differences() {
        let cfg = oracle_cfg(GradientMode::SecondOrder);
        let ep = Episode { support: INNER, query: OUTER };
        let outer_of = |x: f64| {
            let prime = inner_step(&Quadratic, &scalar(x), &INNER, &cfg).unwrap();
            let d = get(&prime);
            d * d
        };
        for x in [0.0, 0.7, -2.0] {
            let (_, g) = meta_gradient(&Quadratic, &scalar(x), &ep, &cfg).unwrap();
            let eps = 1e-5;
            let fd = (outer_of(x + eps) - outer_of(x - eps)) / (2.0 * eps);
            assert!((get(&g) - fd).abs() < 1e-6, "{} vs {fd}", get(&g));
        }
    }

    #[test]
    fn constant_outer_loss_and_zero_inner_rate() {
        let phi = scalar(0.4);
        let flat = Episode { support: INNER, query: Quad { center: 0.0, weight: 0.0 } };
        for mode in [GradientMode::SecondOrder, GradientMode::FirstOrder] {
            let cfg = oracle_cfg(mode);
            let prime = inner_step(&Quadratic, &phi, &INNER, &cfg).unwrap();
            assert_eq!(outer_step(&Quadratic, &phi, &prime, &flat, &cfg).unwrap().0, phi);
        }
        let ep = Episode { support: INNER, query: OUTER };
        let a = MetaConfig { inner_lr: 0.0, ..oracle_cfg(GradientMode::SecondOrder) };
        let b = MetaConfig { inner_lr: 0.0, ..oracle_cfg(GradientMode::FirstOrder) };
        assert_eq!(meta_gradient(&Quadratic, &phi, &ep, &a).unwrap(), meta_gradient(&Quadratic, &phi, &ep, &b).unwrap());
    }

    #[test]
    fn structural_mismatch_is_rejected() {
        let cfg = oracle_cfg(GradientMode::FirstOrder);
        let mut other = scalar(0.0);
        other.insert("extra", Array2::zeros((1, 1)));
        let ep = Episode { support: INNER, query: OUTER };
        assert!(matches!(outer_step(&Quadratic, &scalar(0.0), &other, &ep, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_inner_loss_aborts() {
        let cfg = oracle_cfg(GradientMode::SecondOrder);
        let bad = Quad { center: f64::NAN, weight: 1.0 };
        assert!(matches!(inner_step(&Quadratic, &scalar(0.0), &bad, &cfg), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn meta_train_on_scalar_tasks() {
        let cfg = MetaConfig { meta_epochs: 0, ..oracle_cfg(GradientMode::SecondOrder) };
        let eps = vec![Episode { support: INNER, query: OUTER }];
        assert_eq!(meta_train(&Quadratic, &scalar(0.0), &eps, &cfg).unwrap().phi, scalar(0.0));
        let one = MetaConfig { meta_epochs: 1, ..cfg };
        assert!((get(&meta_train(&Quadratic, &scalar(0.0), &eps, &one).unwrap().phi) + 0.096).abs() < 1e-12);
        assert!(meta_train(&Quadratic, &scalar(0.0), &[], &one).is_err());

        // Repeated epochs drive the post-adaptation query loss down until convergence.
        let many = MetaConfig { meta_epochs: 500, ..one };
        let out = meta_train(&Quadratic, &scalar(0.0), &eps, &many).unwrap();
        assert!(out.converged);
        assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0]);
    }

    fn pair(project: &str, code: &str, summary: &str) -> CodeSummaryPair {
        CodeSummaryPair {
            project_id: project.into(),
            code_tokens: code.split_whitespace().map(str::to_string).collect(),
            summary_tokens: summary.split_whitespace().map(str::to_string).collect(),
            file_path: "F.java".into(),
            line: 1,
        }
    }

    fn project(id: &str, n: usize) -> ProjectCorpus {
        let pairs = (0..n).map(|i| pair(id, &format!("int f{i} ( ) {{ return {i} ; }}"), &format!("returns value {i}"))).collect();
        ProjectCorpus::new(id, pairs).unwrap()
    }

    #[test]
    fn meta_tasks_sampling() {
        let k = 3;
        let projects = vec![project("a", 6), project("b", 5), project("c", 9)];
        let (tasks, warnings) = build_meta_tasks(&projects, k, 4);
        assert_eq!(tasks.len(), 2);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("`b`"));
        let a = &tasks[0];
        assert_eq!((a.support.len(), a.query.len()), (k, k));
        let mut covered: Vec<u32> = a.support.iter().chain(&a.query).map(|p| p.summary_tokens[2].parse().unwrap()).collect();
        covered.sort_unstable();
        assert_eq!(covered, (0..6).collect::<Vec<_>>());
        let c = &tasks[1];
        assert!(c.support.iter().all(|p| !c.query.contains(p)));
        assert_eq!(build_meta_tasks(&projects, k, 4).0, tasks);
    }

    #[test]
    fn hand_ranked_three_candidates() {
        // Metrics: [r2 recall, r2 precision, repr, cosine, length].
        let scores = vec![
            SelectionScore::new("x", [0.5, 0.1, 0.9, 0.3, -4.0]),
            SelectionScore::new("y", [0.7, 0.2, 0.2, 0.1, -1.0]),
            SelectionScore::new("z", [0.5, 0.9, 0.4, 0.9, -2.0]),
        ];
        // recall ranks: y1 x2 z2; repr: x1 z2 y3; length: y1 z2 x3.
        // avg: x = (2+1+3)/3 = 2, y = (1+3+1)/3 = 5/3, z = (2+2+2)/3 = 2.
        let ranked = rank_candidates(scores.clone());
        let order: Vec<&str> = ranked.iter().map(|s| s.candidate_id.as_str()).collect();
        assert_eq!(order, ["y", "x", "z"]);
        assert!((ranked[0].avg_rank - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(ranked[1].avg_rank, 2.0);
        assert_eq!(ranked[2].ranks.rouge2_precision, 1);

        let mut reversed = scores;
        reversed.reverse();
        assert_eq!(rank_candidates(reversed), ranked);
    }

    fn codec_for(projects: &[&ProjectCorpus], cfg: &ModelConfig) -> Codec {
        let all: Vec<CodeSummaryPair> = projects.iter().flat_map(|p| p.pairs.clone()).collect();
        Codec {
            code_vocab: Vocabulary::build(&all, Side::Code, cfg.code_vocab_size).unwrap(),
            summary_vocab: Vocabulary::build(&all, Side::Summary, cfg.summary_vocab_size).unwrap(),
            max_code_len: cfg.max_code_len,
            max_sum_len: cfg.max_sum_len,
        }
    }

    #[test]
    fn exact_copy_is_selected_first() {
        let cfg = ModelConfig::tiny();
        let model = Seq2Seq::new(cfg.clone()).unwrap();
        let theta = model.init_params(&mut rng(1));
        let target = ProjectCorpus::new(
            "t",
            (0..4).map(|i| pair("t", &format!("bool is{i} ( x ) {{ return x ; }}"), "checks whether x holds")).collect(),
        )
        .unwrap();
        let mut copy = target.clone();
        copy.project_id = "copy".into();
        for p in &mut copy.pairs {
            p.project_id = "copy".into();
        }
        let others = vec![project("a", 5), copy, project("b", 7)];
        let codec = codec_for(&[&target, &others[0], &others[2]], &cfg);
        let sel = select_sources(&target, &others, &model, &theta, &codec, 2).unwrap();
        assert_eq!(sel.selected[0], "copy");
        let r = sel.scores[0].ranks;
        assert_eq!(
            [r.rouge2_recall, r.rouge2_precision, r.code_repr_sim, r.cosine_sim, r.length_sim],
            [1, 1, 1, 1, 1]
        );
        assert!(sel.to_table().contains("copy"));

        let mut shuffled = others.clone();
        shuffled.rotate_left(1);
        assert_eq!(select_sources(&target, &shuffled, &model, &theta, &codec, 2).unwrap(), sel);
        assert!(select_sources(&target, &others, &model, &theta, &codec, 0).unwrap().selected.is_empty());
        let all = select_sources(&target, &others, &model, &theta, &codec, 5).unwrap();
        assert_eq!(all.selected.len(), 3);
        assert_eq!(all.warnings.len(), 1);
    }

    #[test]
    fn model_meta_step_composes_inner_and_outer() {
        let cfg = ModelConfig::tiny();
        let model = Seq2Seq::new(cfg.clone()).unwrap();
        let theta = model.init_params(&mut rng(2));
        let theta_before = theta.clone();
        let mut phi = PrefixParams::new(&cfg, &mut rng(3));
        phi.register_project("meta", &mut rng(4)).unwrap();
        let view = phi.view("meta").unwrap();
        let a = project("a", 4);
        let codec = codec_for(&[&a], &cfg);
        let (tasks, _) = build_meta_tasks(&[a], 2, 5);
        let ep = tasks[0].encode(&codec);
        let obj = SummarizerObjective { model: &model, theta: &theta, use_prefix: true };
        let mcfg = MetaConfig { inner_lr: 0.01, outer_lr: 0.01, meta_epochs: 1, ..Default::default() };

        let prime = inner_step(&obj, &view, &ep.support, &mcfg).unwrap();
        let (manual, _) = outer_step(&obj, &view, &prime, &ep, &mcfg).unwrap();
        let out = meta_train(&obj, &view, &[ep], &mcfg).unwrap();
        assert_eq!(out.phi, manual);
        assert_ne!(manual, view);
        assert_eq!(theta, theta_before);
    }
}
