use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::no_grad;
use crate::corpus::{CodeSummaryPair, ProjectCorpus};
use crate::error::{Error, Result};
use crate::meta::{build_meta_tasks, meta_train, select_sources, MetaConfig, SummarizerObjective};
use crate::model::{prefix_vars, Decoding, PrefixParams, Seq2Seq, OUTPUT_BIAS, OUTPUT_WEIGHT};
use crate::params::{Bound, ParamSet};
use crate::seed::{derive_seed, rng};
use crate::textcodec::Codec;
use crate::train::{finetune_prefix, RunLog, TrainConfig, TrainablePolicy};

use super::{bleu, rouge_l};

/// Registration slot for the meta-learned prefix before it is copied to a target.
const META_SLOT: &str = "__meta__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// The pretrained backbone, no adaptation.
    FrozenBase,
    /// Fine-tune a fresh prefix on the target sample.
    PrefixOnly,
    /// Meta-learn the output layer over selected sources, then fine-tune it.
    MetaOnly,
    /// Meta-learn the prefix over selected sources, then fine-tune it.
    Mpcos,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [Pipeline::FrozenBase, Pipeline::PrefixOnly, Pipeline::MetaOnly, Pipeline::Mpcos];

    pub fn key(self) -> &'static str {
        match self {
            Pipeline::FrozenBase => "frozen_base",
            Pipeline::PrefixOnly => "prefix_only",
            Pipeline::MetaOnly => "meta_only",
            Pipeline::Mpcos => "mpcos",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Pipeline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown pipeline `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub n_target_samples: usize,
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec { n_target_samples: 10, folds: 5, repeats: 10, seed: 0 }
    }
}

/// Everything a scenario run shares across (project, fold, repeat) tuples.
pub struct ScenarioContext<'a> {
    pub model: &'a Seq2Seq,
    pub theta: &'a ParamSet,
    pub codec: &'a Codec,
    pub train: TrainConfig,
    pub meta: MetaConfig,
    pub top_n: usize,
    pub decoding: Decoding,
    /// Projects to evaluate; every project when `None`. All projects stay
    /// in the source candidate pool.
    pub targets: Option<Vec<String>>,
    pub base_checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleResult {
    pub project: String,
    pub fold: usize,
    pub repeat: usize,
    pub seed: u64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub n_test: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectMetrics {
    pub bleu: f64,
    pub rouge_l: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub bleu: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub root_seed: u64,
    pub base_checkpoint: Option<String>,
    pub tuples: Vec<TupleResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pipeline: Pipeline,
    pub scenario: ScenarioSpec,
    pub per_project: BTreeMap<String, ProjectMetrics>,
    pub aggregate: Aggregate,
    pub manifest: RunManifest,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_text(&self) -> String {
        let s = &self.scenario;
        let mut out = format!(
            "pipeline {}  samples {}  folds {}  repeats {}  seed {}\n\n{:<24} {:>8} {:>8} {:>7}\n",
            self.pipeline, s.n_target_samples, s.folds, s.repeats, s.seed, "project", "BLEU", "ROUGE-L", "n_test"
        );
        for (p, m) in &self.per_project {
            out.push_str(&format!("{:<24} {:>8.2} {:>8.2} {:>7}\n", p, m.bleu, m.rouge_l, m.n_test));
        }
        out.push_str(&format!("{:<24} {:>8.2} {:>8.2}\n", "average", self.aggregate.bleu, self.aggregate.rouge_l));
        out
    }
}

/// Seeded split of `0..n` into `folds` disjoint parts whose sizes differ by
/// at most one. Each part is sorted.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(seed));
    (0..folds)
        .map(|f| {
            let mut part = idx[f * n / folds..(f + 1) * n / folds].to_vec();
            part.sort_unstable();
            part
        })
        .collect()
}

/// Generated summaries (as tokens) for each pair's code.
pub fn summarize(
    model: &Seq2Seq,
    theta: &ParamSet,
    prefix_view: Option<&ParamSet>,
    codec: &Codec,
    code: &[Vec<String>],
    decoding: Decoding,
) -> Result<Vec<Vec<String>>> {
    code.par_iter()
        .map(|tokens| {
            let _g = no_grad();
            let b = Bound::constants(theta);
            let pv = match prefix_view {
                Some(v) => Some(prefix_vars(model.config(), &Bound::constants(v))?),
                None => None,
            };
            let enc = codec.encode_code(tokens);
            let ids = model.generate(&b, pv.as_ref(), &enc.ids, &enc.mask, decoding)?;
            Ok(codec.decode_summary(&ids))
        })
        .collect()
}

/// Adapted backbone and prefix view for one target sample.
struct Adapted {
    theta: ParamSet,
    view: Option<ParamSet>,
    sources: Vec<String>,
}

fn adapt(
    ctx: &ScenarioContext<'_>,
    pipeline: Pipeline,
    dataset: &[ProjectCorpus],
    target: &str,
    sample: &[CodeSummaryPair],
    seed: u64,
) -> Result<Adapted> {
    let cfg = ctx.model.config();
    let tcfg = TrainConfig { seed: derive_seed(seed, "finetune", &[]), ..ctx.train.clone() };
    let encoded = ctx.codec.encode_pairs(sample);
    let mut log = RunLog::default();
    let fresh_prefix = || {
        let mut phi = PrefixParams::new(cfg, &mut rng(derive_seed(seed, "prefix_init", &[])));
        phi.register_project(META_SLOT, &mut rng(derive_seed(seed, "prefix_slot", &[])))?;
        Ok::<_, Error>(phi)
    };
    let with_view = |out: crate::train::FinetuneOutcome| -> Result<Adapted> {
        let view = out.prefix.as_ref().map(|p| p.view(target)).transpose()?;
        Ok(Adapted { theta: out.theta, view, sources: Vec::new() })
    };
    match pipeline {
        Pipeline::FrozenBase => Ok(Adapted { theta: ctx.theta.clone(), view: None, sources: Vec::new() }),
        Pipeline::PrefixOnly => {
            let mut phi = fresh_prefix()?;
            phi.register_copy(target, META_SLOT)?;
            with_view(finetune_prefix(ctx.model, ctx.theta, Some(&phi), target, &encoded, &tcfg, &mut log)?)
        }
        Pipeline::MetaOnly | Pipeline::Mpcos => {
            let candidates: Vec<ProjectCorpus> = dataset.iter().filter(|p| p.project_id != target).cloned().collect();
            if candidates.is_empty() {
                return Err(Error::Config(format!("pipeline {pipeline} needs source projects besides `{target}`")));
            }
            let sample_corpus = ProjectCorpus::new(target, sample.to_vec())?;
            let selection = select_sources(&sample_corpus, &candidates, ctx.model, ctx.theta, ctx.codec, ctx.top_n)?;
            let sources: Vec<ProjectCorpus> =
                candidates.into_iter().filter(|c| selection.selected.contains(&c.project_id)).collect();
            let (tasks, _) = build_meta_tasks(&sources, ctx.meta.k, derive_seed(seed, "meta_tasks", &[]));
            if tasks.is_empty() {
                return Err(Error::Config(format!("no selected source has 2K = {} pairs", 2 * ctx.meta.k)));
            }
            let episodes: Vec<_> = tasks.iter().map(|t| t.encode(ctx.codec)).collect();
            let mcfg = MetaConfig { seed: derive_seed(seed, "meta", &[]), ..ctx.meta.clone() };
            let mut adapted = if pipeline == Pipeline::Mpcos {
                let mut phi = fresh_prefix()?;
                let obj = SummarizerObjective { model: ctx.model, theta: ctx.theta, use_prefix: true };
                let learned = meta_train(&obj, &phi.view(META_SLOT)?, &episodes, &mcfg)?;
                phi.absorb(META_SLOT, &learned.phi)?;
                phi.register_copy(target, META_SLOT)?;
                with_view(finetune_prefix(ctx.model, ctx.theta, Some(&phi), target, &encoded, &tcfg, &mut log)?)?
            } else {
                let obj = SummarizerObjective { model: ctx.model, theta: ctx.theta, use_prefix: false };
                let head = ctx.theta.select([OUTPUT_WEIGHT, OUTPUT_BIAS])?;
                let learned = meta_train(&obj, &head, &episodes, &mcfg)?;
                let mut theta = ctx.theta.clone();
                theta.update_from(&learned.phi);
                let policy = match tcfg.trainable_policy {
                    TrainablePolicy::Full => TrainablePolicy::Full,
                    _ => TrainablePolicy::PrefixPlusOutputLayer,
                };
                let tcfg = TrainConfig { trainable_policy: policy, ..tcfg };
                with_view(finetune_prefix(ctx.model, &theta, None, target, &encoded, &tcfg, &mut log)?)?
            };
            adapted.sources = selection.selected;
            Ok(adapted)
        }
    }
}

/// Scores and generations of one adapted model on a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub bleu: f64,
    pub rouge_l: f64,
    /// Meta-learning sources, when the pipeline selects any.
    pub sources: Vec<String>,
    pub outputs: Vec<Vec<String>>,
}

/// Adapts to `sample` with `pipeline` and scores generations on `test`.
/// `dataset` supplies the source candidates (every project but `target`).
pub fn evaluate_once(
    ctx: &ScenarioContext<'_>,
    pipeline: Pipeline,
    dataset: &[ProjectCorpus],
    target: &str,
    sample: &[CodeSummaryPair],
    test: &[CodeSummaryPair],
    seed: u64,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Config(format!("empty test set for `{target}`")));
    }
    let a = adapt(ctx, pipeline, dataset, target, sample, seed)?;
    let code: Vec<Vec<String>> = test.iter().map(|p| p.code_tokens.clone()).collect();
    let outputs = summarize(ctx.model, &a.theta, a.view.as_ref(), ctx.codec, &code, ctx.decoding)?;
    let refs: Vec<Vec<String>> = test.iter().map(|p| p.summary_tokens.clone()).collect();
    let bleu = bleu(&outputs, &refs)?;
    let rouge_l = outputs.iter().zip(&refs).map(|(c, r)| rouge_l(c, r)).sum::<f64>() / refs.len() as f64;
    Ok(Evaluation { bleu, rouge_l, sources: a.sources, outputs })
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// The k-fold, repeated low-resource protocol for one pipeline.
pub fn run_scenario(
    ctx: &ScenarioContext<'_>,
    dataset: &[ProjectCorpus],
    pipeline: Pipeline,
    spec: &ScenarioSpec,
) -> Result<MetricsReport> {
    if spec.folds == 0 || spec.repeats == 0 || spec.n_target_samples == 0 {
        return Err(Error::Config("folds, repeats and n_target_samples must be positive".into()));
    }
    let targets: Vec<(usize, &ProjectCorpus)> = dataset
        .iter()
        .enumerate()
        .filter(|(_, p)| ctx.targets.as_ref().is_none_or(|t| t.contains(&p.project_id)))
        .collect();
    if let Some(wanted) = &ctx.targets {
        if let Some(missing) = wanted.iter().find(|w| !dataset.iter().any(|p| &p.project_id == *w)) {
            return Err(Error::UnknownProject(missing.clone()));
        }
    }
    struct Job<'a> {
        project: &'a ProjectCorpus,
        fold: usize,
        repeat: usize,
        seed: u64,
        train: Vec<CodeSummaryPair>,
        test: Vec<CodeSummaryPair>,
    }
    let mut jobs = Vec::new();
    for &(pi, project) in &targets {
        if project.len() < spec.folds {
            return Err(Error::Config(format!("project `{}` has fewer pairs than folds", project.project_id)));
        }
        let parts = fold_partition(project.len(), spec.folds, derive_seed(spec.seed, "folds", &[pi as u64]));
        for (f, test_idx) in parts.iter().enumerate() {
            let test: Vec<CodeSummaryPair> = test_idx.iter().map(|&i| project.pairs[i].clone()).collect();
            // A single fold has no held-out complement: train and test coincide.
            let train: Vec<CodeSummaryPair> = if spec.folds == 1 {
                test.clone()
            } else {
                (0..project.len()).filter(|i| test_idx.binary_search(i).is_err()).map(|i| project.pairs[i].clone()).collect()
            };
            if train.len() < spec.n_target_samples {
                return Err(Error::Config(format!(
                    "project `{}` fold {f} has {} training pairs, fewer than {} samples",
                    project.project_id,
                    train.len(),
                    spec.n_target_samples
                )));
            }
            for r in 0..spec.repeats {
                let seed = derive_seed(spec.seed, "evaluate", &[pi as u64, f as u64, r as u64]);
                jobs.push(Job { project, fold: f, repeat: r, seed, train: train.clone(), test: test.clone() });
            }
        }
    }
    let results: Vec<Result<TupleResult>> = jobs
        .par_iter()
        .map(|job| {
            let mut pool = job.train.clone();
            pool.shuffle(&mut rng(derive_seed(job.seed, "sample", &[])));
            pool.truncate(spec.n_target_samples);
            let e = evaluate_once(ctx, pipeline, dataset, &job.project.project_id, &pool, &job.test, job.seed)?;
            Ok(TupleResult {
                project: job.project.project_id.clone(),
                fold: job.fold,
                repeat: job.repeat,
                seed: job.seed,
                bleu: e.bleu,
                rouge_l: e.rouge_l,
                n_test: job.test.len(),
                sources: e.sources,
            })
        })
        .collect();
    let tuples = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut per_project = BTreeMap::new();
    for &(_, project) in &targets {
        let id = &project.project_id;
        let mine: Vec<&TupleResult> = tuples.iter().filter(|t| &t.project == id).collect();
        let fold_mean = |f: usize, pick: fn(&TupleResult) -> f64| mean(mine.iter().filter(|t| t.fold == f).map(|t| pick(t)));
        let bleu = mean((0..spec.folds).map(|f| fold_mean(f, |t| t.bleu)));
        let rouge_l = mean((0..spec.folds).map(|f| fold_mean(f, |t| t.rouge_l)));
        let n_test = mine.iter().filter(|t| t.repeat == 0).map(|t| t.n_test).sum();
        per_project.insert(id.clone(), ProjectMetrics { bleu, rouge_l, n_test });
    }
    let aggregate = Aggregate {
        bleu: mean(per_project.values().map(|m| m.bleu)),
        rouge_l: mean(per_project.values().map(|m| m.rouge_l)),
    };
    Ok(MetricsReport {
        pipeline,
        scenario: spec.clone(),
        per_project,
        aggregate,
        manifest: RunManifest { root_seed: spec.seed, base_checkpoint: ctx.base_checkpoint.clone(), tuples },
    })
}
