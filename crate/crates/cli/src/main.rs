mod config;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use metaprefix::checkpoint::{load_base, load_prefix, save_base, save_prefix, BaseCheckpoint, PrefixCheckpoint};
use metaprefix::corpus::{dedup_against, group_by_project, mine_repo, read_corpus, write_corpus, CleanConfig, CodeSummaryPair, ProjectCorpus};
use metaprefix::evalbench::{run_scenario, summarize, word_shift, Pipeline, ScenarioContext};
use metaprefix::meta::{build_meta_tasks, meta_train, select_sources, SummarizerObjective};
use metaprefix::model::{Decoding, PrefixParams, Seq2Seq};
use metaprefix::params::ParamSet;
use metaprefix::seed::{derive_seed, derive_seed_str, rng};
use metaprefix::textcodec::{Codec, Side, Vocabulary};
use metaprefix::train::{finetune_prefix, pretrain, RunLog};

use config::{resolve, CommonArgs, EvalArgs, MetaArgs, ModelArgs, RunConfig, ScenarioArgs, TrainArgs};

const CODE_VOCAB: &str = "code.vocab";
const SUMMARY_VOCAB: &str = "summary.vocab";

#[derive(Parser)]
#[command(name = "metaprefix", version, about = "Project-specific code summarization with meta-learned prefixes")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract code-summary pairs from a Java repository.
    Mine {
        #[arg(long)]
        repo: PathBuf,
        #[arg(long)]
        project_id: String,
        #[arg(long)]
        out: PathBuf,
        /// Auto-generated summary markers, one per line.
        #[arg(long)]
        markers_file: Option<PathBuf>,
    },
    /// Train the backbone on pooled corpora; writes the checkpoint and vocabularies.
    Pretrain {
        /// Corpus files to train on.
        #[arg(long, num_args = 1.., required = true)]
        corpus: Vec<PathBuf>,
        /// Corpora whose pairs are removed from the training data.
        #[arg(long, num_args = 1..)]
        held_out: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Fine-tune one project's prefix on its labelled pairs.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        /// Existing prefix checkpoint to continue from.
        #[arg(long)]
        prefix: Option<PathBuf>,
        /// Slot in `--prefix` to initialize the project from.
        #[arg(long)]
        init_from: Option<String>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        project: String,
        #[arg(long)]
        out: PathBuf,
        /// Cache the computed prefixes and drop the reparametrization MLP.
        #[arg(long)]
        drop_mlp: bool,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Meta-learn a prefix initialization over sources selected for a target.
    MetaTrain {
        #[arg(long)]
        base: PathBuf,
        /// Candidate source corpora.
        #[arg(long, num_args = 1.., required = true)]
        projects: Vec<PathBuf>,
        /// The target's labelled sample.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        meta: MetaArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Rank candidate source projects against a target sample.
    SelectSources {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        projects: Vec<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        /// Machine-readable score file; the table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Summarize every record of a corpus file, one line per record.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prefix: Option<PathBuf>,
        #[arg(long)]
        project: Option<String>,
        /// Corpus file whose code tokens are summarized.
        #[arg(long)]
        code: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Run the low-resource k-fold protocol for one pipeline.
    Evaluate {
        #[arg(long)]
        base: PathBuf,
        /// Directory of corpus files (`*.jsonl`).
        #[arg(long)]
        dataset: PathBuf,
        /// frozen_base, prefix_only, meta_only or mpcos.
        #[arg(long, default_value = "mpcos")]
        pipeline: Pipeline,
        /// Comma-separated target projects; all when absent.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<String>>,
        /// Report directory (report.json, report.txt).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        meta: MetaArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Per-word count changes between two sets of generated summaries.
    AnalyzeShift {
        /// Summaries of system A, one per line.
        #[arg(long)]
        a: PathBuf,
        /// Summaries of system B, one per line.
        #[arg(long)]
        b: PathBuf,
        /// Corpus files defining global word frequencies.
        #[arg(long, num_args = 1.., required = true)]
        global: Vec<PathBuf>,
        /// Output TSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Mine { repo, project_id, out, markers_file } => mine(&repo, &project_id, &out, markers_file.as_deref()),
        Command::Pretrain { corpus, held_out, out_dir, common, model, train } => {
            let mut cfg = resolve(&common, &out_dir)?;
            model.apply(&mut cfg.model);
            train.apply(&mut cfg.train);
            cmd_pretrain(&cfg, &corpus, &held_out, &out_dir)
        }
        Command::Finetune { base, prefix, init_from, corpus, project, out, drop_mlp, common, train } => {
            let mut cfg = resolve(&common, parent(&out))?;
            train.apply(&mut cfg.train);
            cmd_finetune(&cfg, &base, prefix.as_deref(), init_from.as_deref(), &corpus, &project, &out, drop_mlp)
        }
        Command::MetaTrain { base, projects, target, out, common, meta, eval } => {
            let mut cfg = resolve(&common, parent(&out))?;
            meta.apply(&mut cfg.meta);
            eval.apply(&mut cfg.eval);
            cmd_meta_train(&cfg, &base, &projects, &target, &out)
        }
        Command::SelectSources { base, projects, target, out, common, eval } => {
            let mut cfg = resolve(&common, out.as_deref().map(parent).unwrap_or(Path::new(".")))?;
            eval.apply(&mut cfg.eval);
            cmd_select(&cfg, &base, &projects, &target, out.as_deref())
        }
        Command::Generate { ckpt, prefix, project, code, out, common, eval } => {
            let mut cfg = resolve(&common, out.as_deref().map(parent).unwrap_or(Path::new(".")))?;
            eval.apply(&mut cfg.eval);
            cmd_generate(&cfg, &ckpt, prefix.as_deref(), project.as_deref(), &code, out.as_deref())
        }
        Command::Evaluate { base, dataset, pipeline, targets, out, common, scenario, train, meta, eval } => {
            let mut cfg = resolve(&common, &out)?;
            scenario.apply(&mut cfg.scenario);
            train.apply(&mut cfg.train);
            meta.apply(&mut cfg.meta);
            eval.apply(&mut cfg.eval);
            cmd_evaluate(&cfg, &base, &dataset, pipeline, targets, &out)
        }
        Command::AnalyzeShift { a, b, global, out } => analyze_shift(&a, &b, &global, out.as_deref()),
    }
}

fn parent(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_corpora(paths: &[PathBuf]) -> Result<Vec<CodeSummaryPair>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_corpus(p)?);
    }
    Ok(all)
}

fn read_projects(paths: &[PathBuf]) -> Result<Vec<ProjectCorpus>> {
    Ok(group_by_project(read_corpora(paths)?))
}

fn read_single_project(path: &Path) -> Result<ProjectCorpus> {
    let mut groups = group_by_project(read_corpus(path)?);
    match groups.len() {
        1 => Ok(groups.remove(0)),
        0 => bail!("{} holds no pairs", path.display()),
        n => bail!("{} mixes {n} projects; expected one", path.display()),
    }
}

fn decoding(cfg: &RunConfig) -> Decoding {
    match cfg.eval.beam_size {
        0 | 1 => Decoding::Greedy,
        n => Decoding::Beam(n),
    }
}

/// Backbone, vocabularies and model for a base checkpoint. Vocabularies are
/// read from the checkpoint's directory.
struct Loaded {
    model: Seq2Seq,
    base: BaseCheckpoint,
    codec: Codec,
}

fn load_all(base: &Path) -> Result<Loaded> {
    let ckpt = load_base(base)?;
    let dir = parent(base);
    let code_vocab = Vocabulary::load(&dir.join(CODE_VOCAB))?;
    let summary_vocab = Vocabulary::load(&dir.join(SUMMARY_VOCAB))?;
    let c = &ckpt.config;
    if code_vocab.len() != c.code_vocab_size || summary_vocab.len() != c.summary_vocab_size {
        bail!(
            "vocabularies in {} ({} / {}) do not match the checkpoint ({} / {})",
            dir.display(),
            code_vocab.len(),
            summary_vocab.len(),
            c.code_vocab_size,
            c.summary_vocab_size
        );
    }
    let codec = Codec { code_vocab, summary_vocab, max_code_len: c.max_code_len, max_sum_len: c.max_sum_len };
    Ok(Loaded { model: Seq2Seq::new(ckpt.config.clone())?, base: ckpt, codec })
}

fn mine(repo: &Path, project_id: &str, out: &Path, markers: Option<&Path>) -> Result<()> {
    let clean = match markers {
        Some(p) => CleanConfig::from_markers_text(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => CleanConfig::default(),
    };
    let outcome = mine_repo(repo, project_id, &clean)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w:?}");
    }
    write_corpus(out, &outcome.pairs)?;
    eprintln!("{} methods seen, {} pairs kept -> {}", outcome.methods_seen, outcome.pairs.len(), out.display());
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, corpus: &[PathBuf], held_out: &[PathBuf], out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let mut pairs = read_corpora(corpus)?;
    if !held_out.is_empty() {
        pairs = dedup_against(&pairs, &read_projects(held_out)?);
    }
    if pairs.is_empty() {
        bail!("no training pairs");
    }
    let code_vocab = Vocabulary::build(&pairs, Side::Code, cfg.model.code_vocab_size)?;
    let summary_vocab = Vocabulary::build(&pairs, Side::Summary, cfg.model.summary_vocab_size)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.code_vocab_size = code_vocab.len();
    model_cfg.summary_vocab_size = summary_vocab.len();
    let codec = Codec {
        code_vocab,
        summary_vocab,
        max_code_len: model_cfg.max_code_len,
        max_sum_len: model_cfg.max_sum_len,
    };
    let encoded = codec.encode_pairs(&pairs);
    let tcfg = metaprefix::train::TrainConfig { seed: derive_seed(cfg.seed, "pretrain", &[cfg.train.seed]), ..cfg.train.clone() };

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    cfg.persist("pretrain")?;
    let mut log = RunLog::default();
    let outcome = pretrain(&model_cfg, &encoded, &tcfg, &mut log)?;
    log.write(&out_dir.join("pretrain_log.jsonl"))?;
    codec.code_vocab.save(&out_dir.join(CODE_VOCAB))?;
    codec.summary_vocab.save(&out_dir.join(SUMMARY_VOCAB))?;
    let trainable = outcome.params.names().cloned().collect();
    let ckpt = BaseCheckpoint { config: model_cfg, params: outcome.params, trainable };
    save_base(&out_dir.join("base.ckpt"), &ckpt)?;
    eprintln!(
        "{} pairs, best epoch {} of {}; wrote {}",
        pairs.len(),
        outcome.best_epoch,
        outcome.epochs_run,
        out_dir.join("base.ckpt").display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    cfg: &RunConfig,
    base: &Path,
    prefix: Option<&Path>,
    init_from: Option<&str>,
    corpus: &Path,
    project: &str,
    out: &Path,
    drop_mlp: bool,
) -> Result<()> {
    cfg.train.validate()?;
    let l = load_all(base)?;
    let data = read_single_project(corpus)?;
    let mut ckpt = match prefix {
        Some(p) => load_prefix(p)?,
        None => {
            let seed = derive_seed_str(cfg.seed, "finetune_prefix_init", project);
            PrefixCheckpoint::new(PrefixParams::new(&l.base.config, &mut rng(seed)))
        }
    };
    if *ckpt.prefix.config() != l.base.config {
        bail!("prefix checkpoint was built for a different model configuration");
    }
    if let Some(src) = init_from {
        ckpt.prefix.register_copy(project, src)?;
    }
    let theta = ckpt.backbone_for(&l.base.params, project);
    let encoded = l.codec.encode_pairs(&data.pairs);
    let tcfg = metaprefix::train::TrainConfig {
        seed: derive_seed_str(derive_seed(cfg.seed, "finetune", &[cfg.train.seed]), "project", project),
        ..cfg.train.clone()
    };
    cfg.persist("finetune")?;
    let mut log = RunLog::default();
    let outcome = finetune_prefix(&l.model, &theta, Some(&ckpt.prefix), project, &encoded, &tcfg, &mut log)?;
    if let Some(head) = outcome.output_layer() {
        ckpt.output_layers.insert(project.to_string(), head);
    }
    ckpt.prefix = outcome.prefix.context("fine-tuning returned no prefix")?;
    if drop_mlp {
        ckpt.prefix.drop_mlp()?;
    }
    save_prefix(out, &ckpt)?;
    log.write(&out.with_extension("log.jsonl"))?;
    eprintln!("best epoch {} of {}; wrote {}", outcome.best_epoch, outcome.epochs_run, out.display());
    Ok(())
}

fn selection_for(l: &Loaded, cfg: &RunConfig, projects: &[PathBuf], target: &Path) -> Result<(ProjectCorpus, Vec<ProjectCorpus>, metaprefix::meta::Selection)> {
    let target = read_single_project(target)?;
    let candidates: Vec<ProjectCorpus> =
        read_projects(projects)?.into_iter().filter(|p| p.project_id != target.project_id).collect();
    if candidates.is_empty() {
        bail!("no candidate projects besides the target `{}`", target.project_id);
    }
    let sel = select_sources(&target, &candidates, &l.model, &l.base.params, &l.codec, cfg.eval.top_n)?;
    for w in &sel.warnings {
        eprintln!("warning: {w}");
    }
    Ok((target, candidates, sel))
}

fn cmd_select(cfg: &RunConfig, base: &Path, projects: &[PathBuf], target: &Path, out: Option<&Path>) -> Result<()> {
    let l = load_all(base)?;
    let (_, _, sel) = selection_for(&l, cfg, projects, target)?;
    print!("{}", sel.to_table());
    if let Some(out) = out {
        cfg.persist("select-sources")?;
        write_text(out, &(serde_json::to_string_pretty(&sel)? + "\n"))?;
    }
    Ok(())
}

fn cmd_meta_train(cfg: &RunConfig, base: &Path, projects: &[PathBuf], target: &Path, out: &Path) -> Result<()> {
    cfg.meta.validate()?;
    let l = load_all(base)?;
    let (target, candidates, sel) = selection_for(&l, cfg, projects, target)?;
    eprint!("{}", sel.to_table());
    let sources: Vec<ProjectCorpus> = candidates.into_iter().filter(|c| sel.selected.contains(&c.project_id)).collect();
    let (tasks, warnings) = build_meta_tasks(&sources, cfg.meta.k, derive_seed(cfg.seed, "meta_tasks", &[]));
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if tasks.is_empty() {
        bail!("no selected source has {} pairs", 2 * cfg.meta.k);
    }
    let episodes: Vec<_> = tasks.iter().map(|t| t.encode(&l.codec)).collect();
    let mcfg = metaprefix::meta::MetaConfig { seed: derive_seed(cfg.seed, "meta-train", &[cfg.meta.seed]), ..cfg.meta.clone() };
    let mut phi = PrefixParams::new(&l.base.config, &mut rng(derive_seed(cfg.seed, "meta_prefix_init", &[])));
    phi.register_project(&target.project_id, &mut rng(derive_seed(cfg.seed, "meta_prefix_slot", &[])))?;
    cfg.persist("meta-train")?;
    let obj = SummarizerObjective { model: &l.model, theta: &l.base.params, use_prefix: true };
    let learned = meta_train(&obj, &phi.view(&target.project_id)?, &episodes, &mcfg)?;
    phi.absorb(&target.project_id, &learned.phi)?;
    save_prefix(out, &PrefixCheckpoint::new(phi))?;
    eprintln!(
        "{} epochs (converged: {}), final meta loss {:.4}; wrote {}",
        learned.epoch_losses.len(),
        learned.converged,
        learned.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_generate(
    cfg: &RunConfig,
    ckpt: &Path,
    prefix: Option<&Path>,
    project: Option<&str>,
    code: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let l = load_all(ckpt)?;
    let records = read_corpus(code)?;
    let (theta, view): (ParamSet, Option<ParamSet>) = match prefix {
        Some(p) => {
            let pc = load_prefix(p)?;
            let project = project.context("--prefix needs --project")?;
            (pc.backbone_for(&l.base.params, project), Some(pc.prefix.view(project)?))
        }
        None => (l.base.params.clone(), None),
    };
    let tokens: Vec<Vec<String>> = records.iter().map(|r| r.code_tokens.clone()).collect();
    let outputs = summarize(&l.model, &theta, view.as_ref(), &l.codec, &tokens, decoding(cfg))?;
    if out.is_some() {
        cfg.persist("generate")?;
    }
    let text: String = outputs.iter().map(|o| o.join(" ") + "\n").collect();
    emit(out, &text)
}

fn cmd_evaluate(
    cfg: &RunConfig,
    base: &Path,
    dataset: &Path,
    pipeline: Pipeline,
    targets: Option<Vec<String>>,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    let l = load_all(base)?;
    let mut files: Vec<PathBuf> = fs::read_dir(dataset)
        .with_context(|| format!("reading {}", dataset.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "jsonl"));
    files.sort();
    let projects = read_projects(&files)?;
    if projects.is_empty() {
        bail!("no corpus files in {}", dataset.display());
    }
    let ctx = ScenarioContext {
        model: &l.model,
        theta: &l.base.params,
        codec: &l.codec,
        train: cfg.train.clone(),
        meta: cfg.meta.clone(),
        top_n: cfg.eval.top_n,
        decoding: decoding(cfg),
        targets,
        base_checkpoint: Some(base.display().to_string()),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.persist("evaluate")?;
    let report = run_scenario(&ctx, &projects, pipeline, &cfg.scenario)?;
    write_text(&out.join("report.json"), &report.to_json()?)?;
    let text = report.to_text();
    write_text(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect())
}

fn analyze_shift(a: &Path, b: &Path, global: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut freq: HashMap<String, u64> = HashMap::new();
    for p in read_corpora(global)? {
        for w in p.summary_tokens {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    let ws = word_shift(&read_lines(a)?, &read_lines(b)?, &freq);
    emit(out, &ws.to_tsv())
}
