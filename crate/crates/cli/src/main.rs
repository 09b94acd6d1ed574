mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gfscl::moa::Weighting;
use gfscl::protocol::{generate_corpus, import_directory, Corpus, CorpusSpec, Manifest, Preset, Template, CORPUS_INDEX_FILE};
use gfscl::trainer::{Model, TrainConfig};

use run::{CorpusSource, RunConfig};

#[derive(Parser)]
#[command(name = "gfscl", version, about = "Generalized few-shot continual learning with mixtures of adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-domain corpus, or import an image tree.
    GenCorpus(GenCorpusArgs),
    /// Write a session manifest for a corpus.
    BuildProtocol(BuildProtocolArgs),
    /// Train all sessions and write a run directory.
    Train(Box<TrainArgs>),
    /// Re-score a checkpoint on one test split.
    Eval(EvalArgs),
    /// Rebuild metric CSVs and the summary table of a run.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    domains: usize,
    /// Images per (class, domain) pair.
    #[arg(long, default_value_t = 20)]
    per_pair: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Import `<dir>/<domain>/<class>/*.{pgm,ppm}` instead of rendering.
    #[arg(long)]
    import: Option<PathBuf>,
    /// Write into a directory that already holds a corpus.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct BuildProtocolArgs {
    /// Corpus directory; defaults to the generated corpus of the preset.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "domainnet_like")]
    template: Template,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    template: Option<Template>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Seeds corpus generation, protocol sampling and training together.
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus directory instead of the generated corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Run directory; defaults to `<run root>/<template>_<preset>_s<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "GFSCL_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
    /// Replace a run directory that holds a different config.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    ablation: AblationArgs,
}

#[derive(Args, Default)]
struct AblationArgs {
    /// Fixed uniform adapter weights instead of the gate.
    #[arg(long)]
    disable_moa_weighting: bool,
    #[arg(long)]
    disable_cosine_reg: bool,
    #[arg(long)]
    disable_contrastive: bool,
    /// Both regularizers off.
    #[arg(long)]
    naive_finetune: bool,
    #[arg(long)]
    adapters: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    base_epochs: Option<usize>,
    #[arg(long)]
    incremental_epochs: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    incremental_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Seen,
    Unseen,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory, absolute or under the run root.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, env = "GFSCL_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
    /// Defaults to the final checkpoint of the run.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to the manifest of the run.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Session whose test sets are scored; defaults to the last session the checkpoint trained.
    #[arg(long)]
    session: Option<usize>,
    #[arg(long, value_enum, default_value = "seen")]
    split: Split,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, env = "GFSCL_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
}

fn resolve_run(run: &Path, root: &Path) -> Result<PathBuf> {
    if run.is_dir() {
        return Ok(run.to_path_buf());
    }
    let under = root.join(run);
    if under.is_dir() {
        return Ok(under);
    }
    bail!("no run directory at {} or {}", run.display(), under.display())
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    if a.out.join(CORPUS_INDEX_FILE).exists() && !a.force {
        bail!("{} already holds a corpus; pass --force to overwrite it", a.out.display());
    }
    let (corpus, spec) = match &a.import {
        Some(root) => (import_directory(root, a.image_size)?, None),
        None => {
            let spec = CorpusSpec::with_shape(a.classes, a.domains, a.per_pair, a.image_size, a.seed)?;
            (generate_corpus(&spec)?, Some(spec))
        }
    };
    fs::create_dir_all(&a.out)?;
    corpus.save(&a.out, spec.as_ref())?;
    let info = &corpus.info;
    println!(
        "wrote {} images ({} classes x {} domains x {}) to {}",
        info.sample_count(),
        info.classes,
        info.domains(),
        info.per_pair,
        a.out.display()
    );
    if !corpus.self_check.is_empty() {
        let s: Vec<String> = corpus.self_check.iter().map(|v| format!("{v:.1}")).collect();
        println!("nearest-mean self-check accuracy per domain: {}", s.join(" "));
    }
    Ok(())
}

fn build_protocol_cmd(a: BuildProtocolArgs) -> Result<()> {
    let mut config = RunConfig::preset(a.template, a.preset, a.seed)?;
    if let Some(dir) = a.corpus {
        config.corpus = CorpusSource::Directory { path: dir };
    }
    let corpus = config.corpus.load()?;
    let manifest = config.build_manifest(&corpus)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    manifest.save(&a.out)?;
    let pattern: Vec<&str> = manifest.task_pattern().iter().map(|t| t.as_str()).collect();
    println!("{} sessions: {}", manifest.session_count, pattern.join(" "));
    Ok(())
}

fn apply_ablation(c: &mut RunConfig, a: &AblationArgs) {
    let t = &mut c.train;
    if a.disable_moa_weighting {
        t.moa.weighting = Weighting::Uniform;
    }
    if a.disable_cosine_reg || a.naive_finetune {
        t.cosine_reg = false;
    }
    if a.disable_contrastive || a.naive_finetune {
        t.contrastive = false;
    }
    if let Some(v) = a.adapters {
        t.moa.adapters = v;
    }
    if let Some(v) = a.hidden {
        t.moa.hidden = v;
    }
    if let Some(v) = a.gamma {
        t.gamma = v;
    }
    if let Some(v) = a.zeta {
        t.zeta = v;
    }
    if let Some(v) = a.tau {
        t.tau = v;
    }
    if let Some(v) = a.base_epochs {
        t.base.epochs = v;
    }
    if let Some(v) = a.incremental_epochs {
        t.incremental.epochs = v;
    }
    if let Some(v) = a.base_lr {
        t.base.lr = v;
    }
    if let Some(v) = a.incremental_lr {
        t.incremental.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
}

/// File config (or defaults), then preset, template, seed, corpus and
/// ablation flags in that order.
fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.preset.is_some() || a.template.is_some() {
        let template = a.template.unwrap_or(c.template);
        let preset = a.preset.unwrap_or(c.preset);
        let fresh = RunConfig::preset(template, preset, c.protocol_seed)?;
        c.template = template;
        c.shape = fresh.shape;
        if a.preset.is_some() {
            c.preset = preset;
            c.train = TrainConfig { seed: c.train.seed, ..fresh.train };
            if matches!(c.corpus, CorpusSource::Generated { .. }) {
                c.corpus = fresh.corpus;
            }
        }
    }
    if let Some(seed) = a.seed {
        c.set_seed(seed);
    } else {
        let seed = c.protocol_seed;
        if let CorpusSource::Generated { spec } = &mut c.corpus {
            spec.seed = seed;
        }
    }
    if let Some(dir) = &a.corpus {
        c.corpus = CorpusSource::Directory { path: dir.clone() };
    }
    apply_ablation(&mut c, &a.ablation);
    Ok(c)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = train_config(&a)?;
    let dir = a.out.clone().unwrap_or_else(|| {
        a.run_root.join(format!(
            "{}_{}_s{}",
            config.template.as_str(),
            config.preset.as_str(),
            config.protocol_seed
        ))
    });
    let summary = run::train(&config, &dir, a.force)?;
    print!("{summary}");
    println!("run directory: {}", dir.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let dir = resolve_run(&a.run, &a.run_root)?;
    let config = RunConfig::load(&dir.join(run::CONFIG_FILE))?;
    let ckpt_path = a.checkpoint.unwrap_or_else(|| dir.join(run::FINAL_CHECKPOINT));
    let ckpt = run::load_checkpoint(&ckpt_path)?;
    let model = Model::from_checkpoint(&config.train, &ckpt)
        .with_context(|| format!("{} does not match the run config", ckpt_path.display()))?;
    let manifest_path = a.manifest.unwrap_or_else(|| dir.join(run::MANIFEST_FILE));
    let manifest = Manifest::load(&manifest_path)?;
    let corpus: Corpus = config.corpus.load()?;
    if manifest.corpus != corpus.info {
        bail!("{} was built for a different corpus than the run uses", manifest_path.display());
    }
    let session = a.session.unwrap_or(model.sessions_done);
    if session == 0 || session > manifest.session_count {
        bail!("session {session} is outside 1..={}", manifest.session_count);
    }
    let data = manifest.sample_session(session, config.train.seed)?;
    let (name, samples) = match a.split {
        Split::Seen => ("seen", &data.seen_test),
        Split::Unseen => ("unseen", &data.unseen_test),
    };
    let (acc, _) = model.evaluate(&corpus, samples)?;
    let classes = manifest.seen_classes(session).len();
    println!(
        "split={name} session={session} correct={} total={} accuracy={:.4} chance={:.4}",
        acc.correct,
        acc.total,
        acc.percent().unwrap_or(0.0),
        100.0 / classes as f64
    );
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let dir = resolve_run(&a.run, &a.run_root)?;
    print!("{}", run::report(&dir)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::BuildProtocol(a) => build_protocol_cmd(a),
        Command::Train(a) => train_cmd(*a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
