//! Run configuration and the run-directory layout.
//!
//! A run directory holds `config.json`, `manifest.json`, one
//! `sessions/session_NN.json` report and `checkpoints/session_NN.ckpt`
//! checkpoint per session, `final.ckpt`, `losses.csv`, `weights.csv`,
//! `sessions.csv`, `aggregates.csv` and `summary.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gfscl::metrics::{aggregate, aggregates_csv, sessions_csv, summary_table, SessionMetrics};
use gfscl::numerics::Checkpoint;
use gfscl::protocol::{build_protocol, generate_corpus, Corpus, CorpusSpec, Manifest, Preset, ProtocolShape, Template};
use gfscl::trainer::{losses_csv, run_protocol, weights_csv, SessionReport, TrainConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const SESSIONS_DIR: &str = "sessions";
pub const CHECKPOINTS_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    /// Regenerated from the spec on every use.
    Generated { spec: CorpusSpec },
    /// A corpus directory written by `gen-corpus`.
    Directory { path: PathBuf },
}

impl CorpusSource {
    pub fn load(&self) -> Result<Corpus> {
        match self {
            Self::Generated { spec } => Ok(generate_corpus(spec)?),
            Self::Directory { path } => {
                Corpus::load(path).with_context(|| format!("loading corpus from {}", path.display()))
            }
        }
    }
}

/// Everything a run depends on. Missing fields take the desk
/// `domainnet_like` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: CorpusSource,
    pub template: Template,
    pub preset: Preset,
    pub shape: ProtocolShape,
    pub protocol_seed: u64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Template::DomainnetLike, Preset::Desk, 0).expect("desk preset is valid")
    }
}

pub fn preset_corpus(template: Template, preset: Preset, seed: u64) -> Result<CorpusSpec> {
    Ok(match preset {
        Preset::Desk => CorpusSpec::desk(seed),
        Preset::Paper => {
            let shape = ProtocolShape::preset(template, preset)?;
            CorpusSpec::with_shape(shape.classes_needed(), shape.domains_wanted(), 20, 32, seed)?
        }
    })
}

impl RunConfig {
    pub fn preset(template: Template, preset: Preset, seed: u64) -> Result<Self> {
        let train = match preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        };
        Ok(Self {
            corpus: CorpusSource::Generated {
                spec: preset_corpus(template, preset, seed)?,
            },
            template,
            preset,
            shape: ProtocolShape::preset(template, preset)?,
            protocol_seed: seed,
            train: TrainConfig { seed, ..train },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{} is not a valid run config", path.display()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Set every seed: corpus generation, protocol sampling and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.protocol_seed = seed;
        self.train.seed = seed;
        if let CorpusSource::Generated { spec } = &mut self.corpus {
            spec.seed = seed;
        }
    }

    pub fn build_manifest(&self, corpus: &Corpus) -> Result<Manifest> {
        Ok(build_protocol(self.template, &self.shape, &corpus.info, self.protocol_seed)?)
    }
}

fn session_file(id: usize) -> String {
    format!("session_{id:02}.json")
}

fn checkpoint_file(id: usize) -> String {
    format!("session_{id:02}.ckpt")
}

/// Train every session and write the full run directory.
pub fn train(config: &RunConfig, dir: &Path, force: bool) -> Result<String> {
    config.train.validate()?;
    let config_path = dir.join(CONFIG_FILE);
    if config_path.exists() && !force {
        let old = RunConfig::load(&config_path)?;
        if &old != config {
            bail!(
                "{} already holds a run with a different config; pass --force to replace it or choose another --out",
                dir.display()
            );
        }
    }
    fs::create_dir_all(dir.join(SESSIONS_DIR))?;
    fs::create_dir_all(dir.join(CHECKPOINTS_DIR))?;
    fs::write(&config_path, config.to_json()?)?;

    let corpus = config.corpus.load()?;
    let manifest = config.build_manifest(&corpus)?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    let out = run_protocol(&manifest, &corpus, &config.train)?;
    for (r, ckpt) in out.reports.iter().zip(&out.checkpoints) {
        fs::write(dir.join(SESSIONS_DIR).join(session_file(r.session_id)), r.to_json()?)?;
        ckpt.save(&dir.join(CHECKPOINTS_DIR).join(checkpoint_file(r.session_id)))?;
    }
    if let Some(last) = out.checkpoints.last() {
        last.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    fs::write(dir.join("losses.csv"), losses_csv(&out.losses))?;
    fs::write(dir.join("weights.csv"), weights_csv(&out.weights))?;
    report(dir)
}

pub fn load_reports(dir: &Path) -> Result<Vec<SessionReport>> {
    let sessions = dir.join(SESSIONS_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&sessions)
        .with_context(|| format!("{} has no session reports; run `train` first", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(&p)?;
        let r: SessionReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        reports.push(r);
    }
    if reports.is_empty() {
        bail!("{} holds no session reports", sessions.display());
    }
    for (i, r) in reports.iter().enumerate() {
        if r.session_id != i + 1 {
            bail!("session reports are not numbered 1..{}: found session {}", reports.len(), r.session_id);
        }
    }
    Ok(reports)
}

/// Recompute metric CSVs and the summary from the stored reports.
pub fn report(dir: &Path) -> Result<String> {
    let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
    let reports = load_reports(dir)?;
    let metrics: Vec<SessionMetrics> = reports.iter().map(SessionReport::metrics).collect();
    let intervals: Vec<(usize, usize)> = manifest
        .group_intervals()
        .into_iter()
        .filter(|&(_, end)| end <= metrics.len())
        .collect();
    let agg = aggregate(&metrics, &intervals)?;
    fs::write(dir.join("sessions.csv"), sessions_csv(&metrics))?;
    fs::write(dir.join("aggregates.csv"), aggregates_csv(&agg))?;
    let summary = summary_table(&metrics, &agg);
    fs::write(dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}
