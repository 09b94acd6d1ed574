//! Session schedules over a multi-domain corpus.
//!
//! A manifest lists a base session followed by class-incremental (CIL) and
//! domain-incremental (DIL) few-shot sessions. Each new class group arrives
//! in one CIL session and is revisited in new domains by the DIL sessions
//! that follow it. The last domains of the corpus are never trained on and
//! serve as the unseen-domain test set.
//!
//! Every `(class, domain)` pair is split once: image indices below
//! `train_per_pair` form the training pool, the rest the test split.

pub mod corpus;
pub mod importer;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;
pub use corpus::{generate_corpus, standard_domains, Corpus, CorpusInfo, CorpusSpec, DomainTransform, INDEX_FILE as CORPUS_INDEX_FILE};
pub use importer::import_directory;

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Base,
    Cil,
    Dil,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Cil => "cil",
            Self::Dil => "dil",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    DomainnetLike,
    ImagenetcLike,
    Custom,
}

impl Template {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DomainnetLike => "domainnet_like",
            Self::ImagenetcLike => "imagenetc_like",
            Self::Custom => "custom",
        }
    }
}

impl std::str::FromStr for Template {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domainnet_like" => Ok(Self::DomainnetLike),
            "imagenetc_like" => Ok(Self::ImagenetcLike),
            "custom" => Ok(Self::Custom),
            _ => Err(Error::Protocol(format!(
                "unknown template {s:?}; expected domainnet_like, imagenetc_like or custom"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::Protocol(format!("unknown preset {s:?}; expected desk or paper"))),
        }
    }
}

/// Numbers that fix a schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolShape {
    pub base_classes: usize,
    pub base_domains: usize,
    pub n_way: usize,
    pub k_shot: usize,
    /// Novel class groups, one CIL session each.
    pub groups: usize,
    /// DIL sessions following each group's CIL session.
    pub dil_per_group: usize,
    pub unseen_domains: usize,
}

impl ProtocolShape {
    pub fn preset(template: Template, preset: Preset) -> Result<Self> {
        Ok(match (template, preset) {
            (Template::DomainnetLike, Preset::Paper) => Self {
                base_classes: 60,
                base_domains: 1,
                n_way: 5,
                k_shot: 5,
                groups: 4,
                dil_per_group: 1,
                unseen_domains: 1,
            },
            (Template::ImagenetcLike, Preset::Paper) => Self {
                base_classes: 60,
                base_domains: 4,
                n_way: 10,
                k_shot: 5,
                groups: 4,
                dil_per_group: 2,
                unseen_domains: 3,
            },
            (Template::DomainnetLike, Preset::Desk) => Self {
                base_classes: 12,
                base_domains: 1,
                n_way: 3,
                k_shot: 2,
                groups: 2,
                dil_per_group: 1,
                unseen_domains: 1,
            },
            (Template::ImagenetcLike, Preset::Desk) => Self {
                base_classes: 12,
                base_domains: 2,
                n_way: 2,
                k_shot: 2,
                groups: 2,
                dil_per_group: 2,
                unseen_domains: 1,
            },
            (Template::Custom, _) => {
                return Err(Error::Protocol("the custom template takes an explicit shape".into()));
            }
        })
    }

    pub fn session_count(&self) -> usize {
        1 + self.groups * (1 + self.dil_per_group)
    }

    pub fn classes_needed(&self) -> usize {
        self.base_classes + self.groups * self.n_way
    }

    /// Domains needed when every DIL session gets a fresh one.
    pub fn domains_wanted(&self) -> usize {
        self.base_domains + self.groups * self.dil_per_group + self.unseen_domains
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub session_id: usize,
    pub task: TaskKind,
    pub domains: Vec<usize>,
    pub classes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_way: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_shot: Option<usize>,
    /// Training sample ids, ascending.
    pub train_samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub template: Template,
    pub seed: u64,
    pub corpus: CorpusInfo,
    pub shape: ProtocolShape,
    /// Image indices below this form each pair's training pool.
    pub train_per_pair: usize,
    pub session_count: usize,
    pub sessions: Vec<SessionDescriptor>,
    pub unseen_domains: Vec<usize>,
}

/// A labeled sample reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub class: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionData {
    pub session_id: usize,
    pub task: TaskKind,
    /// Training samples in a seeded order.
    pub train: Vec<Sample>,
    /// Test split of every `(class, domain)` pair seen so far.
    pub seen_test: Vec<Sample>,
    /// Test split of every seen class in the unseen domains.
    pub unseen_test: Vec<Sample>,
}

pub fn train_per_pair(per_pair: usize) -> usize {
    ((per_pair as f64 * TRAIN_FRACTION).floor() as usize).clamp(1, per_pair.max(1))
}

/// Lay out the sessions for `shape` over `corpus` and draw every few-shot
/// training set. Deterministic under `seed`.
pub fn build_protocol(template: Template, shape: &ProtocolShape, corpus: &CorpusInfo, seed: u64) -> Result<Manifest> {
    let pool = train_per_pair(corpus.per_pair);
    if shape.base_classes == 0 || shape.base_domains == 0 {
        return Err(Error::Protocol("the base session needs at least one class and domain".into()));
    }
    if shape.groups > 0 && (shape.n_way == 0 || shape.k_shot == 0) {
        return Err(Error::Protocol("incremental sessions need n_way ≥ 1 and k_shot ≥ 1".into()));
    }
    if shape.classes_needed() > corpus.classes {
        return Err(Error::Protocol(format!(
            "schedule needs {} classes, corpus has {}",
            shape.classes_needed(),
            corpus.classes
        )));
    }
    let trainable = corpus.domains().saturating_sub(shape.unseen_domains);
    let needs_dil = shape.groups > 0 && shape.dil_per_group > 0;
    if shape.unseen_domains == 0 || trainable < shape.base_domains + usize::from(needs_dil) {
        return Err(Error::Protocol(format!(
            "corpus has {} domains; schedule needs {} base, at least one incremental and {} unseen",
            corpus.domains(),
            shape.base_domains,
            shape.unseen_domains
        )));
    }
    if shape.dil_per_group + 1 > trainable {
        return Err(Error::Protocol(format!(
            "each group visits {} domains but only {trainable} are trainable",
            shape.dil_per_group + 1
        )));
    }
    if shape.groups > 0 && shape.k_shot > pool {
        return Err(Error::Protocol(format!(
            "{}-shot sessions exhaust the {pool}-image training pool of a (class, domain) pair",
            shape.k_shot
        )));
    }
    if corpus.per_pair <= pool {
        return Err(Error::Protocol(format!(
            "{} images per pair leave no test split",
            corpus.per_pair
        )));
    }

    let unseen: Vec<usize> = (trainable..corpus.domains()).collect();
    let base_classes: Vec<usize> = (0..shape.base_classes).collect();
    let base_domains: Vec<usize> = (0..shape.base_domains).collect();
    let mut base_train = Vec::new();
    for &c in &base_classes {
        for &d in &base_domains {
            base_train.extend((0..pool).map(|k| corpus.sample_id(c, d, k)));
        }
    }
    base_train.sort_unstable();
    let mut sessions = vec![SessionDescriptor {
        session_id: 1,
        task: TaskKind::Base,
        domains: base_domains.clone(),
        classes: base_classes,
        n_way: None,
        k_shot: None,
        train_samples: base_train,
    }];

    let mut fresh = shape.base_domains..trainable;
    let mut last_domain = 0;
    let mut next_class = shape.base_classes;
    for g in 0..shape.groups {
        let classes: Vec<usize> = (next_class..next_class + shape.n_way).collect();
        next_class += shape.n_way;
        let mut visited = BTreeSet::new();
        for step in 0..=shape.dil_per_group {
            let (task, domain) = if step == 0 {
                (TaskKind::Cil, last_domain)
            } else {
                let d = match fresh.next() {
                    Some(d) => d,
                    None => (0..trainable)
                        .find(|d| !visited.contains(d))
                        .expect("group visits fewer domains than are trainable"),
                };
                (TaskKind::Dil, d)
            };
            visited.insert(domain);
            last_domain = domain;
            let id = sessions.len() + 1;
            let mut train = Vec::with_capacity(shape.n_way * shape.k_shot);
            for &c in &classes {
                let mut rng = util::rng(seed, &[g as u64, step as u64, c as u64]);
                let picks = index::sample(&mut rng, pool, shape.k_shot);
                train.extend(picks.iter().map(|k| corpus.sample_id(c, domain, k)));
            }
            train.sort_unstable();
            sessions.push(SessionDescriptor {
                session_id: id,
                task,
                domains: vec![domain],
                classes: classes.clone(),
                n_way: Some(shape.n_way),
                k_shot: Some(shape.k_shot),
                train_samples: train,
            });
        }
    }
    let manifest = Manifest {
        dataset: corpus.name.clone(),
        template,
        seed,
        corpus: corpus.clone(),
        shape: shape.clone(),
        train_per_pair: pool,
        session_count: sessions.len(),
        sessions,
        unseen_domains: unseen,
    };
    manifest.validate()?;
    Ok(manifest)
}

impl Manifest {
    /// Check every structural invariant of a schedule.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Protocol(m));
        let info = &self.corpus;
        if self.sessions.is_empty() || self.sessions[0].task != TaskKind::Base {
            return bad("session 1 must be the base session".into());
        }
        if self.session_count != self.sessions.len() {
            return bad(format!("session_count {} but {} sessions", self.session_count, self.sessions.len()));
        }
        if self.train_per_pair == 0 || self.train_per_pair >= info.per_pair {
            return bad(format!("train_per_pair {} invalid for {} images per pair", self.train_per_pair, info.per_pair));
        }
        let unseen: BTreeSet<usize> = self.unseen_domains.iter().copied().collect();
        if self.unseen_domains.iter().any(|&d| d >= info.domains()) {
            return bad("unseen domain out of range".into());
        }
        let mut used_samples = BTreeSet::new();
        let mut seen_classes = BTreeSet::new();
        let mut seen_pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
        for (k, s) in self.sessions.iter().enumerate() {
            if s.session_id != k + 1 {
                return bad(format!("session at position {} has id {}", k + 1, s.session_id));
            }
            if k > 0 && s.task == TaskKind::Base {
                return bad(format!("session {} is a second base session", s.session_id));
            }
            if s.domains.iter().any(|d| unseen.contains(d) || *d >= info.domains()) {
                return bad(format!("session {} trains on an unseen or unknown domain", s.session_id));
            }
            if s.classes.iter().any(|&c| c >= info.classes) {
                return bad(format!("session {} names an unknown class", s.session_id));
            }
            match s.task {
                TaskKind::Base => {}
                TaskKind::Cil => {
                    if s.classes.iter().any(|c| seen_classes.contains(c)) {
                        return bad(format!("CIL session {} reuses an earlier class", s.session_id));
                    }
                }
                TaskKind::Dil => {
                    if s.classes.iter().any(|c| !seen_classes.contains(c)) {
                        return bad(format!("DIL session {} introduces an unseen class", s.session_id));
                    }
                    for &c in &s.classes {
                        for &d in &s.domains {
                            if seen_pairs.contains(&(c, d)) {
                                return bad(format!("DIL session {} repeats class {c} in domain {d}", s.session_id));
                            }
                        }
                    }
                }
            }
            if let (Some(n), Some(kk)) = (s.n_way, s.k_shot) {
                if s.classes.len() != n || s.train_samples.len() != n * kk {
                    return bad(format!("session {} does not hold {n}-way {kk}-shot data", s.session_id));
                }
            }
            let classes: BTreeSet<usize> = s.classes.iter().copied().collect();
            let domains: BTreeSet<usize> = s.domains.iter().copied().collect();
            for &id in &s.train_samples {
                if id >= info.sample_count() {
                    return bad(format!("session {} lists sample {id} beyond the corpus", s.session_id));
                }
                let (c, d, i) = info.locate(id);
                if !classes.contains(&c) || !domains.contains(&d) || i >= self.train_per_pair {
                    return bad(format!("session {} sample {id} lies outside its training pool", s.session_id));
                }
                if !used_samples.insert(id) {
                    return bad(format!("sample {id} is used by two sessions"));
                }
            }
            seen_classes.extend(s.classes.iter().copied());
            for &c in &s.classes {
                for &d in &s.domains {
                    seen_pairs.insert((c, d));
                }
            }
        }
        Ok(())
    }

    pub fn session(&self, id: usize) -> Result<&SessionDescriptor> {
        id.checked_sub(1)
            .and_then(|i| self.sessions.get(i))
            .ok_or_else(|| Error::Protocol(format!("no session {id}; manifest has {}", self.sessions.len())))
    }

    pub fn base_classes(&self) -> &[usize] {
        &self.sessions[0].classes
    }

    /// `(i, j)` per class group: its CIL session and the last DIL session
    /// that revisits the same classes. Groups without a DIL are skipped.
    pub fn group_intervals(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, s) in self.sessions.iter().enumerate() {
            if s.task != TaskKind::Cil {
                continue;
            }
            let last = self.sessions[k + 1..]
                .iter()
                .take_while(|t| t.task == TaskKind::Dil && t.classes == s.classes)
                .last();
            if let Some(t) = last {
                out.push((s.session_id, t.session_id));
            }
        }
        out
    }

    /// Classes seen through session `id`, in ascending order.
    pub fn seen_classes(&self, id: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.sessions[..id.min(self.sessions.len())]
            .iter()
            .flat_map(|s| s.classes.iter().copied())
            .collect();
        set.into_iter().collect()
    }

    /// `(class, domain)` pairs trained on through session `id`.
    pub fn seen_pairs(&self, id: usize) -> BTreeSet<(usize, usize)> {
        let mut set = BTreeSet::new();
        for s in &self.sessions[..id.min(self.sessions.len())] {
            for &c in &s.classes {
                for &d in &s.domains {
                    set.insert((c, d));
                }
            }
        }
        set
    }

    fn test_split(&self, class: usize, domain: usize) -> impl Iterator<Item = Sample> + '_ {
        (self.train_per_pair..self.corpus.per_pair).map(move |k| Sample {
            id: self.corpus.sample_id(class, domain, k),
            class,
            domain,
        })
    }

    fn sample(&self, id: usize) -> Sample {
        let (class, domain, _) = self.corpus.locate(id);
        Sample { id, class, domain }
    }

    /// Training set of session `id` in a `seed`-shuffled order, plus the
    /// cumulative seen-domain and the unseen-domain test sets.
    pub fn sample_session(&self, id: usize, seed: u64) -> Result<SessionData> {
        let s = self.session(id)?;
        let mut train: Vec<Sample> = s.train_samples.iter().map(|&i| self.sample(i)).collect();
        if train.is_empty() {
            return Err(Error::Protocol(format!("session {id} has no training samples")));
        }
        train.shuffle(&mut util::rng(seed, &[id as u64]));
        let seen_test = self.seen_pairs(id).into_iter().flat_map(|(c, d)| self.test_split(c, d)).collect();
        let mut unseen_test = Vec::new();
        for c in self.seen_classes(id) {
            for &d in &self.unseen_domains {
                unseen_test.extend(self.test_split(c, d));
            }
        }
        Ok(SessionData {
            session_id: id,
            task: s.task,
            train,
            seen_test,
            unseen_test,
        })
    }

    /// Document text; parsing it back and re-serializing reproduces it.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Protocol(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Session ids grouped by kind, for summaries.
    pub fn task_pattern(&self) -> Vec<TaskKind> {
        self.sessions.iter().map(|s| s.task).collect()
    }
}

/// Per-class test-sample counts, for reports.
pub fn class_counts(samples: &[Sample]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry(s.class).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests;
