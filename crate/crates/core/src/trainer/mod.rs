//! Session orchestration over a frozen backbone with adapter banks.
//!
//! Base and class-incremental sessions minimize cross-entropy plus `ζ` times
//! the adapter diversity penalty. Domain-incremental sessions minimize
//! cross-entropy plus the prototype contrastive term. After every session the
//! prototype store is refreshed from the final model and accuracy is scored
//! with the prototype cosine classifier.

mod config;
mod head;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use config::{Schedule, TrainConfig, DEFAULT_WEIGHT_DECAY, DEFAULT_ZETA, DESK_ZETA};
pub use head::{ClassifierHead, HEAD_INIT_STD};

use crate::backbone::{freeze_backbone, Backbone};
use crate::error::{Error, Result};
use crate::memory::{contrastive_loss, sample_positive_pairs, PrototypeStore};
use crate::metrics::{Accuracy, SessionMetrics};
use crate::moa::{total_cosine_loss, MoaBank};
use crate::numerics::{Checkpoint, ParamGroup, ParamStore, Tape, Tensor};
use crate::protocol::{Corpus, Manifest, Sample, SessionData, TaskKind};
use crate::util;

// Seed path tags.
const INIT: u64 = 1;
const SHUFFLE: u64 = 2;
const PAIRS: u64 = 3;
const EXPAND: u64 = 4;
const SAMPLE: u64 = 5;

/// Pixel `v` maps to `(v/255 - 0.5) / 0.25`.
pub fn normalize_pixels(pixels: &[u8], out: &mut Vec<f32>) {
    out.extend(pixels.iter().map(|&v| (f32::from(v) / 255.0 - 0.5) * 4.0));
}

fn batch_images(corpus: &Corpus, samples: &[Sample]) -> Vec<f32> {
    let mut out = Vec::with_capacity(samples.len() * corpus.info.image_len());
    for s in samples {
        normalize_pixels(corpus.image(s.id), &mut out);
    }
    out
}

/// Mean loss components over one epoch. `cos` is measured in base and
/// class-incremental sessions, `contrastive` in domain-incremental ones,
/// whether or not the switch adds them to `total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub session_id: usize,
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub ce: f64,
    pub cos: Option<f64>,
    pub contrastive: Option<f64>,
    pub total: f64,
}

pub const LOSS_HEADER: &str = "session,epoch,lr,steps,ce,cos,contrastive,total";

pub fn losses_csv(rows: &[EpochLoss]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.8e}"));
    let mut out = format!("{LOSS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:e},{},{:.8e},{},{},{:.8e}\n",
            r.session_id,
            r.epoch,
            r.lr,
            r.steps,
            r.ce,
            opt(r.cos),
            opt(r.contrastive),
            r.total
        ));
    }
    out
}

/// Gate weights of one adapter block for one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub session_id: usize,
    pub sample_id: usize,
    pub class: usize,
    pub domain: usize,
    pub layer: usize,
    pub position: usize,
    pub weights: Vec<f64>,
}

pub fn weights_csv(rows: &[WeightRecord]) -> String {
    let p = rows.first().map_or(0, |r| r.weights.len());
    let mut out = String::from("session,sample,class,domain,layer,position");
    for i in 1..=p {
        out.push_str(&format!(",w{i}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}", r.session_id, r.sample_id, r.class, r.domain, r.layer, r.position));
        for w in &r.weights {
            out.push_str(&format!(",{w:.6}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: usize,
    pub task_kind: TaskKind,
    pub domains: Vec<usize>,
    pub classes: Vec<usize>,
    pub train_samples: usize,
    pub alpha: f64,
    pub delta: f64,
    pub base_accuracy: f64,
    /// Absent while no novel class has been seen.
    pub novel_accuracy: Option<f64>,
    pub seen: Accuracy,
    pub unseen: Accuracy,
    pub base: Accuracy,
    pub novel: Accuracy,
    /// Seen-domain accuracy per class.
    pub per_class: BTreeMap<usize, Accuracy>,
    /// Unseen-domain accuracy per class.
    pub per_class_unseen: BTreeMap<usize, Accuracy>,
    /// Mean distance from this session's training features to the stored
    /// prototypes of their classes, measured before the prototype update.
    /// Domain-incremental sessions only.
    pub calibration_distance: Option<f64>,
    /// Domain count `E` per stored class after the session.
    pub prototype_domains: BTreeMap<usize, usize>,
    pub head_rows: usize,
    /// Hex digest of all backbone parameters.
    pub backbone_checksum: String,
}

impl SessionReport {
    pub fn metrics(&self) -> SessionMetrics {
        SessionMetrics {
            session_id: self.session_id,
            task: self.task_kind.as_str().to_string(),
            alpha: self.alpha,
            delta: self.delta,
            base: self.base_accuracy,
            novel: self.novel_accuracy,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Argmax of cosine similarity against every stored prototype, with scores
/// in ascending class order. A zero query scores 0 everywhere; ties go to
/// the lowest class id.
pub fn classify(feature: &[f64], prototypes: &PrototypeStore) -> Result<(usize, Vec<(usize, f64)>)> {
    if prototypes.is_empty() {
        return Err(Error::Memory("cannot classify against an empty prototype store".into()));
    }
    let qn = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut scores = Vec::with_capacity(prototypes.len());
    let mut best: Option<(usize, f64)> = None;
    for (c, p) in prototypes.iter() {
        if p.vector.len() != feature.len() {
            return Err(Error::shape("classify", &[feature.len()], &[p.vector.len()]));
        }
        let pn = p.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = if qn == 0.0 || pn == 0.0 {
            0.0
        } else {
            feature.iter().zip(&p.vector).map(|(a, b)| a * b).sum::<f64>() / (qn * pn)
        };
        scores.push((c, s));
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    Ok((best.map(|b| b.0).unwrap_or_default(), scores))
}

/// Adapter-augmented backbone, training head and prototype memory.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore<f32>,
    pub backbone: Backbone,
    pub bank: MoaBank,
    pub head: ClassifierHead,
    pub prototypes: PrototypeStore,
    /// Number of sessions trained so far.
    pub sessions_done: usize,
}

impl Model {
    pub fn init(config: &TrainConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = util::rng(config.seed, &[INIT]);
        let mut store = ParamStore::new();
        let backbone = Backbone::init(config.backbone.clone(), &mut store, &mut rng)?;
        let bank = MoaBank::init(&config.backbone, config.moa.clone(), &mut store, &mut rng)?;
        let head = ClassifierHead::init(&mut store, classes, config.backbone.embed_dim, &mut rng)?;
        freeze_backbone(&mut store);
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            bank,
            head,
            prototypes: PrototypeStore::new(),
            sessions_done: 0,
        })
    }

    pub fn backbone_checksum(&self) -> u64 {
        self.store.checksum(ParamGroup::Backbone)
    }

    pub fn head_rows(&self) -> usize {
        self.head.classes(&self.store)
    }

    /// Features of `samples` in evaluation order, widened to f64.
    pub fn features(&self, corpus: &Corpus, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        let d = self.config.backbone.embed_dim;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.eval_batch_size) {
            let mut tape = Tape::with_params(&self.store);
            let f = self.backbone.forward(&mut tape, &batch_images(corpus, chunk), Some(&self.bank))?;
            out.extend(tape.value(f.feature).chunks(d).map(|r| r.iter().map(|&v| f64::from(v)).collect()));
        }
        Ok(out)
    }

    /// Gate weights of the blocks in transformer layer `layer` (1-based).
    pub fn gate_weights(&self, corpus: &Corpus, samples: &[Sample], layer: usize, session_id: usize) -> Result<Vec<WeightRecord>> {
        let p = self.config.moa.adapters;
        let mut out = Vec::new();
        for chunk in samples.chunks(self.config.eval_batch_size) {
            let mut tape = Tape::with_params(&self.store);
            let f = self.backbone.forward(&mut tape, &batch_images(corpus, chunk), Some(&self.bank))?;
            for (i, s) in chunk.iter().enumerate() {
                for t in f.moa.iter().filter(|t| t.layer == layer) {
                    let w = &tape.value(t.weights)[i * p..(i + 1) * p];
                    out.push(WeightRecord {
                        session_id,
                        sample_id: s.id,
                        class: s.class,
                        domain: s.domain,
                        layer: t.layer,
                        position: t.position,
                        weights: w.iter().map(|&v| f64::from(v)).collect(),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Prototype-classifier accuracy over `samples`, overall and per class.
    pub fn evaluate(&self, corpus: &Corpus, samples: &[Sample]) -> Result<(Accuracy, BTreeMap<usize, Accuracy>)> {
        let feats = self.features(corpus, samples)?;
        let mut all = Accuracy::default();
        let mut per_class: BTreeMap<usize, Accuracy> = BTreeMap::new();
        for (f, s) in feats.iter().zip(samples) {
            let (pred, _) = classify(f, &self.prototypes)?;
            all.record(pred == s.class);
            per_class.entry(s.class).or_default().record(pred == s.class);
        }
        Ok((all, per_class))
    }

    fn sgd_step(&mut self, lr: f64) {
        let (lr, wd) = (lr as f32, self.config.weight_decay as f32);
        for (_, p) in self.store.iter_mut() {
            let Some(g) = p.tensor.grad().map(<[f32]>::to_vec) else { continue };
            for (v, g) in p.tensor.data_mut().iter_mut().zip(g) {
                *v -= lr * (g + wd * *v);
            }
        }
    }

    /// One optimization step on `batch`; returns `(ce, cos, contrastive, total)`.
    fn step(&mut self, corpus: &Corpus, batch: &[Sample], task: TaskKind, lr: f64, pair_seed: u64) -> Result<[Option<f64>; 4]> {
        let cfg = &self.config;
        let mut tape = Tape::with_params(&self.store);
        let out = self.backbone.forward(&mut tape, &batch_images(corpus, batch), Some(&self.bank))?;
        let logits = self.head.logits(&mut tape, out.feature)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.class).collect();
        let ce = tape.cross_entropy(logits, &labels, None)?;
        let mut total = ce;
        let (mut cos, mut con) = (None, None);
        match task {
            TaskKind::Base | TaskKind::Cil => {
                if cfg.moa.adapters >= 2 {
                    let c = total_cosine_loss(&mut tape, &out.moa, cfg.gamma)?;
                    cos = Some(f64::from(tape.scalar_value(c)));
                    if cfg.cosine_reg && cfg.zeta != 0.0 {
                        let w = tape.scale(c, cfg.zeta as f32);
                        total = tape.add(total, w)?;
                    }
                }
            }
            TaskKind::Dil => {
                let classes: BTreeSet<usize> = labels.iter().copied().collect();
                let s = cfg.max_pairs.map_or(classes.len(), |m| m.min(classes.len()));
                let pairs = sample_positive_pairs(&self.prototypes, &labels, s, pair_seed)?;
                let x = pairs.assemble(&mut tape, out.feature, &self.prototypes)?;
                let c = contrastive_loss(&mut tape, x, cfg.tau, cfg.distance)?;
                con = Some(f64::from(tape.scalar_value(c)));
                if cfg.contrastive {
                    total = tape.add(total, c)?;
                }
            }
        }
        let values = [
            Some(f64::from(tape.scalar_value(ce))),
            cos,
            con,
            Some(f64::from(tape.scalar_value(total))),
        ];
        self.store.zero_grad();
        tape.backward(total, &mut self.store)?;
        self.sgd_step(lr);
        Ok(values)
    }

    fn fit(&mut self, corpus: &Corpus, data: &SessionData) -> Result<Vec<EpochLoss>> {
        let schedule = match data.task {
            TaskKind::Base => self.config.base.clone(),
            _ => self.config.incremental.clone(),
        };
        let id = data.session_id as u64;
        let mut order = data.train.clone();
        let mut log = Vec::with_capacity(schedule.epochs);
        for epoch in 0..schedule.epochs {
            let lr = schedule.lr_at(epoch);
            order.shuffle(&mut util::rng(self.config.seed, &[SHUFFLE, id, epoch as u64]));
            let mut sums = [0.0f64; 4];
            let mut seen = [false; 4];
            let mut steps = 0;
            for (k, batch) in order.chunks(self.config.batch_size).enumerate() {
                let seed = util::derive_seed(self.config.seed, &[PAIRS, id, epoch as u64, k as u64]);
                let v = self.step(corpus, batch, data.task, lr, seed)?;
                for i in 0..4 {
                    if let Some(x) = v[i] {
                        sums[i] += x;
                        seen[i] = true;
                    }
                }
                steps += 1;
            }
            let mean = |i: usize| seen[i].then(|| sums[i] / steps as f64);
            log.push(EpochLoss {
                session_id: data.session_id,
                epoch,
                lr,
                steps,
                ce: sums[0] / steps as f64,
                cos: mean(1),
                contrastive: mean(2),
                total: sums[3] / steps as f64,
            });
        }
        Ok(log)
    }

    /// Train the first session and store one prototype per base class over
    /// all base-session domains.
    pub fn train_base(&mut self, corpus: &Corpus, data: &SessionData, base_domains: usize) -> Result<Vec<EpochLoss>> {
        if data.task != TaskKind::Base || self.sessions_done != 0 {
            return Err(Error::Training(format!("session {} is not a base session for a fresh model", data.session_id)));
        }
        if data.train.is_empty() {
            return Err(Error::Training("base session has no training samples".into()));
        }
        let max_class = data.train.iter().map(|s| s.class).max().unwrap_or(0);
        if max_class >= self.head_rows() {
            return Err(Error::Training(format!("class {max_class} exceeds the {} head rows", self.head_rows())));
        }
        let log = self.fit(corpus, data)?;
        let feats = self.features(corpus, &data.train)?;
        for (c, rows) in group_by_class(&data.train, &feats) {
            self.prototypes.insert(c, &rows, base_domains)?;
        }
        self.prototypes.quantize_f32();
        self.sessions_done = 1;
        Ok(log)
    }

    /// Train a class- or domain-incremental session. Returns the epoch log
    /// and, for domain-incremental sessions, the calibration distance.
    pub fn train_incremental(&mut self, corpus: &Corpus, data: &SessionData, kind: TaskKind) -> Result<(Vec<EpochLoss>, Option<f64>)> {
        if kind == TaskKind::Base || data.task != kind {
            return Err(Error::Training(format!(
                "session {} is {}, asked to train it as {}",
                data.session_id,
                data.task.as_str(),
                kind.as_str()
            )));
        }
        if self.sessions_done == 0 {
            return Err(Error::Training("incremental session before the base session".into()));
        }
        if data.train.is_empty() {
            return Err(Error::Training(format!("session {} has no training samples", data.session_id)));
        }
        let classes: BTreeSet<usize> = data.train.iter().map(|s| s.class).collect();
        match kind {
            TaskKind::Cil => {
                if let Some(c) = classes.iter().find(|c| self.prototypes.contains(**c)) {
                    return Err(Error::Training(format!("class {c} is already known")));
                }
                let rows = self.head_rows();
                let top = *classes.iter().next_back().unwrap_or(&0);
                if top >= rows {
                    let mut rng = util::rng(self.config.seed, &[EXPAND, data.session_id as u64]);
                    self.head.expand(&mut self.store, top + 1 - rows, &mut rng)?;
                }
            }
            _ => {
                if let Some(c) = classes.iter().find(|c| !self.prototypes.contains(**c)) {
                    return Err(Error::Training(format!("class {c} has no prototype to calibrate against")));
                }
            }
        }
        let log = self.fit(corpus, data)?;
        let feats = self.features(corpus, &data.train)?;
        let mut calibration = None;
        if kind == TaskKind::Dil {
            let labels: Vec<usize> = data.train.iter().map(|s| s.class).collect();
            calibration = Some(self.prototypes.mean_distance(&feats, &labels)?);
        }
        for (c, rows) in group_by_class(&data.train, &feats) {
            match kind {
                TaskKind::Cil => self.prototypes.insert(c, &rows, 1)?,
                _ => self.prototypes.update(c, &rows)?,
            }
        }
        self.prototypes.quantize_f32();
        self.sessions_done += 1;
        Ok((log, calibration))
    }

    /// Parameters by name plus the prototype store.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        for (_, p) in self.store.iter() {
            ckpt.push(p.name.clone(), &p.tensor);
        }
        self.prototypes.write_checkpoint(&mut ckpt)?;
        ckpt.push("sessions_done", &Tensor::<f32>::scalar(self.sessions_done as f32));
        Ok(ckpt)
    }

    /// Rebuild a model for `config` and overwrite it from `ckpt`.
    pub fn from_checkpoint(config: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let rows = ckpt.require("head.w")?.shape().first().copied().unwrap_or(0);
        let mut model = Self::init(config, rows.max(1))?;
        let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = ckpt.require(&name)?;
            if t.shape() != model.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            model.store.replace(id, t.clone());
        }
        model.prototypes = PrototypeStore::read_checkpoint(ckpt)?;
        model.sessions_done = ckpt.get("sessions_done").map_or(0, |t| t.data()[0] as usize);
        Ok(model)
    }
}

fn group_by_class(samples: &[Sample], feats: &[Vec<f64>]) -> BTreeMap<usize, Vec<Vec<f64>>> {
    let mut out: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (s, f) in samples.iter().zip(feats) {
        out.entry(s.class).or_default().push(f.clone());
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<SessionReport>,
    pub losses: Vec<EpochLoss>,
    /// Gate weights of the last transformer layer on the final seen-test set.
    pub weights: Vec<WeightRecord>,
    /// One checkpoint after every session.
    pub checkpoints: Vec<Checkpoint>,
    pub model: Model,
}

/// Score the model after session `data.session_id`.
pub fn score_session(model: &Model, manifest: &Manifest, corpus: &Corpus, data: &SessionData) -> Result<SessionReport> {
    let desc = manifest.session(data.session_id)?;
    let base: BTreeSet<usize> = manifest.base_classes().iter().copied().collect();
    let (seen, per_class) = model.evaluate(corpus, &data.seen_test)?;
    let (unseen, per_class_unseen) = model.evaluate(corpus, &data.unseen_test)?;
    let (mut b, mut n) = (Accuracy::default(), Accuracy::default());
    for (c, a) in &per_class {
        if base.contains(c) {
            b.merge(*a);
        } else {
            n.merge(*a);
        }
    }
    let pct = |a: &Accuracy, what: &str| {
        a.percent()
            .ok_or_else(|| Error::Training(format!("session {} has an empty {what} test set", data.session_id)))
    };
    Ok(SessionReport {
        session_id: data.session_id,
        task_kind: data.task,
        domains: desc.domains.clone(),
        classes: desc.classes.clone(),
        train_samples: data.train.len(),
        alpha: pct(&seen, "seen")?,
        delta: pct(&unseen, "unseen")?,
        base_accuracy: pct(&b, "base")?,
        novel_accuracy: n.percent(),
        seen,
        unseen,
        base: b,
        novel: n,
        per_class,
        per_class_unseen,
        calibration_distance: None,
        prototype_domains: model.prototypes.iter().map(|(c, p)| (c, p.domains)).collect(),
        head_rows: model.head_rows(),
        backbone_checksum: format!("{:016x}", model.backbone_checksum()),
    })
}

/// Train every session of `manifest` in order and score each one.
pub fn run_protocol(manifest: &Manifest, corpus: &Corpus, config: &TrainConfig) -> Result<RunOutput> {
    manifest.validate()?;
    if manifest.corpus != corpus.info {
        return Err(Error::Training("manifest was built for a different corpus".into()));
    }
    if config.backbone.image_size != corpus.info.image_size || config.backbone.channels != corpus.info.channels {
        return Err(Error::Training(format!(
            "backbone expects {}px images with {} channels, corpus has {}px with {}",
            config.backbone.image_size, config.backbone.channels, corpus.info.image_size, corpus.info.channels
        )));
    }
    let mut model = Model::init(config, manifest.base_classes().len())?;
    let frozen = model.backbone_checksum();
    let mut out = RunOutput {
        reports: Vec::new(),
        losses: Vec::new(),
        weights: Vec::new(),
        checkpoints: Vec::new(),
        model: model.clone(),
    };
    for id in 1..=manifest.session_count {
        let data = manifest.sample_session(id, util::derive_seed(config.seed, &[SAMPLE]))?;
        let (log, calibration) = match data.task {
            TaskKind::Base => (model.train_base(corpus, &data, manifest.shape.base_domains)?, None),
            kind => model.train_incremental(corpus, &data, kind)?,
        };
        if model.backbone_checksum() != frozen {
            return Err(Error::Training(format!("backbone parameters changed during session {id}")));
        }
        let mut report = score_session(&model, manifest, corpus, &data)?;
        report.calibration_distance = calibration;
        if id == manifest.session_count {
            out.weights = model.gate_weights(corpus, &data.seen_test, config.backbone.num_layers, id)?;
        }
        out.losses.extend(log);
        out.reports.push(report);
        out.checkpoints.push(model.checkpoint()?);
    }
    out.model = model;
    Ok(out)
}

#[cfg(test)]
mod tests;
