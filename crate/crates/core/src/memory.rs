//! Rehearsal-free class memory.
//!
//! Each class keeps one centroid of backbone features plus the number of
//! domains folded into it. Domain-incremental sessions fold a new domain in
//! with a weighted running mean, and a contrastive objective pulls fresh
//! features toward the stored centroids.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, DistanceKind, Scalar, Tape, Tensor, Var};
use crate::util;

pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f64>,
    /// Domains folded in so far.
    pub domains: usize,
    /// Shots per domain at the last update.
    pub shots: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeStore {
    entries: BTreeMap<usize, Prototype>,
}

/// Element-wise mean of `K ≥ 1` feature rows.
pub fn compute_prototype<F: AsRef<[f64]>>(features: &[F]) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Memory("prototype of an empty feature set".into()))?
        .as_ref();
    let mut sum = vec![0.0; first.len()];
    for f in features {
        let f = f.as_ref();
        if f.len() != sum.len() {
            return Err(Error::shape("compute_prototype", &[sum.len()], &[f.len()]));
        }
        for (s, v) in sum.iter_mut().zip(f) {
            *s += v;
        }
    }
    let k = features.len() as f64;
    Ok(sum.into_iter().map(|s| s / k).collect())
}

/// Fold `K` features of one new domain into a prototype that already
/// averages `E` domains of `K` shots each:
/// `(Σ features + E·K·p_prev) / ((E+1)·K)`.
pub fn update_prototype<F: AsRef<[f64]>>(p_prev: &[f64], domains: usize, features: &[F]) -> Result<Vec<f64>> {
    if domains < 1 {
        return Err(Error::Memory(format!("domain count must be at least 1, got {domains}")));
    }
    if features.is_empty() {
        return Err(Error::Memory("update with an empty feature set".into()));
    }
    let (e, k) = (domains as f64, features.len() as f64);
    let mut sum: Vec<f64> = p_prev.iter().map(|p| e * k * p).collect();
    for f in features {
        let f = f.as_ref();
        if f.len() != sum.len() {
            return Err(Error::shape("update_prototype", &[sum.len()], &[f.len()]));
        }
        for (s, v) in sum.iter_mut().zip(f) {
            *s += v;
        }
    }
    let denom = (e + 1.0) * k;
    Ok(sum.into_iter().map(|s| s / denom).collect())
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&Prototype> {
        self.entries.get(&class)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.entries.contains_key(&class)
    }

    /// Classes in ascending id order.
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Prototype)> {
        self.entries.iter().map(|(&c, p)| (c, p))
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|p| p.vector.len())
    }

    /// First exposure of `class`: the mean of every feature, spread over
    /// `domains` domains with equal shots.
    pub fn insert<F: AsRef<[f64]>>(&mut self, class: usize, features: &[F], domains: usize) -> Result<()> {
        if self.entries.contains_key(&class) {
            return Err(Error::Memory(format!("class {class} already has a prototype")));
        }
        if domains < 1 || features.len() % domains != 0 {
            return Err(Error::Memory(format!(
                "{} features cannot split evenly over {domains} domains",
                features.len()
            )));
        }
        let vector = compute_prototype(features)?;
        self.check_dim(vector.len())?;
        self.entries.insert(
            class,
            Prototype {
                vector,
                domains,
                shots: features.len() / domains,
            },
        );
        Ok(())
    }

    /// Fold one new domain of `class` into its prototype. The shot count
    /// must match the one already stored.
    pub fn update<F: AsRef<[f64]>>(&mut self, class: usize, features: &[F]) -> Result<()> {
        let entry = self
            .entries
            .get_mut(&class)
            .ok_or_else(|| Error::Memory(format!("class {class} has no prototype to update")))?;
        if features.len() != entry.shots {
            return Err(Error::Memory(format!(
                "class {class}: update with {} shots, stored prototype has {} per domain",
                features.len(),
                entry.shots
            )));
        }
        entry.vector = update_prototype(&entry.vector, entry.domains, features)?;
        entry.domains += 1;
        Ok(())
    }

    /// Round every vector to `f32` so a checkpoint round trip is lossless.
    pub fn quantize_f32(&mut self) {
        for p in self.entries.values_mut() {
            for v in &mut p.vector {
                *v = f64::from(*v as f32);
            }
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        match self.dim() {
            Some(have) if have != d => Err(Error::shape("prototype store", &[have], &[d])),
            _ => Ok(()),
        }
    }

    /// Mean Euclidean distance from each feature row to its class prototype.
    pub fn mean_distance<F: AsRef<[f64]>>(&self, features: &[F], labels: &[usize]) -> Result<f64> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Memory("mean distance needs one label per feature".into()));
        }
        let mut total = 0.0;
        for (f, &c) in features.iter().zip(labels) {
            let p = self
                .get(c)
                .ok_or_else(|| Error::Memory(format!("class {c} has no prototype")))?;
            total += euclidean(f.as_ref(), &p.vector);
        }
        Ok(total / features.len() as f64)
    }

    /// `prototypes.meta` holds `[class, E, K]` rows; `prototypes.vectors`
    /// holds the matching `D` floats. An empty store writes nothing.
    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<()> {
        let Some(d) = self.dim() else { return Ok(()) };
        let c = self.len();
        let mut meta = Vec::with_capacity(3 * c);
        let mut vectors = Vec::with_capacity(c * d);
        for (class, p) in self.iter() {
            meta.extend([class as f64, p.domains as f64, p.shots as f64]);
            vectors.extend_from_slice(&p.vector);
        }
        ckpt.push("prototypes.meta", &Tensor::new(vec![c, 3], meta)?);
        ckpt.push("prototypes.vectors", &Tensor::new(vec![c, d], vectors)?);
        Ok(())
    }

    pub fn read_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (Some(meta), Some(vectors)) = (ckpt.get("prototypes.meta"), ckpt.get("prototypes.vectors")) else {
            return Ok(Self::new());
        };
        let (ms, vs) = (meta.shape(), vectors.shape());
        if ms.len() != 2 || ms[1] != 3 || vs.len() != 2 || vs[0] != ms[0] {
            return Err(Error::Checkpoint(format!("prototype tensors have shapes {ms:?} and {vs:?}")));
        }
        let d = vs[1];
        let mut store = Self::new();
        for (row, vec) in meta.data().chunks(3).zip(vectors.data().chunks(d)) {
            let as_count = |v: f32| -> Result<usize> {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Checkpoint(format!("prototype metadata entry {v} is not a count")))
                }
            };
            let class = as_count(row[0])?;
            let proto = Prototype {
                vector: vec.iter().map(|&v| f64::from(v)).collect(),
                domains: as_count(row[1])?,
                shots: as_count(row[2])?,
            };
            if store.entries.insert(class, proto).is_some() {
                return Err(Error::Checkpoint(format!("class {class} stored twice")));
            }
        }
        Ok(store)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One row of a contrastive batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Member {
    /// The stored prototype of a class, entering as a constant.
    Prototype(usize),
    /// Row `i` of the current feature matrix.
    Feature(usize),
}

/// `T = 2S` members; rows `2s` and `2s+1` form positive pair `s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveBatch {
    pub members: Vec<Member>,
    /// Class of each pair, distinct across pairs.
    pub classes: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn pair_count(&self) -> usize {
        self.classes.len()
    }

    pub fn is_prototype(&self, row: usize) -> bool {
        matches!(self.members[row], Member::Prototype(_))
    }

    /// Stack the members into a `[T, D]` tape value.
    pub fn assemble<T: Scalar>(&self, tape: &mut Tape<T>, features: Var, store: &PrototypeStore) -> Result<Var> {
        let s = tape.shape(features).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("contrastive batch", &s, &[]));
        }
        let mut rows = Vec::with_capacity(self.members.len());
        for m in &self.members {
            rows.push(match *m {
                Member::Prototype(c) => {
                    let p = store
                        .get(c)
                        .ok_or_else(|| Error::Memory(format!("class {c} has no prototype")))?;
                    if p.vector.len() != s[1] {
                        return Err(Error::shape("contrastive batch", &s, &[p.vector.len()]));
                    }
                    tape.constant(vec![1, s[1]], p.vector.iter().map(|&v| T::lit(v)).collect())?
                }
                Member::Feature(i) if i < s[0] => tape.narrow(features, 0, i, 1)?,
                Member::Feature(i) => {
                    return Err(Error::Memory(format!("feature row {i} out of range for {} rows", s[0])));
                }
            });
        }
        tape.concat(&rows, 0)
    }
}

/// Choose `s` distinct classes from the current features and pair each with
/// its stored prototype, or with a second feature of the same class when no
/// prototype exists. Deterministic under `seed`.
pub fn sample_positive_pairs(store: &PrototypeStore, labels: &[usize], s: usize, seed: u64) -> Result<ContrastiveBatch> {
    if s == 0 {
        return Err(Error::Memory("need at least one positive pair".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let eligible: Vec<(usize, Vec<usize>)> = by_class
        .into_iter()
        .filter(|(c, rows)| store.contains(*c) || rows.len() >= 2)
        .collect();
    if eligible.len() < s {
        return Err(Error::Memory(format!(
            "{s} positive pairs requested but only {} classes are eligible",
            eligible.len()
        )));
    }
    let mut rng = util::rng(seed, &[]);
    let mut picks = index::sample(&mut rng, eligible.len(), s).into_vec();
    picks.sort_unstable();
    let mut members = Vec::with_capacity(2 * s);
    let mut classes = Vec::with_capacity(s);
    for k in picks {
        let (c, rows) = &eligible[k];
        if store.contains(*c) {
            members.push(Member::Prototype(*c));
            members.push(Member::Feature(rows[rng.random_range(0..rows.len())]));
        } else {
            let pair = index::sample(&mut rng, rows.len(), 2);
            members.push(Member::Feature(rows[pair.index(0)]));
            members.push(Member::Feature(rows[pair.index(1)]));
        }
        classes.push(*c);
    }
    Ok(ContrastiveBatch { members, classes })
}

/// Pairwise cross-entropy over the rows of `x[T, D]`, rows `2s`/`2s+1`
/// paired. Each anchor's logits are `−d/τ` against every other row; the
/// loss is the mean over anchors of `−log softmax` at the partner.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, tau: f64, kind: DistanceKind) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Memory(format!("temperature must be positive, got {tau}")));
    }
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::shape("contrastive_loss", &s, &[2]));
    }
    if s[0] % 2 != 0 {
        return Err(Error::Memory(format!("row {} has no pair partner", s[0] - 1)));
    }
    let t = s[0];
    let d = tape.pairwise_distance(x, kind)?;
    let logits = tape.scale(d, T::lit(-1.0 / tau));
    let partners: Vec<usize> = (0..t).map(|m| m ^ 1).collect();
    let diag: Vec<usize> = (0..t).collect();
    tape.cross_entropy(logits, &partners, Some(&diag))
}

#[cfg(test)]
mod tests;
