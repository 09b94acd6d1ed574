use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::memory::DEFAULT_TAU;
use crate::moa::{MoaConfig, Weighting, DEFAULT_GAMMA};
use crate::numerics::DistanceKind;

pub const DEFAULT_ZETA: f64 = 0.8;
/// `DEFAULT_ZETA` spread over the eight blocks of the desk backbone.
pub const DESK_ZETA: f64 = 0.1;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

/// Step learning-rate schedule over whole epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    /// Epoch indices (0-based) from which the rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.01,
            milestones: Vec::new(),
            decay: 0.1,
        }
    }
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub moa: MoaConfig,
    /// Cosine slack of the adapter diversity penalty.
    pub gamma: f64,
    /// Weight of the diversity penalty in base and class-incremental sessions.
    pub zeta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub distance: DistanceKind,
    pub base: Schedule,
    pub incremental: Schedule,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub weight_decay: f64,
    /// Upper bound on positive pairs per step; `None` uses every class in the batch.
    pub max_pairs: Option<usize>,
    pub cosine_reg: bool,
    pub contrastive: bool,
    /// Seeds parameter init, shuffling and pair sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Tiny backbone and short schedules for single-core runs.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            moa: MoaConfig::default(),
            gamma: DEFAULT_GAMMA,
            zeta: DESK_ZETA,
            tau: DEFAULT_TAU,
            distance: DistanceKind::Euclidean,
            base: Schedule {
                epochs: 4,
                lr: 0.05,
                milestones: vec![3],
                decay: 0.1,
            },
            incremental: Schedule {
                epochs: 20,
                lr: 0.001,
                milestones: Vec::new(),
                decay: 0.1,
            },
            batch_size: 32,
            eval_batch_size: 64,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            max_pairs: None,
            cosine_reg: true,
            contrastive: true,
            seed: 0,
        }
    }

    /// Full-length schedules: 160 base epochs with drops at 80 and 120,
    /// 100 incremental epochs, batch 64.
    pub fn paper() -> Self {
        Self {
            base: Schedule {
                epochs: 160,
                lr: 0.001,
                milestones: vec![80, 120],
                decay: 0.1,
            },
            incremental: Schedule {
                epochs: 100,
                lr: 0.0005,
                milestones: Vec::new(),
                decay: 0.1,
            },
            batch_size: 64,
            zeta: DEFAULT_ZETA,
            ..Self::desk()
        }
    }

    /// Diversity penalty and contrastive term both off.
    pub fn naive_finetune(mut self) -> Self {
        self.cosine_reg = false;
        self.contrastive = false;
        self
    }

    pub fn uniform_weighting(mut self) -> Self {
        self.moa.weighting = Weighting::Uniform;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        self.backbone.validate()?;
        if self.moa.adapters == 0 {
            return bad("at least one adapter is required".into());
        }
        if self.moa.hidden == 0 || self.moa.hidden >= self.backbone.embed_dim {
            return bad(format!("adapter hidden width must lie in 1..{}", self.backbone.embed_dim));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.zeta >= 0.0) || !self.zeta.is_finite() {
            return bad(format!("zeta must be finite and non-negative, got {}", self.zeta));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.max_pairs == Some(0) {
            return bad("max_pairs must be positive when set".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, s) in [("base", &self.base), ("incremental", &self.incremental)] {
            if !(s.lr >= 0.0) || !s.lr.is_finite() || !(s.decay > 0.0) {
                return bad(format!("{name} schedule needs a finite lr and a positive decay"));
            }
        }
        Ok(())
    }
}
