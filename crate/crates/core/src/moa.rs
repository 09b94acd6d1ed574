//! Mixture of convolutional adapters.
//!
//! One block sits at each layer-norm output of each transformer layer. It
//! holds `P` adapter branches that share a pointwise down-projection
//! (with GELU) and a pointwise up-projection; each branch owns a 3×3
//! convolution over the patch-token grid. A gate pools the block input over
//! tokens and predicts one softmax weight per branch for each sample; the
//! block output is the weighted sum of the branch outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const DEFAULT_ADAPTERS: usize = 3;
pub const DEFAULT_HIDDEN: usize = 8;
pub const DEFAULT_GAMMA: f64 = 0.3;

const GATE_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Gate-predicted softmax weights.
    #[default]
    Dynamic,
    /// Fixed `1/P` for every branch.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoaConfig {
    pub adapters: usize,
    pub hidden: usize,
    pub weighting: Weighting,
}

impl Default for MoaConfig {
    fn default() -> Self {
        Self {
            adapters: DEFAULT_ADAPTERS,
            hidden: DEFAULT_HIDDEN,
            weighting: Weighting::Dynamic,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MoaModule {
    /// 1-based transformer layer.
    pub layer: usize,
    /// 1 = parallel to attention, 2 = parallel to the feed-forward block.
    pub position: usize,
    pub grid: usize,
    pub weighting: Weighting,
    pub down_w: ParamId,
    pub down_b: ParamId,
    /// `(weight [3, 3, β, β], bias [β])` per branch.
    pub convs: Vec<(ParamId, ParamId)>,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

/// Intermediate values of one block's forward pass.
#[derive(Debug, Clone)]
pub struct MoaTrace {
    pub layer: usize,
    pub position: usize,
    /// Block input `[B, M+1, D]`.
    pub input: Var,
    /// Branch outputs, each `[B, M+1, D]`.
    pub adapters: Vec<Var>,
    /// Mixture weights `[B, P]`.
    pub weights: Var,
    /// Aggregated output `[B, M+1, D]`.
    pub output: Var,
}

impl MoaModule {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        layer: usize,
        position: usize,
        dim: usize,
        grid: usize,
        config: &MoaConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let (p, beta) = (config.adapters, config.hidden);
        if p == 0 || beta == 0 || beta >= dim {
            return Err(Error::InvalidArgument(format!(
                "adapter block needs P ≥ 1 and 0 < hidden < {dim}, got P={p}, hidden={beta}"
            )));
        }
        let g = ParamGroup::Adapter;
        let pre = format!("moa.l{layer}.q{position}");
        let down_std = 1.0 / (dim as f64).sqrt();
        let conv_std = 1.0 / ((9 * beta) as f64).sqrt();
        let down_w = store.add(format!("{pre}.down.w"), g, Tensor::trunc_normal(vec![dim, beta], down_std, rng));
        let down_b = store.add(format!("{pre}.down.b"), g, Tensor::zeros(vec![beta]));
        let convs = (0..p)
            .map(|j| {
                let w = store.add(
                    format!("{pre}.conv{j}.w"),
                    g,
                    Tensor::trunc_normal(vec![3, 3, beta, beta], conv_std, rng),
                );
                let b = store.add(format!("{pre}.conv{j}.b"), g, Tensor::zeros(vec![beta]));
                (w, b)
            })
            .collect();
        let up_w = store.add(format!("{pre}.up.w"), g, Tensor::zeros(vec![beta, dim]));
        let up_b = store.add(format!("{pre}.up.b"), g, Tensor::zeros(vec![dim]));
        let gate_w = store.add(format!("{pre}.gate.w"), g, Tensor::trunc_normal(vec![dim, p], GATE_INIT_STD, rng));
        let gate_b = store.add(format!("{pre}.gate.b"), g, Tensor::zeros(vec![p]));
        Ok(Self {
            layer,
            position,
            grid,
            weighting: config.weighting,
            down_w,
            down_b,
            convs,
            up_w,
            up_b,
            gate_w,
            gate_b,
        })
    }

    pub fn adapter_count(&self) -> usize {
        self.convs.len()
    }

    /// Branch outputs `H_1..H_P`. Patch tokens go through
    /// down → GELU → 3×3 grid conv → up; the class token skips the conv.
    pub fn adapter_forward<T: Scalar>(&self, tape: &mut Tape<T>, a: Var) -> Result<Vec<Var>> {
        let s = tape.shape(a).to_vec();
        if s.len() != 3 || s[1] < 2 {
            return Err(Error::shape("adapter_forward", &s, &[self.grid * self.grid + 1]));
        }
        let m = s[1] - 1;
        if m != self.grid * self.grid {
            return Err(Error::InvalidArgument(format!(
                "adapter_forward: {m} patch tokens do not form a {g}×{g} grid",
                g = self.grid
            )));
        }
        let h = tape.conv1x1(a, tape.param(self.down_w), tape.param(self.down_b))?;
        let h = tape.gelu(h);
        let cls = tape.narrow(h, 1, 0, 1)?;
        let patches = tape.narrow(h, 1, 1, m)?;
        self.convs
            .iter()
            .map(|&(w, b)| {
                let c = tape.conv3x3_grid(patches, tape.param(w), tape.param(b), self.grid)?;
                let z = tape.concat(&[cls, c], 1)?;
                tape.conv1x1(z, tape.param(self.up_w), tape.param(self.up_b))
            })
            .collect()
    }

    /// Per-sample mixture weights `[B, P]`: token mean pool, pointwise
    /// projection to `P` logits, softmax.
    pub fn dynamic_weights<T: Scalar>(&self, tape: &mut Tape<T>, a: Var) -> Result<Var> {
        let s = tape.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("dynamic_weights", &s, &[]));
        }
        let p = self.adapter_count();
        match self.weighting {
            Weighting::Dynamic => {
                let pooled = tape.mean_over_axis(a, 1)?;
                let logits = tape.conv1x1(pooled, tape.param(self.gate_w), tape.param(self.gate_b))?;
                tape.softmax(logits)
            }
            Weighting::Uniform => tape.constant(vec![s[0], p], vec![T::one() / T::lit(p as f64); s[0] * p]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, a: Var) -> Result<MoaTrace> {
        let adapters = self.adapter_forward(tape, a)?;
        let weights = self.dynamic_weights(tape, a)?;
        let output = aggregate(tape, &adapters, weights)?;
        Ok(MoaTrace {
            layer: self.layer,
            position: self.position,
            input: a,
            adapters,
            weights,
            output,
        })
    }
}

/// `Σ_j w[:, j] · H_j` with one weight row per sample.
pub fn aggregate<T: Scalar>(tape: &mut Tape<T>, adapters: &[Var], weights: Var) -> Result<Var> {
    let ws = tape.shape(weights).to_vec();
    let first = match adapters.first() {
        Some(&h) => tape.shape(h).to_vec(),
        None => return Err(Error::InvalidArgument("aggregate of zero adapters".into())),
    };
    if ws.len() != 2 || ws[1] != adapters.len() || first.first() != Some(&ws[0]) {
        return Err(Error::shape("aggregate", &first, &ws));
    }
    let mut out: Option<Var> = None;
    for (j, &h) in adapters.iter().enumerate() {
        if tape.shape(h) != first.as_slice() {
            return Err(Error::shape("aggregate", &first, tape.shape(h)));
        }
        let wj = tape.narrow(weights, 1, j, 1)?;
        let wj = tape.reshape(wj, vec![ws[0]])?;
        let term = tape.scale_rows(h, wj)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(out.expect("at least one adapter"))
}

/// Loose pairwise cosine penalty: for each unordered pair of branches, the
/// token-averaged `max(cos − γ, 0)`, summed over pairs. Cosines run along
/// the last (feature) axis; every other axis counts as a token.
pub fn cosine_reg_loss<T: Scalar>(tape: &mut Tape<T>, adapters: &[Var], gamma: f64) -> Result<Var> {
    if adapters.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cosine regularization needs at least two adapters, got {}",
            adapters.len()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    let mut total: Option<Var> = None;
    for j in 0..adapters.len() {
        for k in j + 1..adapters.len() {
            let cos = tape.token_cosine(adapters[j], adapters[k])?;
            let shifted = tape.add_scalar(cos, T::lit(-gamma));
            let hinge = tape.max_with_scalar(shifted, T::zero());
            let term = tape.mean_all(hinge);
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    Ok(total.expect("at least one pair"))
}

impl MoaTrace {
    /// Penalty over this block's patch tokens. The class-token branch
    /// outputs are identical by construction and carry no diversity signal.
    /// `None` when the block has a single branch.
    pub fn cosine_loss<T: Scalar>(&self, tape: &mut Tape<T>, gamma: f64) -> Result<Option<Var>> {
        if self.adapters.len() < 2 {
            return Ok(None);
        }
        let tokens = tape.shape(self.adapters[0])[1];
        let patches = self
            .adapters
            .iter()
            .map(|&h| tape.narrow(h, 1, 1, tokens - 1))
            .collect::<Result<Vec<_>>>()?;
        cosine_reg_loss(tape, &patches, gamma).map(Some)
    }
}

/// Sum of the per-block penalties.
pub fn total_cosine_loss<T: Scalar>(tape: &mut Tape<T>, traces: &[MoaTrace], gamma: f64) -> Result<Var> {
    let mut total = tape.constant(vec![], vec![T::zero()])?;
    for t in traces {
        if let Some(l) = t.cosine_loss(tape, gamma)? {
            total = tape.add(total, l)?;
        }
    }
    Ok(total)
}

/// Two blocks per transformer layer, in `(layer, position)` order.
#[derive(Debug, Clone)]
pub struct MoaBank {
    pub config: MoaConfig,
    pub modules: Vec<MoaModule>,
}

impl MoaBank {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        backbone: &BackboneConfig,
        config: MoaConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut modules = Vec::with_capacity(2 * backbone.num_layers);
        for l in 1..=backbone.num_layers {
            for q in 1..=2 {
                modules.push(MoaModule::init(l, q, backbone.embed_dim, backbone.grid(), &config, store, rng)?);
            }
        }
        Ok(Self { config, modules })
    }
}
