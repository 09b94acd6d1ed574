//! Tiny vision transformer: patch embedding, a learnable class token,
//! pre-norm transformer layers and a final normalization.
//!
//! Each layer exposes its two layer-norm outputs as attachment points for
//! mixture-of-adapter blocks. Adapter outputs are added to the residual
//! stream next to the attention and feed-forward outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moa::{MoaBank, MoaTrace};
use crate::numerics::{ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    ClassToken,
    MeanPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub readout: Readout,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_hidden: 128,
            readout: Readout::ClassToken,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("backbone config: {m}")));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size must be a positive multiple of patch_size");
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return bad("embed_dim must be divisible by num_heads");
        }
        if self.channels == 0 || self.num_layers == 0 || self.ffn_hidden == 0 {
            return bad("channels, num_layers and ffn_hidden must be positive");
        }
        Ok(())
    }

    /// Side length of the patch grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.patch_tokens() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<LayerParams>,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
}

/// Everything a forward pass produces that later stages need.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// `[B, D]` pooled representation after the final normalization.
    pub feature: Var,
    /// Layer-norm outputs in attachment order `(l, q)`, each `[B, M+1, D]`.
    pub attach_inputs: Vec<Var>,
    /// One trace per attached adapter block, in attachment order.
    pub moa: Vec<MoaTrace>,
    /// Attention probabilities per layer, `[B·heads, M+1, M+1]`.
    pub attention: Vec<Var>,
}

impl Backbone {
    pub fn init<T: Scalar, R: Rng + ?Sized>(config: BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let g = ParamGroup::Backbone;
        // Embeddings use `INIT_STD`; weight matrices use `1/sqrt(fan_in)`.
        let mut normal = |store: &mut ParamStore<T>, name: String, shape: Vec<usize>| {
            let std = if shape.len() == 2 && !name.ends_with("pos") { 1.0 / (shape[0] as f64).sqrt() } else { INIT_STD };
            store.add(name, g, Tensor::trunc_normal(shape, std, rng))
        };
        let patch_w = normal(store, "backbone.patch.w".into(), vec![config.patch_dim(), d]);
        let cls = normal(store, "backbone.cls".into(), vec![d]);
        let pos = normal(store, "backbone.pos".into(), vec![config.tokens(), d]);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let qkv_w = normal(store, format!("backbone.l{l}.qkv.w"), vec![d, 3 * d]);
            let proj_w = normal(store, format!("backbone.l{l}.proj.w"), vec![d, d]);
            let fc1_w = normal(store, format!("backbone.l{l}.fc1.w"), vec![d, config.ffn_hidden]);
            let fc2_w = normal(store, format!("backbone.l{l}.fc2.w"), vec![config.ffn_hidden, d]);
            layers.push(LayerParams {
                ln1_gamma: store.add(format!("backbone.l{l}.ln1.gamma"), g, Tensor::full(vec![d], T::one())),
                ln1_beta: store.add(format!("backbone.l{l}.ln1.beta"), g, Tensor::zeros(vec![d])),
                qkv_w,
                qkv_b: store.add(format!("backbone.l{l}.qkv.b"), g, Tensor::zeros(vec![3 * d])),
                proj_w,
                proj_b: store.add(format!("backbone.l{l}.proj.b"), g, Tensor::zeros(vec![d])),
                ln2_gamma: store.add(format!("backbone.l{l}.ln2.gamma"), g, Tensor::full(vec![d], T::one())),
                ln2_beta: store.add(format!("backbone.l{l}.ln2.beta"), g, Tensor::zeros(vec![d])),
                fc1_w,
                fc1_b: store.add(format!("backbone.l{l}.fc1.b"), g, Tensor::zeros(vec![config.ffn_hidden])),
                fc2_w,
                fc2_b: store.add(format!("backbone.l{l}.fc2.b"), g, Tensor::zeros(vec![d])),
            });
        }
        Ok(Self {
            patch_w,
            patch_b: store.add("backbone.patch.b", g, Tensor::zeros(vec![d])),
            cls,
            pos,
            layers,
            norm_gamma: store.add("backbone.norm.gamma", g, Tensor::full(vec![d], T::one())),
            norm_beta: store.add("backbone.norm.beta", g, Tensor::zeros(vec![d])),
            config,
        })
    }

    /// Cut `images` (flat, `B × H × W × C`) into row-major patches `[B, M, p²C]`.
    pub fn patchify<T: Scalar>(&self, images: &[T]) -> Result<(usize, Vec<T>)> {
        let c = &self.config;
        let len = c.image_len();
        if images.is_empty() || images.len() % len != 0 {
            return Err(Error::shape("patchify", &[images.len()], &[c.image_size, c.image_size, c.channels]));
        }
        let batch = images.len() / len;
        let (p, g, ch, w) = (c.patch_size, c.grid(), c.channels, c.image_size);
        let mut out = Vec::with_capacity(images.len());
        for b in 0..batch {
            let img = &images[b * len..(b + 1) * len];
            for pr in 0..g {
                for pc in 0..g {
                    for dy in 0..p {
                        let row = (pr * p + dy) * w + pc * p;
                        out.extend_from_slice(&img[row * ch..(row + p) * ch]);
                    }
                }
            }
        }
        Ok((batch, out))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, images: &[T], moa: Option<&MoaBank>) -> Result<BackboneOutput> {
        let c = &self.config;
        if let Some(bank) = moa {
            if bank.modules.len() != 2 * c.num_layers {
                return Err(Error::InvalidArgument(format!(
                    "adapter bank has {} modules, backbone with {} layers needs {}",
                    bank.modules.len(),
                    c.num_layers,
                    2 * c.num_layers
                )));
            }
        }
        let (batch, patches) = self.patchify(images)?;
        let (m, n, d) = (c.patch_tokens(), c.tokens(), c.embed_dim);
        let patches = tape.constant(vec![batch, m, c.patch_dim()], patches)?;
        let tokens = tape.conv1x1(patches, tape.param(self.patch_w), tape.param(self.patch_b))?;
        let cls = tape.expand(tape.param(self.cls), batch)?;
        let cls = tape.reshape(cls, vec![batch, 1, d])?;
        let x = tape.concat(&[cls, tokens], 1)?;
        let mut x = tape.add(x, tape.param(self.pos))?;

        let mut attach_inputs = Vec::with_capacity(2 * c.num_layers);
        let mut traces = Vec::new();
        let mut attention = Vec::with_capacity(c.num_layers);
        for (l, lp) in self.layers.iter().enumerate() {
            let a1 = tape.layer_norm(x, tape.param(lp.ln1_gamma), tape.param(lp.ln1_beta))?;
            let (attn, probs) = self.attention(tape, lp, a1, batch)?;
            attention.push(probs);
            x = tape.add(x, attn)?;
            attach_inputs.push(a1);
            if let Some(bank) = moa {
                let t = bank.modules[2 * l].forward(tape, a1)?;
                x = tape.add(x, t.output)?;
                traces.push(t);
            }

            let a2 = tape.layer_norm(x, tape.param(lp.ln2_gamma), tape.param(lp.ln2_beta))?;
            let h = tape.conv1x1(a2, tape.param(lp.fc1_w), tape.param(lp.fc1_b))?;
            let h = tape.gelu(h);
            let h = tape.conv1x1(h, tape.param(lp.fc2_w), tape.param(lp.fc2_b))?;
            x = tape.add(x, h)?;
            attach_inputs.push(a2);
            if let Some(bank) = moa {
                let t = bank.modules[2 * l + 1].forward(tape, a2)?;
                x = tape.add(x, t.output)?;
                traces.push(t);
            }
        }
        let xn = tape.layer_norm(x, tape.param(self.norm_gamma), tape.param(self.norm_beta))?;
        let feature = match c.readout {
            Readout::ClassToken => {
                let t = tape.narrow(xn, 1, 0, 1)?;
                tape.reshape(t, vec![batch, d])?
            }
            Readout::MeanPatch => {
                let t = tape.narrow(xn, 1, 1, n - 1)?;
                tape.mean_over_axis(t, 1)?
            }
        };
        Ok(BackboneOutput {
            feature,
            attach_inputs,
            moa: traces,
            attention,
        })
    }

    fn attention<T: Scalar>(&self, tape: &mut Tape<T>, lp: &LayerParams, a: Var, batch: usize) -> Result<(Var, Var)> {
        let c = &self.config;
        let (n, d, h) = (c.tokens(), c.embed_dim, c.num_heads);
        let dh = d / h;
        let qkv = tape.conv1x1(a, tape.param(lp.qkv_w), tape.param(lp.qkv_b))?;
        let heads = |tape: &mut Tape<T>, part: usize| -> Result<Var> {
            let s = tape.narrow(qkv, 2, part * d, d)?;
            let s = tape.reshape(s, vec![batch, n, h, dh])?;
            let s = tape.permute(s, &[0, 2, 1, 3])?;
            tape.reshape(s, vec![batch * h, n, dh])
        };
        let q = heads(tape, 0)?;
        let k = heads(tape, 1)?;
        let v = heads(tape, 2)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, T::one() / T::lit(dh as f64).sqrt());
        let probs = tape.softmax(scores)?;
        let o = tape.bmm(probs, v, false)?;
        let o = tape.reshape(o, vec![batch, h, n, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, vec![batch, n, d])?;
        let out = tape.conv1x1(o, tape.param(lp.proj_w), tape.param(lp.proj_b))?;
        Ok((out, probs))
    }
}

/// Leave only adapter and head parameters trainable.
pub fn freeze_backbone<T: Scalar>(store: &mut ParamStore<T>) {
    store.set_group_trainable(ParamGroup::Backbone, false);
    store.set_group_trainable(ParamGroup::Adapter, true);
    store.set_group_trainable(ParamGroup::Head, true);
}
