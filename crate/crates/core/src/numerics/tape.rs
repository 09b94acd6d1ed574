//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends one node holding its output value and a record
//! of its inputs. Nodes are appended in evaluation order, so the tape is
//! already topologically sorted and backward is a single reverse sweep.

use super::tensor::{numel, ParamId, ParamStore, Tensor};
use super::Scalar;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

impl From<ParamId> for Var {
    fn from(id: ParamId) -> Self {
        Var(id.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: T },
    AddScalar { a: usize },
    MaxScalar { a: usize, c: T },
    Gelu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T> },
    MeanAxis { a: usize, pre: usize, len: usize, post: usize },
    SumAll { a: usize },
    L2Norm { a: usize },
    Reshape { a: usize },
    Permute { a: usize, src: Vec<usize> },
    Narrow { a: usize, pre: usize, full: usize, start: usize, len: usize, post: usize },
    Concat { inputs: Vec<usize>, pre: usize, lens: Vec<usize>, post: usize },
    Expand { a: usize },
    Conv3x3 { x: usize, w: usize, b: usize, grid: usize },
    ScaleRows { x: usize, s: usize },
    TokenCosine { a: usize, b: usize },
    PairwiseDistance { x: usize, kind: DistanceKind },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | Bmm { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => {
                vec![*a, *b]
            }
            Scale { a, .. }
            | AddScalar { a }
            | MaxScalar { a, .. }
            | Gelu { a }
            | Exp { a }
            | Log { a }
            | Softmax { a }
            | MeanAxis { a, .. }
            | SumAll { a }
            | L2Norm { a }
            | Reshape { a }
            | Permute { a, .. }
            | Narrow { a, .. }
            | Expand { a } => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { inputs, .. } => inputs.clone(),
            Conv3x3 { x, w, b, .. } => vec![*x, *w, *b],
            ScaleRows { x, s } => vec![*x, *s],
            TokenCosine { a, b } => vec![*a, *b],
            PairwiseDistance { x, .. } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// How a binary operand lines up against the output shape.
fn broadcast_ok(big: &[usize], small: &[usize]) -> bool {
    big == small || numel(small) == 1 || (small.len() <= big.len() && big.ends_with(small))
}

/// Recording tape. Construct with [`Tape::with_params`] to mirror a
/// parameter store, or [`Tape::new`] for free-standing computations.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_count: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar with respect to every tape node that requires one.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_count: 0,
        }
    }

    /// Bind every parameter as a leaf; `ParamId(i)` becomes `Var(i)`.
    pub fn with_params(params: &ParamStore<T>) -> Self {
        let mut tape = Self::new();
        for (_, p) in params.iter() {
            tape.nodes.push(Node {
                value: p.tensor.data().to_vec(),
                shape: p.tensor.shape().to_vec(),
                op: Op::Leaf,
                requires_grad: p.tensor.requires_grad(),
            });
        }
        tape.param_count = params.len();
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.param_count, "parameter {} not bound to this tape", id.0);
        Var(id.0)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are consistent")
    }

    /// Leaf that follows the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_grad(true);
        Ok(self.leaf(&t))
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[.., k] · b[k, n] -> [.., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.node(a).value, (k, 1), &self.node(b).value, (n, 1), T::zero(), &mut out);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(out, shape, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// Batched `a[bt, m, k] · b[bt, k, n]`, or `· b[bt, n, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let bs = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![T::zero(); bt * m * n];
        {
            let (av, bv) = (&self.node(a).value, &self.node(b).value);
            for i in 0..bt {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    (k, 1),
                    &bv[i * k * n..(i + 1) * k * n],
                    bs,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push(out, vec![bt, m, n], Op::Bmm { a: a.0, b: b.0, trans_b }))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<T>, Vec<usize>)> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if !broadcast_ok(sa, sb) {
            return Err(Error::shape(op, sa, sb));
        }
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let bl = bv.len();
        let out = av.iter().enumerate().map(|(i, &x)| f(x, bv[i % bl])).collect();
        Ok((out, sa.clone()))
    }

    /// Elementwise sum; the smaller operand may be a scalar or a trailing suffix shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if numel(&self.node(a).shape) < numel(&self.node(b).shape) { (b, a) } else { (a, b) };
        let (v, s) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, s, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, s, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if numel(&self.node(a).shape) < numel(&self.node(b).shape) { (b, a) } else { (a, b) };
        let (v, s) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, s, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.node(a).value.iter().map(|&x| x * c).collect();
        let s = self.node(a).shape.clone();
        self.push(v, s, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.node(a).value.iter().map(|&x| x + c).collect();
        let s = self.node(a).shape.clone();
        self.push(v, s, Op::AddScalar { a: a.0 })
    }

    /// `max(a, c)` elementwise; the gradient passes only where `a > c`.
    pub fn max_with_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.node(a).value.iter().map(|&x| if x > c { x } else { c }).collect();
        let s = self.node(a).shape.clone();
        self.push(v, s, Op::MaxScalar { a: a.0, c })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.node(a).value.iter().map(|&x| gelu(x)).collect();
        let s = self.node(a).shape.clone();
        self.push(v, s, Op::Gelu { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.node(a).value.iter().map(|&x| x.exp()).collect();
        let s = self.node(a).shape.clone();
        self.push(v, s, Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.node(a).value.iter().map(|&x| x.ln()).collect();
        let s = self.node(a).shape.clone();
        self.push(v, s, Op::Log { a: a.0 })
    }

    // ---- row-wise -------------------------------------------------------

    fn last_dim(&self, op: &'static str, a: Var) -> Result<usize> {
        let s = &self.node(a).shape;
        match s.last() {
            Some(&d) => Ok(d),
            None => Err(Error::shape(op, s, &[])),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("softmax", a)?;
        let mut out = self.node(a).value.clone();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let s = self.node(a).shape.clone();
        Ok(self.push(out, s, Op::Softmax { a: a.0 }))
    }

    /// Normalize the last axis to zero mean and unit variance, then apply
    /// the affine `gamma`/`beta` (both shaped `[D]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.last_dim("layer_norm", x)?;
        for p in [gamma, beta] {
            if self.node(p).shape != [d] {
                return Err(Error::shape("layer_norm", &self.node(x).shape, &self.node(p).shape));
            }
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::lit(d as f64);
        let xv = &self.node(x).value;
        let (g, b) = (&self.node(gamma).value, &self.node(beta).value);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for i in 0..d {
                let h = (row[i] - mean) * inv;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let s = self.node(x).shape.clone();
        Ok(self.push(out, s, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std }))
    }

    /// Mean over one axis, which is removed from the output shape.
    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.node(a).shape.clone();
        if axis >= s.len() {
            return Err(Error::shape("mean_over_axis", &s, &[axis]));
        }
        let pre = numel(&s[..axis]);
        let len = s[axis];
        let post = numel(&s[axis + 1..]);
        let av = &self.node(a).value;
        let inv = T::one() / T::lit(len as f64);
        let mut out = vec![T::zero(); pre * post];
        for p in 0..pre {
            for i in 0..len {
                let src = &av[(p * len + i) * post..(p * len + i + 1) * post];
                for (o, &v) in out[p * post..(p + 1) * post].iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = s.clone();
        shape.remove(axis);
        Ok(self.push(out, shape, Op::MeanAxis { a: a.0, pre, len, post }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = self.node(a).value.iter().copied().sum();
        self.push(vec![v], vec![], Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.node(a).value.len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("l2_norm", a)?;
        let out = self
            .node(a)
            .value
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let s = self.node(a).shape[..self.node(a).shape.len() - 1].to_vec();
        Ok(self.push(out, s, Op::L2Norm { a: a.0 }))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.node(a).value.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.node(a).shape, &shape));
        }
        let v = self.node(a).value.clone();
        Ok(self.push(v, shape, Op::Reshape { a: a.0 }))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.node(a).shape.clone();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &s, perm));
        }
        let rank = s.len();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * s[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = numel(&s);
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            src.push(idx.iter().zip(&strides).map(|(i, st)| i * st).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let av = &self.node(a).value;
        let v = src.iter().map(|&i| av[i]).collect();
        Ok(self.push(v, out_shape, Op::Permute { a: a.0, src }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.node(a).shape.clone();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("narrow", &s, &[axis, start, len]));
        }
        let pre = numel(&s[..axis]);
        let full = s[axis];
        let post = numel(&s[axis + 1..]);
        let av = &self.node(a).value;
        let mut v = Vec::with_capacity(pre * len * post);
        for p in 0..pre {
            let base = (p * full + start) * post;
            v.extend_from_slice(&av[base..base + len * post]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(v, shape, Op::Narrow { a: a.0, pre, full, start, len, post }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.node(*v).shape.clone(),
            None => return Err(Error::InvalidArgument("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = &self.node(*v).shape;
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let pre = numel(&first[..axis]);
        let post = numel(&first[axis + 1..]);
        let total: usize = lens.iter().sum();
        let mut v = Vec::with_capacity(pre * total * post);
        for p in 0..pre {
            for (inp, &l) in inputs.iter().zip(&lens) {
                let src = &self.node(*inp).value;
                v.extend_from_slice(&src[p * l * post..(p + 1) * l * post]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(v, shape, Op::Concat { inputs: ids, pre, lens, post }))
    }

    /// Repeat `a` along a new leading axis of size `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::shape("expand", &self.node(a).shape, &[n]));
        }
        let av = &self.node(a).value;
        let mut v = Vec::with_capacity(av.len() * n);
        for _ in 0..n {
            v.extend_from_slice(av);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.node(a).shape);
        Ok(self.push(v, shape, Op::Expand { a: a.0 }))
    }

    // ---- model-specific primitives --------------------------------------

    /// Pointwise convolution over token features: `x[.., cin] · w[cin, cout] + b[cout]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Zero-padded 3×3 convolution over tokens laid out as a `grid × grid`
    /// image: `x[B, grid², cin]`, `w[3, 3, cin, cout]`, `b[cout]`.
    pub fn conv3x3_grid(&mut self, x: Var, w: Var, b: Var, grid: usize) -> Result<Var> {
        let sx = self.node(x).shape.clone();
        let sw = self.node(w).shape.clone();
        if sx.len() != 3 || sx[1] != grid * grid || sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[2] {
            return Err(Error::shape("conv3x3_grid", &sx, &sw));
        }
        let (bt, cin, cout) = (sx[0], sx[2], sw[3]);
        if self.node(b).shape != [cout] {
            return Err(Error::shape("conv3x3_grid", &sw, &self.node(b).shape));
        }
        let (xv, wv, bv) = (&self.node(x).value, &self.node(w).value, &self.node(b).value);
        let tokens = grid * grid;
        let mut out = vec![T::zero(); bt * tokens * cout];
        for n in 0..bt {
            for r in 0..grid {
                for c in 0..grid {
                    let o = &mut out[((n * tokens) + r * grid + c) * cout..][..cout];
                    o.copy_from_slice(bv);
                    for kr in 0..3 {
                        let rr = r as isize + kr as isize - 1;
                        if rr < 0 || rr >= grid as isize {
                            continue;
                        }
                        for kc in 0..3 {
                            let cc = c as isize + kc as isize - 1;
                            if cc < 0 || cc >= grid as isize {
                                continue;
                            }
                            let xi = &xv[(n * tokens + rr as usize * grid + cc as usize) * cin..][..cin];
                            let wk = &wv[(kr * 3 + kc) * cin * cout..][..cin * cout];
                            for (ci, &xval) in xi.iter().enumerate() {
                                for (ov, &wval) in o.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                                    *ov = *ov + xval * wval;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, vec![bt, tokens, cout], Op::Conv3x3 { x: x.0, w: w.0, b: b.0, grid }))
    }

    /// `out[i, ..] = x[i, ..] * s[i]` for `s` shaped `[x.shape[0]]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.node(x).shape.clone(), self.node(s).shape.clone());
        if sx.is_empty() || ss != [sx[0]] {
            return Err(Error::shape("scale_rows", &sx, &ss));
        }
        let row = numel(&sx[1..]);
        let (xv, sv) = (&self.node(x).value, &self.node(s).value);
        let v = xv.iter().enumerate().map(|(i, &a)| a * sv[i / row]).collect();
        Ok(self.push(v, sx, Op::ScaleRows { x: x.0, s: s.0 }))
    }

    /// Cosine similarity over the last axis. A zero-norm vector yields 0
    /// and contributes no gradient.
    pub fn token_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa != sb || sa.is_empty() {
            return Err(Error::shape("token_cosine", &sa, &sb));
        }
        let d = sa[sa.len() - 1];
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let v = av.chunks(d).zip(bv.chunks(d)).map(|(x, y)| cosine(x, y).0).collect();
        Ok(self.push(v, sa[..sa.len() - 1].to_vec(), Op::TokenCosine { a: a.0, b: b.0 }))
    }

    /// All-pairs distance matrix `[T, T]` between the rows of `x[T, D]`.
    pub fn pairwise_distance(&mut self, x: Var, kind: DistanceKind) -> Result<Var> {
        let s = self.node(x).shape.clone();
        if s.len() != 2 {
            return Err(Error::shape("pairwise_distance", &s, &[]));
        }
        let (t, d) = (s[0], s[1]);
        let xv = &self.node(x).value;
        let mut out = vec![T::zero(); t * t];
        for i in 0..t {
            for j in 0..t {
                if i == j {
                    continue;
                }
                let (a, b) = (&xv[i * d..(i + 1) * d], &xv[j * d..(j + 1) * d]);
                out[i * t + j] = match kind {
                    DistanceKind::Euclidean => a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>().sqrt(),
                    DistanceKind::Cosine => T::one() - cosine(a, b).0,
                };
            }
        }
        Ok(self.push(out, vec![t, t], Op::PairwiseDistance { x: x.0, kind }))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    ///
    /// With `exclude`, column `exclude[r]` is left out of row `r`'s
    /// normalizer entirely (used to drop self-similarity).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], exclude: Option<&[usize]>) -> Result<Var> {
        let s = self.node(logits).shape.clone();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::shape("cross_entropy", &s, &[targets.len()]));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(ex) = exclude {
            if ex.len() != r {
                return Err(Error::shape("cross_entropy", &s, &[ex.len()]));
            }
        }
        let lv = &self.node(logits).value;
        let mut probs = vec![T::zero(); r * c];
        let mut loss = T::zero();
        for i in 0..r {
            let t = targets[i];
            let skip = exclude.map(|e| e[i]);
            if t >= c || skip == Some(t) {
                return Err(Error::InvalidArgument(format!("cross_entropy: bad target {t} for row {i}")));
            }
            let row = &lv[i * c..(i + 1) * c];
            let mx = row
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != skip)
                .map(|(_, &v)| v)
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..c {
                if Some(j) != skip {
                    let e = (row[j] - mx).exp();
                    probs[i * c + j] = e;
                    z = z + e;
                }
            }
            for j in 0..c {
                probs[i * c + j] = probs[i * c + j] / z;
            }
            loss = loss + (z.ln() + mx - row[t]);
        }
        loss = loss / T::lit(r as f64);
        Ok(self.push(vec![loss], vec![], Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs }))
    }

    // ---- backward -------------------------------------------------------

    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulate `∂loss/∂param` into every trainable parameter of `params`
    /// and consume the tape.
    pub fn backward(self, loss: Var, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() < self.param_count {
            return Err(Error::InvalidArgument("parameter store smaller than tape binding".into()));
        }
        let grads = self.gradients(loss)?;
        for i in 0..self.param_count {
            if let Some(g) = grads.get(Var(i)) {
                let t = params.get_mut(ParamId(i));
                if t.len() != g.len() {
                    return Err(Error::shape("backward", t.shape(), &self.nodes[i].shape));
                }
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |i: usize| nodes[i].requires_grad;
        macro_rules! acc {
            ($i:expr) => {{
                let i = $i;
                grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.len()])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                let (k, n) = (sb[0], sb[1]);
                let m = numel(sa) / k;
                if needs(*a) {
                    let bv = &nodes[*b].value;
                    T::gemm(m, n, k, g, (n, 1), bv, (1, n), T::one(), acc!(*a));
                }
                if needs(*b) {
                    let av = &nodes[*a].value;
                    T::gemm(k, m, n, av, (1, k), g, (n, 1), T::one(), acc!(*b));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = &nodes[*a].shape;
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                if needs(*a) {
                    let bv = nodes[*b].value.clone();
                    let da = acc!(*a);
                    let bts = if *trans_b { (k, 1) } else { (1, n) };
                    for i in 0..bt {
                        T::gemm(m, n, k, &g[i * m * n..(i + 1) * m * n], (n, 1), &bv[i * k * n..(i + 1) * k * n], bts, T::one(), &mut da[i * m * k..(i + 1) * m * k]);
                    }
                }
                if needs(*b) {
                    let av = nodes[*a].value.clone();
                    let db = acc!(*b);
                    for i in 0..bt {
                        let (gi, ai) = (&g[i * m * n..(i + 1) * m * n], &av[i * m * k..(i + 1) * m * k]);
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            T::gemm(n, m, k, gi, (1, n), ai, (k, 1), T::one(), dbi);
                        } else {
                            T::gemm(k, m, n, ai, (1, k), gi, (n, 1), T::one(), dbi);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
                if needs(*b) {
                    let db = acc!(*b);
                    let bl = db.len();
                    for (i, &v) in g.iter().enumerate() {
                        db[i % bl] = db[i % bl] + sign * v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let bl = bv.len();
                if needs(*a) {
                    let da = acc!(*a);
                    for (i, &v) in g.iter().enumerate() {
                        da[i] = da[i] + v * bv[i % bl];
                    }
                }
                if needs(*b) {
                    let db = acc!(*b);
                    for (i, &v) in g.iter().enumerate() {
                        db[i % bl] = db[i % bl] + v * av[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                acc!(*a).iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * c);
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
            }
            Op::MaxScalar { a, c } => {
                let av = &nodes[*a].value;
                let c = *c;
                let da = acc!(*a);
                for i in 0..g.len() {
                    if av[i] > c {
                        da[i] = da[i] + g[i];
                    }
                }
            }
            Op::Gelu { a } => {
                let av = &nodes[*a].value;
                let da = acc!(*a);
                for i in 0..g.len() {
                    da[i] = da[i] + g[i] * gelu_grad(av[i]);
                }
            }
            Op::Exp { a } => {
                let y = &node.value;
                let da = acc!(*a);
                for i in 0..g.len() {
                    da[i] = da[i] + g[i] * y[i];
                }
            }
            Op::Log { a } => {
                let av = &nodes[*a].value;
                let da = acc!(*a);
                for i in 0..g.len() {
                    da[i] = da[i] + g[i] / av[i];
                }
            }
            Op::Softmax { a } => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                let da = acc!(*a);
                for r in 0..y.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for i in 0..d {
                        da[r * d + i] = da[r * d + i] + yr[i] * (gr[i] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *node.shape.last().unwrap();
                let rows = xhat.len() / d;
                if needs(*gamma) {
                    let dg = acc!(*gamma);
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] = dg[i] + g[r * d + i] * xhat[r * d + i];
                        }
                    }
                }
                if needs(*beta) {
                    let dbeta = acc!(*beta);
                    for r in 0..rows {
                        for i in 0..d {
                            dbeta[i] = dbeta[i] + g[r * d + i];
                        }
                    }
                }
                if needs(*x) {
                    let gm = nodes[*gamma].value.clone();
                    let dn = T::lit(d as f64);
                    let dx = acc!(*x);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..d {
                            dxhat[i] = g[r * d + i] * gm[i];
                            s1 = s1 + dxhat[i];
                            s2 = s2 + dxhat[i] * h[i];
                        }
                        let k = inv_std[r] / dn;
                        for i in 0..d {
                            dx[r * d + i] = dx[r * d + i] + k * (dn * dxhat[i] - s1 - h[i] * s2);
                        }
                    }
                }
            }
            Op::MeanAxis { a, pre, len, post } => {
                let inv = T::one() / T::lit(*len as f64);
                let da = acc!(*a);
                for p in 0..*pre {
                    for i in 0..*len {
                        let dst = &mut da[(p * len + i) * post..(p * len + i + 1) * post];
                        for (d, &v) in dst.iter_mut().zip(&g[p * post..(p + 1) * post]) {
                            *d = *d + v * inv;
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                let g0 = g[0];
                acc!(*a).iter_mut().for_each(|d| *d = *d + g0);
            }
            Op::L2Norm { a } => {
                let av = &nodes[*a].value;
                let d = *nodes[*a].shape.last().unwrap();
                let y = &node.value;
                let da = acc!(*a);
                for r in 0..y.len() {
                    if y[r] > T::zero() {
                        for i in r * d..(r + 1) * d {
                            da[i] = da[i] + g[r] * av[i] / y[r];
                        }
                    }
                }
            }
            Op::Permute { a, src } => {
                let da = acc!(*a);
                for (o, &s) in src.iter().enumerate() {
                    da[s] = da[s] + g[o];
                }
            }
            Op::Narrow { a, pre, full, start, len, post } => {
                let da = acc!(*a);
                for p in 0..*pre {
                    let base = (p * full + start) * post;
                    let src = &g[p * len * post..(p + 1) * len * post];
                    for (d, &v) in da[base..base + len * post].iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
            }
            Op::Concat { inputs, pre, lens, post } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&inp, &l) in inputs.iter().zip(lens) {
                    if needs(inp) {
                        let di = acc!(inp);
                        for p in 0..*pre {
                            let src = &g[(p * total + offset) * post..(p * total + offset + l) * post];
                            for (d, &v) in di[p * l * post..(p + 1) * l * post].iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    }
                    offset += l;
                }
            }
            Op::Expand { a } => {
                let da = acc!(*a);
                let n = da.len();
                for (i, &v) in g.iter().enumerate() {
                    da[i % n] = da[i % n] + v;
                }
            }
            Op::Conv3x3 { x, w, b, grid } => {
                let grid = *grid;
                let sx = &nodes[*x].shape;
                let (bt, cin) = (sx[0], sx[2]);
                let cout = nodes[*w].shape[3];
                let tokens = grid * grid;
                if needs(*b) {
                    let db = acc!(*b);
                    for (i, &v) in g.iter().enumerate() {
                        db[i % cout] = db[i % cout] + v;
                    }
                }
                let xv = &nodes[*x].value;
                let wv = &nodes[*w].value;
                let (nx, nw) = (needs(*x), needs(*w));
                let mut dx = if nx { Some(vec![T::zero(); xv.len()]) } else { None };
                let mut dw = if nw { Some(vec![T::zero(); wv.len()]) } else { None };
                for n in 0..bt {
                    for r in 0..grid {
                        for c in 0..grid {
                            let go = &g[((n * tokens) + r * grid + c) * cout..][..cout];
                            for kr in 0..3 {
                                let rr = r as isize + kr as isize - 1;
                                if rr < 0 || rr >= grid as isize {
                                    continue;
                                }
                                for kc in 0..3 {
                                    let cc = c as isize + kc as isize - 1;
                                    if cc < 0 || cc >= grid as isize {
                                        continue;
                                    }
                                    let xoff = (n * tokens + rr as usize * grid + cc as usize) * cin;
                                    let woff = (kr * 3 + kc) * cin * cout;
                                    for ci in 0..cin {
                                        let wrow = &wv[woff + ci * cout..woff + (ci + 1) * cout];
                                        if let Some(dx) = dx.as_mut() {
                                            let s: T = wrow.iter().zip(go).map(|(&p, &q)| p * q).sum();
                                            dx[xoff + ci] = dx[xoff + ci] + s;
                                        }
                                        if let Some(dw) = dw.as_mut() {
                                            let xval = xv[xoff + ci];
                                            for (d, &q) in dw[woff + ci * cout..woff + (ci + 1) * cout].iter_mut().zip(go) {
                                                *d = *d + xval * q;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc!(*x).iter_mut().zip(&dx).for_each(|(d, &v)| *d = *d + v);
                }
                if let Some(dw) = dw {
                    acc!(*w).iter_mut().zip(&dw).for_each(|(d, &v)| *d = *d + v);
                }
            }
            Op::ScaleRows { x, s } => {
                let (xv, sv) = (&nodes[*x].value, &nodes[*s].value);
                let row = xv.len() / sv.len();
                if needs(*x) {
                    let dx = acc!(*x);
                    for i in 0..g.len() {
                        dx[i] = dx[i] + g[i] * sv[i / row];
                    }
                }
                if needs(*s) {
                    let ds = acc!(*s);
                    for i in 0..g.len() {
                        ds[i / row] = ds[i / row] + g[i] * xv[i];
                    }
                }
            }
            Op::TokenCosine { a, b } => {
                let d = *nodes[*a].shape.last().unwrap();
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for r in 0..g.len() {
                    let (x, y) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                    cosine_backward(x, y, g[r], &mut da[r * d..(r + 1) * d], &mut db[r * d..(r + 1) * d]);
                }
                if needs(*a) {
                    acc!(*a).iter_mut().zip(&da).for_each(|(d, &v)| *d = *d + v);
                }
                if needs(*b) {
                    acc!(*b).iter_mut().zip(&db).for_each(|(d, &v)| *d = *d + v);
                }
            }
            Op::PairwiseDistance { x, kind } => {
                let s = &nodes[*x].shape;
                let (t, d) = (s[0], s[1]);
                let xv = &nodes[*x].value;
                let y = &node.value;
                let dx = acc!(*x);
                let mut gi = vec![T::zero(); d];
                let mut gj = vec![T::zero(); d];
                for i in 0..t {
                    for j in 0..t {
                        let gv = g[i * t + j];
                        if i == j || gv == T::zero() {
                            continue;
                        }
                        let (a, b) = (&xv[i * d..(i + 1) * d], &xv[j * d..(j + 1) * d]);
                        match kind {
                            DistanceKind::Euclidean => {
                                let dist = y[i * t + j];
                                if dist > T::zero() {
                                    for k in 0..d {
                                        let v = gv * (a[k] - b[k]) / dist;
                                        dx[i * d + k] = dx[i * d + k] + v;
                                        dx[j * d + k] = dx[j * d + k] - v;
                                    }
                                }
                            }
                            DistanceKind::Cosine => {
                                gi.iter_mut().for_each(|v| *v = T::zero());
                                gj.iter_mut().for_each(|v| *v = T::zero());
                                cosine_backward(a, b, -gv, &mut gi, &mut gj);
                                for k in 0..d {
                                    dx[i * d + k] = dx[i * d + k] + gi[k];
                                    dx[j * d + k] = dx[j * d + k] + gj[k];
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = nodes[*logits].shape[1];
                let r = targets.len();
                let scale = g[0] / T::lit(r as f64);
                let dl = acc!(*logits);
                for i in 0..r {
                    for j in 0..c {
                        let mut v = probs[i * c + j];
                        if j == targets[i] {
                            v = v - T::one();
                        }
                        dl[i * c + j] = dl[i * c + j] + scale * v;
                    }
                }
            }
        }
    }
}

/// Returns `(cos, |a|, |b|)`; cos is 0 when either norm vanishes.
fn cosine<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return (T::zero(), na, nb);
    }
    let dot: T = a.iter().zip(b).map(|(&p, &q)| p * q).sum();
    (dot / (na * nb), na, nb)
}

fn cosine_backward<T: Scalar>(a: &[T], b: &[T], g: T, da: &mut [T], db: &mut [T]) {
    let (c, na, nb) = cosine(a, b);
    if na == T::zero() || nb == T::zero() {
        return;
    }
    let inv = T::one() / (na * nb);
    for k in 0..a.len() {
        da[k] = da[k] + g * (b[k] * inv - c * a[k] / (na * na));
        db[k] = db[k] + g * (a[k] * inv - c * b[k] / (nb * nb));
    }
}
