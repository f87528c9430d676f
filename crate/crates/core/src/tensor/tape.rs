use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{check_finite, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    /// Position in recording order.
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Binary(BinaryKind, usize, usize),
    ScalarRhs(BinaryKind, usize, S),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    PoolAvg(usize),
    PoolMax(usize, Vec<usize>),
    Resample(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Sigmoid(usize),
    Gelu(usize),
    Log(usize),
    Exp(usize),
    Clamp(usize, S, S),
    ScaleChannels(usize, usize),
    ScaleSpatial(usize, usize),
    Conv1x1 {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    SpaceToDepth(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax(usize),
    Cosine(usize, usize),
    CrossEntropy {
        logits: usize,
        probs: Vec<S>,
        labels: Vec<u8>,
        scored: usize,
    },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

const LAYER_NORM_EPS: f64 = 1e-5;
const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Single-threaded record of operations in execution order.
///
/// Each node's inputs precede it, so [`Tape::backward`] visits nodes in exact
/// reverse recording order. Gradients from fan-out are summed.
#[derive(Debug)]
pub struct Tape<S: Scalar> {
    id: u64,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every grad-requiring leaf.
#[derive(Debug)]
pub struct Gradients<S> {
    tape: u64,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Gradient of the leaf recorded at `idx`, if any.
    pub fn at(&self, idx: usize) -> Option<&[S]> {
        self.grads.get(idx).and_then(|g| g.as_deref())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = fresh_id();
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        if v.tape != self.id {
            return Err(Error::DetachedLoss);
        }
        self.nodes.get(v.idx).ok_or(Error::DetachedLoss)
    }

    /// Value of a recorded variable. Panics on a handle from another tape.
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self
            .node(v)
            .expect("variable does not belong to this tape")
            .value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].value.requires_grad
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Result<Var> {
        check_finite(op_name, &data)?;
        let rg = op_inputs(&op).iter().any(|&i| self.rg(i));
        let op = if rg { op } else { Op::Leaf };
        let value = Tensor::from_parts(shape, data).with_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    /// Records an input tensor; it participates in gradients iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let mut t = t;
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn idx(&self, v: Var) -> Result<usize> {
        self.node(v)?;
        Ok(v.idx)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [c, h, w] => Ok((c, h, w)),
            ref other => Err(Error::InvalidShape {
                op,
                detail: format!("expected [C, h, w], got {other:?}"),
            }),
        }
    }

    // ---- elementwise ------------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let name = binary_name(kind);
        self.same_shape(name, a, b)?;
        let (x, y) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        if kind == BinaryKind::Div && y.iter().any(|v| *v == S::zero()) {
            return Err(Error::DivisionByZero(name));
        }
        let data = x.iter().zip(y).map(|(&p, &q)| apply(kind, p, q)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, Op::Binary(kind, ia, ib))
    }

    pub fn binary_scalar(&mut self, kind: BinaryKind, a: Var, s: S) -> Result<Var> {
        let ia = self.idx(a)?;
        let name = binary_name(kind);
        if kind == BinaryKind::Div && s == S::zero() {
            return Err(Error::DivisionByZero(name));
        }
        if !s.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let data = self.nodes[ia].value.data().iter().map(|&p| apply(kind, p, s)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, Op::ScalarRhs(kind, ia, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Result<Var> {
        self.binary_scalar(BinaryKind::Add, a, s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: S) -> Result<Var> {
        self.binary_scalar(BinaryKind::Mul, a, s)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("sigmoid", a, kernels::sigmoid, Op::Sigmoid(ia))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("gelu", a, kernels::gelu, Op::Gelu(ia))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary("exp", a, |v| v.exp(), Op::Exp(ia))
    }

    /// Natural logarithm; non-positive inputs are rejected.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if self.value(a).data().iter().any(|v| *v <= S::zero()) {
            return Err(Error::NonFinite("log"));
        }
        self.unary("log", a, |v| v.ln(), Op::Log(ia))
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        let ia = self.idx(a)?;
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary("clamp", a, |v| v.max(lo).min(hi), Op::Clamp(ia, lo, hi))
    }

    // ---- linear algebra and reductions -----------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k, k2, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            (sa, sb) => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: sa.to_vec(),
                    right: sb.to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul(ia, ib))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s: S = self.value(a).data().iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(ia))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.value(a);
        let s: S = t.data().iter().copied().sum::<S>() / S::lit(t.numel() as f64);
        self.push("mean", vec![1], vec![s], Op::Mean(ia))
    }

    /// Per-channel global average or max over the spatial extent: `[C,h,w] -> [C]`.
    pub fn pool_global(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let ix = self.idx(x)?;
        let (c, h, w) = self.dims3("pool_global", x)?;
        let n = h * w;
        if n == 0 {
            return Err(Error::EmptySpatial);
        }
        let data = self.value(x).data();
        match kind {
            PoolKind::Avg => {
                let inv = S::lit(n as f64);
                let out = (0..c)
                    .map(|ch| data[ch * n..(ch + 1) * n].iter().copied().sum::<S>() / inv)
                    .collect();
                self.push("pool_avg", vec![c], out, Op::PoolAvg(ix))
            }
            PoolKind::Max => {
                let mut arg = Vec::with_capacity(c);
                let mut out = Vec::with_capacity(c);
                for ch in 0..c {
                    let plane = &data[ch * n..(ch + 1) * n];
                    let mut best = 0;
                    for (i, v) in plane.iter().enumerate() {
                        if *v > plane[best] {
                            best = i;
                        }
                    }
                    arg.push(ch * n + best);
                    out.push(plane[best]);
                }
                self.push("pool_max", vec![c], out, Op::PoolMax(ix, arg))
            }
        }
    }

    /// Align-corners=false bilinear resize of a `[C,h,w]` map.
    pub fn resample_bilinear(&mut self, x: Var, h2: usize, w2: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (c, h, w) = self.dims3("resample_bilinear", x)?;
        if h2 == 0 || w2 == 0 {
            return Err(Error::ZeroTarget { h: h2, w: w2 });
        }
        let data = kernels::resample_bilinear(self.value(x).data(), c, h, w, h2, w2);
        self.push("resample_bilinear", vec![c, h2, w2], data, Op::Resample(ix))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        super::validate_shape("reshape", shape)?;
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.value(x).data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(ix))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut idxs = Vec::with_capacity(parts.len());
        for &p in parts {
            idxs.push(self.idx(p)?);
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.shape(first).to_vec(),
                    right: s.to_vec(),
                });
            }
            lead += s[0];
        }
        let mut data = Vec::new();
        for &i in &idxs {
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push("concat", shape, data, Op::Concat(idxs))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(Error::InvalidShape {
                op: "slice",
                detail: format!("rows {start}..{} of {shape:?}", start + len),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        self.push("slice", out_shape, data, Op::Slice(ix, start))
    }

    /// `x[c,·,·] * w[c]`, with `w` broadcast over space.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (c, h, wd) = self.dims3("scale_channels", x)?;
        if self.value(w).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let n = h * wd;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let data = (0..c * n).map(|i| xv[i] * wv[i / n]).collect();
        self.push("scale_channels", vec![c, h, wd], data, Op::ScaleChannels(ix, iw))
    }

    /// `x[·,i,j] * w[i,j]`, with `w` broadcast over channels.
    pub fn scale_spatial(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (c, h, wd) = self.dims3("scale_spatial", x)?;
        let n = h * wd;
        if self.value(w).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "scale_spatial",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let data = (0..c * n).map(|i| xv[i] * wv[i % n]).collect();
        self.push("scale_spatial", vec![c, h, wd], data, Op::ScaleSpatial(ix, iw))
    }

    /// Pointwise linear map over channels: `[Cin,h,w] -> [Cout,h,w]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (cin, h, wd) = self.dims3("conv1x1", x)?;
        let cout = match *self.shape(w) {
            [o, i] if i == cin => o,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv1x1",
                    left: self.shape(x).to_vec(),
                    right: self.shape(w).to_vec(),
                })
            }
        };
        let ib = match b {
            Some(b) => {
                if self.value(b).numel() != cout {
                    return Err(Error::ShapeMismatch {
                        op: "conv1x1",
                        left: vec![cout],
                        right: self.shape(b).to_vec(),
                    });
                }
                Some(self.idx(b)?)
            }
            None => None,
        };
        let n = h * wd;
        let mut data = kernels::matmul(self.value(w).data(), self.value(x).data(), cout, cin, n);
        if let Some(ib) = ib {
            let bv = self.nodes[ib].value.data();
            for o in 0..cout {
                for v in &mut data[o * n..(o + 1) * n] {
                    *v += bv[o];
                }
            }
        }
        self.push("conv1x1", vec![cout, h, wd], data, Op::Conv1x1 { x: ix, w: iw, b: ib })
    }

    /// Non-overlapping `k×k` patch gather into channels.
    pub fn space_to_depth(&mut self, x: Var, k: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (c, h, w) = self.dims3("space_to_depth", x)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::InvalidShape {
                op: "space_to_depth",
                detail: format!("{h}x{w} not divisible by patch {k}"),
            });
        }
        let data = kernels::space_to_depth(self.value(x).data(), c, h, w, k);
        self.push("space_to_depth", vec![c * k * k, h / k, w / k], data, Op::SpaceToDepth(ix, k))
    }

    /// Normalizes each pixel's channel vector, then applies per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (c, h, w) = self.dims3("layer_norm", x)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let n = h * w;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let inv_c = S::one() / S::lit(c as f64);
        let eps = S::lit(LAYER_NORM_EPS);
        let mut xhat = vec![S::zero(); c * n];
        let mut rstd = vec![S::zero(); n];
        let mut out = vec![S::zero(); c * n];
        for p in 0..n {
            let mut mu = S::zero();
            for ch in 0..c {
                mu += xv[ch * n + p];
            }
            mu *= inv_c;
            let mut var = S::zero();
            for ch in 0..c {
                let d = xv[ch * n + p] - mu;
                var += d * d;
            }
            var *= inv_c;
            let r = S::one() / (var + eps).sqrt();
            rstd[p] = r;
            for ch in 0..c {
                let xh = (xv[ch * n + p] - mu) * r;
                xhat[ch * n + p] = xh;
                out[ch * n + p] = xh * gv[ch] + bv[ch];
            }
        }
        self.push(
            "layer_norm",
            vec![c, h, w],
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
        )
    }

    /// Softmax along the leading (class) axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let shape = self.shape(x).to_vec();
        let k = shape[0];
        let n = self.value(x).numel() / k;
        let data = kernels::softmax_leading(self.value(x).data(), k, n);
        self.push("softmax", shape, data, Op::Softmax(ix))
    }

    /// Cosine similarity of two flattened tensors; 0 when either norm is
    /// below 1e-12.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::ShapeMismatch {
                op: "cosine",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let c = cosine_value(self.value(a).data(), self.value(b).data());
        self.push("cosine", vec![1], vec![c], Op::Cosine(ia, ib))
    }

    /// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
    /// `logits` is `[K, ...]` and `labels` holds one id per trailing position.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let il = self.idx(logits)?;
        let k = self.shape(logits)[0];
        let n = self.value(logits).numel() / k;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax_leading(x, k, n);
        let mut total = S::zero();
        let mut scored = 0usize;
        for (p, &l) in labels.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let mut mx = S::neg_infinity();
            for c in 0..k {
                mx = mx.max(x[c * n + p]);
            }
            let mut z = S::zero();
            for c in 0..k {
                z += (x[c * n + p] - mx).exp();
            }
            total += z.ln() + mx - x[l as usize * n + p];
            scored += 1;
        }
        if scored == 0 {
            return Err(Error::AllIgnored);
        }
        let loss = total / S::lit(scored as f64);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: il,
                probs,
                labels: labels.to_vec(),
                scored,
            },
        )
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates d(loss)/d(·) to every grad-requiring leaf, then clears the
    /// tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        let node = self.node(loss)?;
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.value.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(vec![S::one()]);
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        // keep only leaves that asked for gradients
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.value.requires_grad) {
                grads[i] = None;
            }
        }
        let out = Gradients { tape: self.id, grads };
        self.clear();
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let mut acc = |j: usize, contrib: Vec<S>| {
            if !nodes[j].value.requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = val(i);
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Binary(kind, a, b) => {
                let (x, y) = (val(a), val(b));
                match kind {
                    BinaryKind::Add => {
                        acc(a, g.to_vec());
                        acc(b, g.to_vec());
                    }
                    BinaryKind::Sub => {
                        acc(a, g.to_vec());
                        acc(b, g.iter().map(|v| -*v).collect());
                    }
                    BinaryKind::Mul => {
                        acc(a, zip_map(g, y, |g, y| g * y));
                        acc(b, zip_map(g, x, |g, x| g * x));
                    }
                    BinaryKind::Div => {
                        acc(a, zip_map(g, y, |g, y| g / y));
                        let gb = g
                            .iter()
                            .zip(x.iter().zip(y))
                            .map(|(&g, (&x, &y))| -g * x / (y * y))
                            .collect();
                        acc(b, gb);
                    }
                    BinaryKind::Max => {
                        let ga = (0..g.len())
                            .map(|k| if x[k] >= y[k] { g[k] } else { S::zero() })
                            .collect();
                        let gb = (0..g.len())
                            .map(|k| if x[k] >= y[k] { S::zero() } else { g[k] })
                            .collect();
                        acc(a, ga);
                        acc(b, gb);
                    }
                }
            }
            &Op::ScalarRhs(kind, a, s) => {
                let x = val(a);
                let ga = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                    BinaryKind::Mul => g.iter().map(|v| *v * s).collect(),
                    BinaryKind::Div => g.iter().map(|v| *v / s).collect(),
                    BinaryKind::Max => zip_map(g, x, |g, x| if x >= s { g } else { S::zero() }),
                };
                acc(a, ga);
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                let n = nodes[b].value.shape()[1];
                acc(a, kernels::matmul_bt(g, val(b), m, n, k));
                acc(b, kernels::matmul_at(val(a), g, m, k, n));
            }
            &Op::Sum(a) => acc(a, vec![g[0]; val(a).len()]),
            &Op::Mean(a) => {
                let n = val(a).len();
                acc(a, vec![g[0] / S::lit(n as f64); n]);
            }
            &Op::PoolAvg(a) => {
                let n = val(a).len() / g.len();
                let inv = S::lit(n as f64);
                acc(a, (0..val(a).len()).map(|k| g[k / n] / inv).collect());
            }
            Op::PoolMax(a, arg) => {
                let mut ga = vec![S::zero(); val(*a).len()];
                for (ch, &pos) in arg.iter().enumerate() {
                    ga[pos] += g[ch];
                }
                acc(*a, ga);
            }
            &Op::Resample(a) => {
                let s = nodes[a].value.shape();
                let so = nodes[i].value.shape();
                acc(a, kernels::resample_bilinear_backward(g, s[0], s[1], s[2], so[1], so[2]));
            }
            &Op::Reshape(a) => acc(a, g.to_vec()),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            &Op::Slice(a, start) => {
                let inner = out.len() / nodes[i].value.shape()[0];
                let mut ga = vec![S::zero(); val(a).len()];
                ga[start * inner..start * inner + g.len()].copy_from_slice(g);
                acc(a, ga);
            }
            &Op::Sigmoid(a) => acc(a, zip_map(g, out, |g, y| g * y * (S::one() - y))),
            &Op::Gelu(a) => acc(a, zip_map(g, val(a), |g, x| g * kernels::gelu_grad(x))),
            &Op::Log(a) => acc(a, zip_map(g, val(a), |g, x| g / x)),
            &Op::Exp(a) => acc(a, zip_map(g, out, |g, y| g * y)),
            &Op::Clamp(a, lo, hi) => {
                acc(a, zip_map(g, val(a), |g, x| if x < lo || x > hi { S::zero() } else { g }))
            }
            &Op::ScaleChannels(x, w) => {
                let (xv, wv) = (val(x), val(w));
                let c = wv.len();
                let n = xv.len() / c;
                acc(x, (0..xv.len()).map(|k| g[k] * wv[k / n]).collect());
                let mut gw = vec![S::zero(); c];
                for k in 0..xv.len() {
                    gw[k / n] += g[k] * xv[k];
                }
                acc(w, gw);
            }
            &Op::ScaleSpatial(x, w) => {
                let (xv, wv) = (val(x), val(w));
                let n = wv.len();
                acc(x, (0..xv.len()).map(|k| g[k] * wv[k % n]).collect());
                let mut gw = vec![S::zero(); n];
                for k in 0..xv.len() {
                    gw[k % n] += g[k] * xv[k];
                }
                acc(w, gw);
            }
            &Op::Conv1x1 { x, w, b } => {
                let ws = nodes[w].value.shape();
                let (cout, cin) = (ws[0], ws[1]);
                let n = val(x).len() / cin;
                acc(w, kernels::matmul_bt(g, val(x), cout, n, cin));
                acc(x, kernels::matmul_at(val(w), g, cout, cin, n));
                if let Some(b) = b {
                    acc(b, (0..cout).map(|o| g[o * n..(o + 1) * n].iter().copied().sum()).collect());
                }
            }
            &Op::SpaceToDepth(a, k) => {
                let s = nodes[a].value.shape();
                acc(a, kernels::depth_to_space(g, s[0], s[1], s[2], k));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma);
                let c = gv.len();
                let n = xhat.len() / c;
                let inv_c = S::one() / S::lit(c as f64);
                let mut gx = vec![S::zero(); c * n];
                let mut gg = vec![S::zero(); c];
                let mut gb = vec![S::zero(); c];
                for p in 0..n {
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for ch in 0..c {
                        let k = ch * n + p;
                        let dxh = g[k] * gv[ch];
                        m1 += dxh;
                        m2 += dxh * xhat[k];
                        gg[ch] += g[k] * xhat[k];
                        gb[ch] += g[k];
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for ch in 0..c {
                        let k = ch * n + p;
                        gx[k] = rstd[p] * (g[k] * gv[ch] - m1 - xhat[k] * m2);
                    }
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            &Op::Softmax(a) => {
                let k = nodes[i].value.shape()[0];
                let n = out.len() / k;
                let mut ga = vec![S::zero(); out.len()];
                for p in 0..n {
                    let mut dot = S::zero();
                    for c in 0..k {
                        dot += out[c * n + p] * g[c * n + p];
                    }
                    for c in 0..k {
                        ga[c * n + p] = out[c * n + p] * (g[c * n + p] - dot);
                    }
                }
                acc(a, ga);
            }
            &Op::Cosine(a, b) => {
                let (x, y) = (val(a), val(b));
                let (nx, ny) = (norm(x), norm(y));
                let floor = S::lit(COSINE_NORM_FLOOR);
                if nx < floor || ny < floor {
                    acc(a, vec![S::zero(); x.len()]);
                    acc(b, vec![S::zero(); y.len()]);
                } else {
                    let c = out[0];
                    let inv = S::one() / (nx * ny);
                    let (ix2, iy2) = (S::one() / (nx * nx), S::one() / (ny * ny));
                    let ga = zip_map(y, x, |yk, xk| g[0] * (yk * inv - c * xk * ix2));
                    let gb = zip_map(x, y, |xk, yk| g[0] * (xk * inv - c * yk * iy2));
                    acc(a, ga);
                    acc(b, gb);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                scored,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / S::lit(*scored as f64);
                let mut gl = vec![S::zero(); probs.len()];
                for (p, &l) in labels.iter().enumerate() {
                    if l == IGNORE_LABEL {
                        continue;
                    }
                    for c in 0..k {
                        let onehot = if c == l as usize { S::one() } else { S::zero() };
                        gl[c * n + p] = scale * (probs[c * n + p] - onehot);
                    }
                }
                acc(*logits, gl);
            }
        }
    }
}

fn op_inputs<S>(op: &Op<S>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        &Op::Binary(_, a, b) | &Op::MatMul(a, b) => vec![a, b],
        &Op::ScaleChannels(a, b) | &Op::ScaleSpatial(a, b) | &Op::Cosine(a, b) => vec![a, b],
        &Op::ScalarRhs(_, a, _)
        | &Op::Sum(a)
        | &Op::Mean(a)
        | &Op::PoolAvg(a)
        | &Op::Resample(a)
        | &Op::Reshape(a)
        | &Op::Slice(a, _)
        | &Op::Sigmoid(a)
        | &Op::Gelu(a)
        | &Op::Log(a)
        | &Op::Exp(a)
        | &Op::Clamp(a, _, _)
        | &Op::SpaceToDepth(a, _)
        | &Op::Softmax(a) => vec![a],
        Op::PoolMax(a, _) => vec![*a],
        Op::Concat(parts) => parts.clone(),
        &Op::Conv1x1 { x, w, b } => {
            let mut v = vec![x, w];
            v.extend(b);
            v
        }
        &Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        &Op::CrossEntropy { logits, .. } => vec![logits],
    }
}

fn apply<S: Scalar>(kind: BinaryKind, p: S, q: S) -> S {
    match kind {
        BinaryKind::Add => p + q,
        BinaryKind::Sub => p - q,
        BinaryKind::Mul => p * q,
        BinaryKind::Div => p / q,
        BinaryKind::Max => {
            if p >= q {
                p
            } else {
                q
            }
        }
    }
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
        BinaryKind::Max => "max",
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn norm<S: Scalar>(x: &[S]) -> S {
    x.iter().map(|v| *v * *v).sum::<S>().sqrt()
}

/// Cosine similarity with the zero-norm convention, clamped into [-1, 1].
pub(crate) fn cosine_value<S: Scalar>(a: &[S], b: &[S]) -> S {
    let (na, nb) = (norm(a), norm(b));
    let floor = S::lit(COSINE_NORM_FLOOR);
    if na < floor || nb < floor {
        return S::zero();
    }
    let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    (dot / (na * nb)).max(-S::one()).min(S::one())
}
