//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records each operation with the ids of its inputs. Values are
//! computed eagerly; [`Tape::backward`] walks the records in reverse and
//! accumulates gradients. Fused loss nodes (index rate, hyper-latent rate,
//! commitment, MSE) compute their local gradients during the forward pass.

use crate::codebook::commitment_grads;
use crate::hyperprior::z_rate_with_grads;
use crate::probability::{index_rate_with_grads, IndexRateInputs};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Relu(Var),
    Upsample { x: Var, factor: usize },
    ReflectPad { x: Var, h: usize, w: usize },
    Crop { x: Var, h: usize, w: usize },
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    /// Value supplied by the caller; gradient passes to `x` unchanged.
    Identity(Var),
    SoftplusFloor { x: Var },
    Gather { table: Var, indices: Vec<u32> },
    /// Scalar node whose local gradients were computed in the forward pass.
    Fused(Vec<(Var, Tensor)>),
    SumScalars(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    /// Which side of each non-smooth point this node sits on.
    kinks: Vec<bool>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    record_kinks: bool,
}

pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that also records the branch taken at every non-smooth
    /// point, for [`Tape::kink_signature`].
    pub fn with_kink_recording() -> Self {
        Self {
            nodes: Vec::new(),
            record_kinks: true,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_with_kinks(value, op, Vec::new())
    }

    fn push_with_kinks(&mut self, value: Tensor, op: Op, kinks: Vec<bool>) -> Var {
        let kinks = if self.record_kinks || matches!(op, Op::Relu(_) | Op::SoftplusFloor { .. }) {
            kinks
        } else {
            Vec::new()
        };
        self.nodes.push(Node { value, op, kinks });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every non-smooth branch taken (ReLU signs, floors). Two
    /// evaluations with equal signatures lie in the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for n in &self.nodes {
            n.kinks.hash(&mut h);
        }
        h.finish()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let v = tensor::conv2d(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push(v, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let kinks = xv.data().iter().map(|&v| v > 0.0).collect();
        let v = xv.map(|v| v.max(0.0));
        self.push_with_kinks(v, Op::Relu(x), kinks)
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let v = tensor::upsample_nearest(self.value(x), factor);
        self.push(v, Op::Upsample { x, factor })
    }

    pub fn reflect_pad(&mut self, x: Var, ht: usize, wt: usize) -> Var {
        let (_, h, w) = self.value(x).dims3();
        if (h, w) == (ht, wt) {
            return x;
        }
        let v = tensor::reflect_pad(self.value(x), ht, wt);
        self.push(v, Op::ReflectPad { x, h, w })
    }

    pub fn crop(&mut self, x: Var, ht: usize, wt: usize) -> Var {
        let (_, h, w) = self.value(x).dims3();
        if (h, w) == (ht, wt) {
            return x;
        }
        let v = tensor::crop(self.value(x), ht, wt);
        self.push(v, Op::Crop { x, h, w })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|v| v * s);
        self.push(v, Op::Scale(x, s))
    }

    /// Elementwise product with a constant tensor of the same shape, or a
    /// `[1, H, W]` tensor broadcast over channels.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let v = broadcast_mul(self.value(x), &c);
        self.push(v, Op::MulConst(x, c))
    }

    /// `x + c` for a constant `c` (e.g. additive quantization noise).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Var {
        let mut v = self.value(x).clone();
        v.add_assign(c);
        self.push(v, Op::Identity(x))
    }

    /// Node with `value` in the forward pass and identity gradient to `x`:
    /// `x + sg[value − x]`.
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Var {
        debug_assert_eq!(value.shape(), self.value(x).shape());
        self.push(value, Op::Identity(x))
    }

    /// `max(softplus(x), floor)`.
    pub fn softplus_floor(&mut self, x: Var, floor: f64) -> Var {
        let xv = self.value(x);
        let sp = xv.map(softplus);
        let kinks = sp.data().iter().map(|&v| v >= floor).collect();
        let v = sp.map(|v| v.max(floor));
        self.push_with_kinks(v, Op::SoftplusFloor { x }, kinks)
    }

    /// Rows of a `[K, D]` table arranged as a `[D, H, W]` map.
    pub fn gather(&mut self, table: Var, indices: &[u32], h: usize, w: usize) -> Var {
        let t = self.value(table);
        let d = t.shape()[1];
        let mut v = Tensor::zeros(&[d, h, w]);
        for (loc, &i) in indices.iter().enumerate() {
            for c in 0..d {
                v.data_mut()[c * h * w + loc] = t.data()[i as usize * d + c];
            }
        }
        self.push(
            v,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Var {
        let xv = self.value(x);
        let n = xv.len() as f64;
        let mut g = Tensor::zeros(xv.shape());
        let mut acc = 0.0;
        for ((a, b), g) in xv.data().iter().zip(target.data()).zip(g.data_mut()) {
            acc += (a - b) * (a - b);
            *g = 2.0 * (a - b) / n;
        }
        self.push(Tensor::scalar(acc / n), Op::Fused(vec![(x, g)]))
    }

    /// Commitment loss between features `y` and their quantized embeddings `e`.
    pub fn commitment(&mut self, y: Var, e: Var, beta: f64) -> Var {
        let (yv, ev) = (self.value(y), self.value(e));
        let sq: f64 = yv.data().iter().zip(ev.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let (gy, ge) = commitment_grads(yv, ev, beta);
        self.push(Tensor::scalar((1.0 + beta) * sq), Op::Fused(vec![(y, gy), (e, ge)]))
    }

    /// Cross-entropy rate (bits) of `indices` under the floored isotropic
    /// model built from `anchors`, `mu` and `sigma`.
    pub fn index_rate(
        &mut self,
        anchors: Var,
        mu: Var,
        sigma: Var,
        indices: &[u32],
        weights: Option<&[f64]>,
        target: Option<Var>,
    ) -> Var {
        let (bits, g) = index_rate_with_grads(&IndexRateInputs {
            anchors: self.value(anchors),
            mu: self.value(mu),
            sigma: self.value(sigma),
            indices,
            weights,
            target: target.map(|t| self.value(t)),
        });
        let mut parts = vec![(anchors, g.anchors), (mu, g.mu), (sigma, g.sigma)];
        if let (Some(t), Some(gt)) = (target, g.target) {
            parts.push((t, gt));
        }
        self.push_with_kinks(Tensor::scalar(bits), Op::Fused(parts), g.floored)
    }

    /// Factorized discretized-Gaussian rate (bits) of a hyper-latent.
    pub fn z_rate(&mut self, z: Var, means: Var, log_scales: Var, active: Option<&[bool]>) -> Var {
        let r = z_rate_with_grads(self.value(z), self.value(means), self.value(log_scales), active);
        self.push_with_kinks(
            Tensor::scalar(r.bits),
            Op::Fused(vec![(z, r.grad_z), (means, r.grad_means), (log_scales, r.grad_log_scales)]),
            r.floored,
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|&(t, w)| w * self.value(t).item()).sum();
        self.push(Tensor::scalar(v), Op::SumScalars(terms.to_vec()))
    }

    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = tensor::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu(x) => {
                    let mut gx = g.clone();
                    for (gv, &on) in gx.data_mut().iter_mut().zip(&node.kinks) {
                        if !on {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Upsample { x, factor } => {
                    accumulate(&mut grads, *x, tensor::upsample_nearest_backward(&g, *factor));
                }
                Op::ReflectPad { x, h, w } => {
                    accumulate(&mut grads, *x, tensor::reflect_pad_backward(&g, *h, *w));
                }
                Op::Crop { x, h, w } => {
                    accumulate(&mut grads, *x, tensor::crop_backward(&g, *h, *w));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.map(|v| v * s)),
                Op::MulConst(x, c) => accumulate(&mut grads, *x, broadcast_mul(&g, c)),
                Op::Identity(x) => accumulate(&mut grads, *x, g.clone()),
                Op::SoftplusFloor { x, .. } => {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    for ((gv, &xi), &on) in gx.data_mut().iter_mut().zip(xv.data()).zip(&node.kinks) {
                        *gv = if on { *gv * sigmoid(xi) } else { 0.0 };
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gather { table, indices } => {
                    let t = self.value(*table);
                    let d = t.shape()[1];
                    let n = indices.len();
                    let mut gt = Tensor::zeros(t.shape());
                    for (loc, &k) in indices.iter().enumerate() {
                        for c in 0..d {
                            gt.data_mut()[k as usize * d + c] += g.data()[c * n + loc];
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Fused(parts) => {
                    let s = g.item();
                    for (v, local) in parts {
                        accumulate(&mut grads, *v, local.map(|x| x * s));
                    }
                }
                Op::SumScalars(terms) => {
                    let s = g.item();
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Tensor::scalar(s * w));
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients(grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn broadcast_mul(x: &Tensor, c: &Tensor) -> Tensor {
    if x.shape() == c.shape() {
        let mut v = x.clone();
        for (a, b) in v.data_mut().iter_mut().zip(c.data()) {
            *a *= b;
        }
        return v;
    }
    let (ch, h, w) = x.dims3();
    assert_eq!(c.shape(), &[1, h, w], "cannot broadcast {:?} over {:?}", c.shape(), x.shape());
    let mut v = x.clone();
    for k in 0..ch {
        for (a, b) in v.data_mut()[k * h * w..(k + 1) * h * w].iter_mut().zip(c.data()) {
            *a *= b;
        }
    }
    v
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
