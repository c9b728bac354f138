//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every operation as a node holding the forward value
//! plus a closure that maps the output gradient to gradients for each parent.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Leaves come in two flavours: *tracked* (trainable parameters via
//! [`Tape::param`], or plain inputs via [`Tape::input`]) and *untracked*
//! constants. Gradients of untracked values are never materialised — they are
//! absent from the result, not zero-filled. A tape built with
//! [`Tape::inference`] skips closure recording entirely.
//!
//! Parameters live outside the tape in a [`ParamStore`]; binding a parameter
//! onto a tape copies its current value and remembers the association so
//! [`Gradients::for_params`] can hand the optimizer `(ParamId, grad)` pairs.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Owns the trainable parameters of one network.
#[derive(Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    tracked: bool,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, usize)>,
    grad_enabled: bool,
}

/// Result of a backward sweep: one gradient per reachable tracked node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bindings: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a tape node, if it was tracked and reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Collect `(param, gradient)` pairs for every bound parameter that
    /// received a gradient. A parameter bound several times has its
    /// gradients summed.
    pub fn for_params(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(pid, node) in &self.bindings {
            let Some(g) = self.grads[node].as_ref() else {
                continue;
            };
            if let Some((_, acc)) = out.iter_mut().find(|(p, _)| *p == pid) {
                acc.add_assign(g);
            } else {
                out.push((pid, g.clone()));
            }
        }
        out
    }
}

impl Tape {
    /// Tape that records gradients.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape that only evaluates forward values (no closures, no gradients).
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn tracked(&self, v: Var) -> bool {
        self.grad_enabled && self.nodes[v.0].tracked
    }

    fn push_leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            tracked: tracked && self.grad_enabled,
            parents: Vec::new(),
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_node(&mut self, value: Tensor, parents: Vec<Var>, back: BackFn) -> Var {
        let tracked = parents.iter().any(|&p| self.tracked(p));
        if !tracked {
            return self.push_leaf(value, false);
        }
        self.nodes.push(Node {
            value,
            tracked: true,
            parents: parents.iter().map(|p| p.0).collect(),
            back: Some(back),
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input leaf (gradient will be available).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Untracked constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Bind a trainable parameter: copies its value and records the
    /// association for [`Gradients::for_params`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push_leaf(store.get(id).clone(), true);
        if self.grad_enabled {
            self.bindings.push((id, v.0));
        }
        v
    }

    /// Bind a parameter as a constant: its value participates in the forward
    /// pass but no gradient flows into it. Used to evaluate one network
    /// inside another's training step without leaking updates.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_leaf(store.get(id).clone(), false)
    }

    /// Reverse sweep from `loss` (must be a single-element tensor). Consumes
    /// the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::contract("Tape::backward", "tape built in inference mode"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(
                "Tape::backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].tracked {
                continue;
            }
            let Some(back) = self.nodes[i].back.as_ref() else {
                continue;
            };
            let g = grads[i].as_ref().unwrap();
            let parent_grads = back(g);
            for (slot, pg) in parent_grads.into_iter().enumerate() {
                let Some(pg) = pg else { continue };
                let p = self.nodes[i].parents[slot];
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings,
        })
    }

    // ───────────────────────── elementwise ─────────────────────────

    /// Generic unary elementwise op. `df(x, y)` is dy/dx given input and
    /// output values.
    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Var {
        let out = self.value(a).map(&f);
        if !self.tracked(a) {
            return self.push_leaf(out, false);
        }
        let x = self.value(a).clone();
        let y = out.clone();
        self.push_node(
            out,
            vec![a],
            Box::new(move |g| {
                let mut d = g.clone();
                let (xd, yd) = (x.data(), y.data());
                for (i, v) in d.data_mut().iter_mut().enumerate() {
                    *v *= df(xd[i], yd[i]);
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid_scalar(x), |x, _| {
            let s = sigmoid_scalar(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    /// Numerically stable `ln(1 + e^x)`; derivative is `sigmoid(x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f32::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, move |x| x + s, |_, _| 1.0)
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        dfa: impl Fn(f32, f32) -> f32 + 'static,
        dfb: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ ({:?} vs {:?})",
            self.shape(a),
            self.shape(b)
        );
        let out = self.value(a).zip(self.value(b), &f);
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        if !ta && !tb {
            return self.push_leaf(out, false);
        }
        let xa = self.value(a).clone();
        let xb = self.value(b).clone();
        self.push_node(
            out,
            vec![a, b],
            Box::new(move |g| {
                let ga = ta.then(|| {
                    let mut d = g.clone();
                    let (ad, bd) = (xa.data(), xb.data());
                    for (i, v) in d.data_mut().iter_mut().enumerate() {
                        *v *= dfa(ad[i], bd[i]);
                    }
                    d
                });
                let gb = tb.then(|| {
                    let mut d = g.clone();
                    let (ad, bd) = (xa.data(), xb.data());
                    for (i, v) in d.data_mut().iter_mut().enumerate() {
                        *v *= dfb(ad[i], bd[i]);
                    }
                    d
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise("add", a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise("sub", a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    // ───────────────────────── reductions ─────────────────────────

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum() as f32);
        if !self.tracked(a) {
            return self.push_leaf(out, false);
        }
        let shape = self.shape(a).to_vec();
        self.push_node(
            out,
            vec![a],
            Box::new(move |g| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f32;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ───────────────────────── shape ─────────────────────────

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let out = self
            .value(a)
            .clone()
            .reshaped(shape.clone())
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        if !self.tracked(a) {
            return self.push_leaf(out, false);
        }
        let orig = self.shape(a).to_vec();
        self.push_node(
            out,
            vec![a],
            Box::new(move |g| vec![Some(g.clone().reshaped(orig.clone()).unwrap())]),
        )
    }

    /// Repeat each axis-0 slice `times` times:
    /// `out[i*times + j] = x[i]`. Used to broadcast per-video data across
    /// frames laid out as `[video*frames, ...]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let x = self.value(a);
        let b = x.shape()[0];
        let row: usize = x.shape()[1..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[0] = b * times;
        let mut data = Vec::with_capacity(b * times * row);
        for i in 0..b {
            let src = &x.data()[i * row..(i + 1) * row];
            for _ in 0..times {
                data.extend_from_slice(src);
            }
        }
        let out = Tensor::new(shape, data).unwrap();
        if !self.tracked(a) {
            return self.push_leaf(out, false);
        }
        let in_shape = self.shape(a).to_vec();
        self.push_node(
            out,
            vec![a],
            Box::new(move |g| {
                let mut d = Tensor::zeros(in_shape.clone());
                for i in 0..b {
                    let dst = &mut d.data_mut()[i * row..(i + 1) * row];
                    for j in 0..times {
                        let src = &g.data()[(i * times + j) * row..(i * times + j + 1) * row];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Broadcast a single slice to `batch` copies along a new axis 0.
    pub fn broadcast0(&mut self, a: Var, batch: usize) -> Var {
        let x = self.value(a);
        let row = x.numel();
        let mut shape = Vec::with_capacity(x.shape().len() + 1);
        shape.push(batch);
        shape.extend_from_slice(x.shape());
        let mut data = Vec::with_capacity(batch * row);
        for _ in 0..batch {
            data.extend_from_slice(x.data());
        }
        let out = Tensor::new(shape, data).unwrap();
        if !self.tracked(a) {
            return self.push_leaf(out, false);
        }
        let in_shape = self.shape(a).to_vec();
        self.push_node(
            out,
            vec![a],
            Box::new(move |g| {
                let mut d = Tensor::zeros(in_shape.clone());
                for i in 0..batch {
                    let src = &g.data()[i * row..(i + 1) * row];
                    for (a, b) in d.data_mut().iter_mut().zip(src) {
                        *a += b;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Per-row selection between two tensors of identical shape:
    /// `out[i] = if take_a[i] { a[i] } else { b[i] }` where `i` indexes
    /// axis-0 slices. Gradients route to whichever side supplied each row.
    pub fn select_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "select_rows: operand shapes differ"
        );
        let n = self.shape(a)[0];
        assert_eq!(take_a.len(), n, "select_rows: mask length {} vs {} rows", take_a.len(), n);
        let row: usize = self.shape(a)[1..].iter().product();
        let mut out = self.value(b).clone();
        for (i, &t) in take_a.iter().enumerate() {
            if t {
                out.data_mut()[i * row..(i + 1) * row]
                    .copy_from_slice(&self.value(a).data()[i * row..(i + 1) * row]);
            }
        }
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        if !ta && !tb {
            return self.push_leaf(out, false);
        }
        let mask = take_a.to_vec();
        let shape = self.shape(a).to_vec();
        self.push_node(
            out,
            vec![a, b],
            Box::new(move |g| {
                let route = |want: bool| {
                    let mut d = Tensor::zeros(shape.clone());
                    for (i, &t) in mask.iter().enumerate() {
                        if t == want {
                            d.data_mut()[i * row..(i + 1) * row]
                                .copy_from_slice(&g.data()[i * row..(i + 1) * row]);
                        }
                    }
                    d
                };
                vec![ta.then(|| route(true)), tb.then(|| route(false))]
            }),
        )
    }

    // ───────────────────────── linear algebra ─────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new([m, n], out).unwrap();
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        if !ta && !tb {
            return self.push_leaf(out, false);
        }
        let xa = self.value(a).clone();
        let xb = self.value(b).clone();
        self.push_node(
            out,
            vec![a, b],
            Box::new(move |g| {
                let ga = ta.then(|| {
                    Tensor::new([m, k], matmul_nt(g.data(), xb.data(), m, n, k)).unwrap()
                });
                let gb = tb.then(|| {
                    Tensor::new([k, n], matmul_tn(xa.data(), g.data(), m, k, n)).unwrap()
                });
                vec![ga, gb]
            }),
        )
    }

    /// Add a bias row vector `[n]` to every row of `[m,n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0],
            "add_bias: {:?} + {:?}",
            sa,
            sb
        );
        let (m, n) = (sa[0], sa[1]);
        let mut out = self.value(a).clone();
        let bd = self.value(bias).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] += bd[j];
            }
        }
        let (ta, tb) = (self.tracked(a), self.tracked(bias));
        if !ta && !tb {
            return self.push_leaf(out, false);
        }
        self.push_node(
            out,
            vec![a, bias],
            Box::new(move |g| {
                let ga = ta.then(|| g.clone());
                let gb = tb.then(|| {
                    let mut d = Tensor::zeros([n]);
                    for i in 0..m {
                        for j in 0..n {
                            d.data_mut()[j] += g.data()[i * n + j];
                        }
                    }
                    d
                });
                vec![ga, gb]
            }),
        )
    }

    // ───────────────────────── convolution ─────────────────────────

    /// 3x3 convolution with padding 1. Stride 1 preserves the spatial size;
    /// stride 2 halves it (`out = (in - 1) / 2 + 1`). Input `[b,c,h,w]`,
    /// weight `[o,c,3,3]`, bias `[o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize) -> Var {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        assert!(
            sx.len() == 4 && sw.len() == 4 && sw[2] == 3 && sw[3] == 3 && sb.len() == 1,
            "conv2d: bad ranks x{:?} w{:?} b{:?}",
            sx,
            sw,
            sb
        );
        assert_eq!(sx[1], sw[1], "conv2d: input channels {} vs weight {}", sx[1], sw[1]);
        assert_eq!(sw[0], sb[0], "conv2d: out channels {} vs bias {}", sw[0], sb[0]);
        assert!(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
        let out = conv2d_forward(self.value(x), self.value(w), self.value(bias), stride);
        let (tx, tw, tb) = (self.tracked(x), self.tracked(w), self.tracked(bias));
        if !tx && !tw && !tb {
            return self.push_leaf(out, false);
        }
        let vx = self.value(x).clone();
        let vw = self.value(w).clone();
        self.push_node(
            out,
            vec![x, w, bias],
            Box::new(move |g| {
                let (gx, gw, gb) = conv2d_backward(&vx, &vw, stride, g, tx, tw, tb);
                vec![gx, gw, gb]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[b,c,h,w]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2: expected [b,c,h,w], got {:?}", s);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros([b, c, 2 * h, 2 * w]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for bc in 0..b * c {
                for i in 0..h {
                    for j in 0..w {
                        let v = src[(bc * h + i) * w + j];
                        let base = bc * 4 * h * w;
                        dst[base + (2 * i) * 2 * w + 2 * j] = v;
                        dst[base + (2 * i) * 2 * w + 2 * j + 1] = v;
                        dst[base + (2 * i + 1) * 2 * w + 2 * j] = v;
                        dst[base + (2 * i + 1) * 2 * w + 2 * j + 1] = v;
                    }
                }
            }
        }
        if !self.tracked(x) {
            return self.push_leaf(out, false);
        }
        self.push_node(
            out,
            vec![x],
            Box::new(move |g| {
                let mut d = Tensor::zeros([b, c, h, w]);
                let gd = g.data();
                for bc in 0..b * c {
                    for i in 0..h {
                        for j in 0..w {
                            let base = bc * 4 * h * w;
                            d.data_mut()[(bc * h + i) * w + j] = gd[base + (2 * i) * 2 * w + 2 * j]
                                + gd[base + (2 * i) * 2 * w + 2 * j + 1]
                                + gd[base + (2 * i + 1) * 2 * w + 2 * j]
                                + gd[base + (2 * i + 1) * 2 * w + 2 * j + 1];
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Group normalization over `[b,c,h,w]` with per-channel scale and shift.
    /// Statistics are computed per (sample, group) with biased variance.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f32 = 1e-5;
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "group_norm: expected [b,c,h,w], got {:?}", s);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(c % groups == 0, "group_norm: {} channels not divisible into {} groups", c, groups);
        assert_eq!(self.shape(gamma), &[c], "group_norm: gamma shape");
        assert_eq!(self.shape(beta), &[c], "group_norm: beta shape");
        let cg = c / groups;
        let m = (cg * h * w) as f32;

        let mut xhat = Tensor::zeros(s.clone());
        let mut inv_std = vec![0.0f32; b * groups];
        {
            let xd = self.value(x).data();
            let xh = xhat.data_mut();
            for bi in 0..b {
                for gi in 0..groups {
                    let start = (bi * c + gi * cg) * h * w;
                    let end = start + cg * h * w;
                    let mut mean = 0.0f64;
                    for &v in &xd[start..end] {
                        mean += v as f64;
                    }
                    mean /= m as f64;
                    let mut var = 0.0f64;
                    for &v in &xd[start..end] {
                        let d = v as f64 - mean;
                        var += d * d;
                    }
                    var /= m as f64;
                    let istd = 1.0 / ((var as f32) + EPS).sqrt();
                    inv_std[bi * groups + gi] = istd;
                    for i in start..end {
                        xh[i] = (xd[i] - mean as f32) * istd;
                    }
                }
            }
        }
        let mut out = xhat.clone();
        {
            let gd = self.value(gamma).data().to_vec();
            let bd = self.value(beta).data().to_vec();
            let od = out.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let start = (bi * c + ci) * h * w;
                    for v in &mut od[start..start + h * w] {
                        *v = *v * gd[ci] + bd[ci];
                    }
                }
            }
        }
        let (tx, tg, tb) = (self.tracked(x), self.tracked(gamma), self.tracked(beta));
        if !tx && !tg && !tb {
            return self.push_leaf(out, false);
        }
        let gamma_v = self.value(gamma).clone();
        self.push_node(
            out,
            vec![x, gamma, beta],
            Box::new(move |g| {
                let gd = g.data();
                let gx = tx.then(|| {
                    let mut d = Tensor::zeros(vec![b, c, h, w]);
                    let dd = d.data_mut();
                    for bi in 0..b {
                        for gi in 0..groups {
                            let istd = inv_std[bi * groups + gi];
                            let mut s1 = 0.0f64;
                            let mut s2 = 0.0f64;
                            for ci in gi * cg..(gi + 1) * cg {
                                let start = (bi * c + ci) * h * w;
                                let gm = gamma_v.data()[ci];
                                for i in start..start + h * w {
                                    let dxh = gd[i] * gm;
                                    s1 += dxh as f64;
                                    s2 += (dxh * xhat.data()[i]) as f64;
                                }
                            }
                            let (s1, s2) = (s1 as f32, s2 as f32);
                            for ci in gi * cg..(gi + 1) * cg {
                                let start = (bi * c + ci) * h * w;
                                let gm = gamma_v.data()[ci];
                                for i in start..start + h * w {
                                    let dxh = gd[i] * gm;
                                    dd[i] = istd / m * (m * dxh - s1 - xhat.data()[i] * s2);
                                }
                            }
                        }
                    }
                    d
                });
                let gg = tg.then(|| {
                    let mut d = Tensor::zeros(vec![c]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let start = (bi * c + ci) * h * w;
                            let mut acc = 0.0f32;
                            for i in start..start + h * w {
                                acc += gd[i] * xhat.data()[i];
                            }
                            d.data_mut()[ci] += acc;
                        }
                    }
                    d
                });
                let gb = tb.then(|| {
                    let mut d = Tensor::zeros(vec![c]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let start = (bi * c + ci) * h * w;
                            let mut acc = 0.0f32;
                            for i in start..start + h * w {
                                acc += gd[i];
                            }
                            d.data_mut()[ci] += acc;
                        }
                    }
                    d
                });
                vec![gx, gg, gb]
            }),
        )
    }

    // ───────────────────────── broadcasts over maps ─────────────────────────

    /// Add a per-(sample, channel) scalar to every pixel:
    /// `out[b,c,h,w] = x[b,c,h,w] + v[b,c]`.
    pub fn add_channel_map(&mut self, x: Var, v: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "add_channel_map: expected [b,c,h,w], got {:?}", s);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(self.shape(v), &[b, c], "add_channel_map: scalar map shape");
        let mut out = self.value(x).clone();
        {
            let vd = self.value(v).data().to_vec();
            let od = out.data_mut();
            for bc in 0..b * c {
                let add = vd[bc];
                for p in &mut od[bc * h * w..(bc + 1) * h * w] {
                    *p += add;
                }
            }
        }
        let (tx, tv) = (self.tracked(x), self.tracked(v));
        if !tx && !tv {
            return self.push_leaf(out, false);
        }
        self.push_node(
            out,
            vec![x, v],
            Box::new(move |g| {
                let gx = tx.then(|| g.clone());
                let gv = tv.then(|| {
                    let mut d = Tensor::zeros([b, c]);
                    for bc in 0..b * c {
                        let mut acc = 0.0f32;
                        for &p in &g.data()[bc * h * w..(bc + 1) * h * w] {
                            acc += p;
                        }
                        d.data_mut()[bc] = acc;
                    }
                    d
                });
                vec![gx, gv]
            }),
        )
    }

    /// Spatial average over `[b,c,h,w] -> [b,c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "spatial_mean: expected [b,c,h,w], got {:?}", s);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = (h * w) as f32;
        let mut out = Tensor::zeros([b, c]);
        {
            let xd = self.value(x).data();
            for bc in 0..b * c {
                let mut acc = 0.0f32;
                for &p in &xd[bc * h * w..(bc + 1) * h * w] {
                    acc += p;
                }
                out.data_mut()[bc] = acc / hw;
            }
        }
        if !self.tracked(x) {
            return self.push_leaf(out, false);
        }
        self.push_node(
            out,
            vec![x],
            Box::new(move |g| {
                let mut d = Tensor::zeros([b, c, h, w]);
                for bc in 0..b * c {
                    let v = g.data()[bc] / hw;
                    for p in &mut d.data_mut()[bc * h * w..(bc + 1) * h * w] {
                        *p = v;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Mean over the frame axis: `[b,t,f] -> [b,f]`.
    pub fn frame_mean(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "frame_mean: expected [b,t,f], got {:?}", s);
        let (b, t, f) = (s[0], s[1], s[2]);
        let tf = t as f32;
        let mut out = Tensor::zeros([b, f]);
        {
            let xd = self.value(x).data();
            for bi in 0..b {
                for ti in 0..t {
                    for fi in 0..f {
                        out.data_mut()[bi * f + fi] += xd[(bi * t + ti) * f + fi] / tf;
                    }
                }
            }
        }
        if !self.tracked(x) {
            return self.push_leaf(out, false);
        }
        self.push_node(
            out,
            vec![x],
            Box::new(move |g| {
                let mut d = Tensor::zeros([b, t, f]);
                for bi in 0..b {
                    for ti in 0..t {
                        for fi in 0..f {
                            d.data_mut()[(bi * t + ti) * f + fi] = g.data()[bi * f + fi] / tf;
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Mix frames with a learned `[t,t]` matrix plus per-frame bias:
    /// `out[b,t,f] = sum_s w[t,s] * x[b,s,f] + bias[t]`.
    pub fn temporal_mix(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "temporal_mix: expected [b,t,f], got {:?}", s);
        let (b, t, f) = (s[0], s[1], s[2]);
        assert_eq!(self.shape(w), &[t, t], "temporal_mix: weight shape");
        assert_eq!(self.shape(bias), &[t], "temporal_mix: bias shape");
        let mut out = Tensor::zeros([b, t, f]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(bias).data();
            let od = out.data_mut();
            for bi in 0..b {
                for ti in 0..t {
                    let dst = &mut od[(bi * t + ti) * f..(bi * t + ti + 1) * f];
                    for v in dst.iter_mut() {
                        *v = bd[ti];
                    }
                    for si in 0..t {
                        let wv = wd[ti * t + si];
                        let src = &xd[(bi * t + si) * f..(bi * t + si + 1) * f];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
        let (tx, tw, tb) = (self.tracked(x), self.tracked(w), self.tracked(bias));
        if !tx && !tw && !tb {
            return self.push_leaf(out, false);
        }
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        self.push_node(
            out,
            vec![x, w, bias],
            Box::new(move |g| {
                let gd = g.data();
                let gx = tx.then(|| {
                    let mut d = Tensor::zeros([b, t, f]);
                    let dd = d.data_mut();
                    for bi in 0..b {
                        for si in 0..t {
                            let dst = &mut dd[(bi * t + si) * f..(bi * t + si + 1) * f];
                            for ti in 0..t {
                                let w_ts = wv.data()[ti * t + si];
                                let src = &gd[(bi * t + ti) * f..(bi * t + ti + 1) * f];
                                for (dv, &sv) in dst.iter_mut().zip(src) {
                                    *dv += w_ts * sv;
                                }
                            }
                        }
                    }
                    d
                });
                let gw = tw.then(|| {
                    let mut d = Tensor::zeros([t, t]);
                    for bi in 0..b {
                        for ti in 0..t {
                            for si in 0..t {
                                let mut acc = 0.0f32;
                                let gr = &gd[(bi * t + ti) * f..(bi * t + ti + 1) * f];
                                let xr = &xv.data()[(bi * t + si) * f..(bi * t + si + 1) * f];
                                for (gv, xvv) in gr.iter().zip(xr) {
                                    acc += gv * xvv;
                                }
                                d.data_mut()[ti * t + si] += acc;
                            }
                        }
                    }
                    d
                });
                let gb = tb.then(|| {
                    let mut d = Tensor::zeros([t]);
                    for bi in 0..b {
                        for ti in 0..t {
                            let mut acc = 0.0f32;
                            for &gv in &gd[(bi * t + ti) * f..(bi * t + ti + 1) * f] {
                                acc += gv;
                            }
                            d.data_mut()[ti] += acc;
                        }
                    }
                    d
                });
                vec![gx, gw, gb]
            }),
        )
    }

    // ───────────────────────── embeddings ─────────────────────────

    /// Look up one row of an embedding table per sample. Backward scatters
    /// gradients into the selected rows.
    pub fn embed_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let s = self.shape(table).to_vec();
        assert_eq!(s.len(), 2, "embed_rows: table must be [rows, dim]");
        let (r, c) = (s[0], s[1]);
        for &i in idx {
            assert!(i < r, "embed_rows: index {} out of {} rows", i, r);
        }
        let b = idx.len();
        let mut out = Tensor::zeros([b, c]);
        {
            let td = self.value(table).data();
            for (bi, &i) in idx.iter().enumerate() {
                out.data_mut()[bi * c..(bi + 1) * c].copy_from_slice(&td[i * c..(i + 1) * c]);
            }
        }
        if !self.tracked(table) {
            return self.push_leaf(out, false);
        }
        let idx = idx.to_vec();
        self.push_node(
            out,
            vec![table],
            Box::new(move |g| {
                let mut d = Tensor::zeros([r, c]);
                for (bi, &i) in idx.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * c..(i + 1) * c];
                    let src = &g.data()[bi * c..(bi + 1) * c];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Sinusoidal features of a scalar per sample: `[b] -> [b, dim]` with
    /// `dim/2` sine and `dim/2` cosine components at geometrically spaced
    /// frequencies in `[1, 40]`. Differentiable in the input, so it also
    /// serves as a smooth encoding for scalar conditioning values.
    pub fn sin_embed(&mut self, t: Var, dim: usize) -> Var {
        assert!(dim >= 2 && dim % 2 == 0, "sin_embed: dim must be even and >= 2");
        let s = self.shape(t).to_vec();
        assert_eq!(s.len(), 1, "sin_embed: expected [b], got {:?}", s);
        let b = s[0];
        let half = dim / 2;
        let freqs = sin_embed_freqs(half);
        let mut out = Tensor::zeros([b, dim]);
        {
            let td = self.value(t).data();
            for bi in 0..b {
                for (i, &fq) in freqs.iter().enumerate() {
                    let arg = td[bi] * fq;
                    out.data_mut()[bi * dim + i] = arg.sin();
                    out.data_mut()[bi * dim + half + i] = arg.cos();
                }
            }
        }
        if !self.tracked(t) {
            return self.push_leaf(out, false);
        }
        let tv = self.value(t).clone();
        self.push_node(
            out,
            vec![t],
            Box::new(move |g| {
                let mut d = Tensor::zeros([b]);
                for bi in 0..b {
                    let mut acc = 0.0f32;
                    for (i, &fq) in freqs.iter().enumerate() {
                        let arg = tv.data()[bi] * fq;
                        acc += g.data()[bi * dim + i] * fq * arg.cos();
                        acc -= g.data()[bi * dim + half + i] * fq * arg.sin();
                    }
                    d.data_mut()[bi] = acc;
                }
                vec![Some(d)]
            }),
        )
    }

    // ───────────────────────── composites ─────────────────────────

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Binary cross-entropy with logits against constant targets, averaged:
    /// `mean(softplus(x) - x * y)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Var {
        let sp = self.softplus(logits);
        let xy = self.mul(logits, targets);
        let diff = self.sub(sp, xy);
        self.mean_all(diff)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ───────────────────────── scalar + raw kernels ─────────────────────────

pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Geometric frequency ladder for [`Tape::sin_embed`]. The top frequency is
/// kept modest (40 rad/unit) so finite-difference gradient checks with
/// h = 1e-3 stay accurate.
pub(crate) fn sin_embed_freqs(half: usize) -> Vec<f32> {
    const MAX_FREQ: f32 = 40.0;
    (0..half)
        .map(|i| {
            if half == 1 {
                1.0
            } else {
                (MAX_FREQ.ln() * i as f32 / (half - 1) as f32).exp()
            }
        })
        .collect()
}

fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let br = &b[p * n..(p + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m,n] x b^T [k,n] -> [m,k]` (i.e. `a @ b.T`).
fn matmul_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        for j in 0..k {
            let ar = &a[i * n..(i + 1) * n];
            let br = &b[j * n..(j + 1) * n];
            let mut acc = 0.0f32;
            for (&av, &bv) in ar.iter().zip(br) {
                acc += av * bv;
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// `a^T [m,k] x b [m,n] -> [k,n]` (i.e. `a.T @ b`).
fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let br = &b[i * n..(i + 1) * n];
            let or = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

fn conv_out_size(input: usize, stride: usize) -> usize {
    // kernel 3, padding 1
    if stride == 1 {
        input
    } else {
        (input - 1) / 2 + 1
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let o = w.shape()[0];
    let (oh, ow) = (conv_out_size(h, stride), conv_out_size(wd, stride));
    let mut out = Tensor::zeros([b, o, oh, ow]);
    let xd = x.data();
    let wv = w.data();
    let bd = bias.data();
    let od = out.data_mut();
    for bi in 0..b {
        for oi in 0..o {
            let omap = &mut od[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
            for v in omap.iter_mut() {
                *v = bd[oi];
            }
            for ci in 0..c {
                let xmap = &xd[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                for kh in 0..3usize {
                    for kw in 0..3usize {
                        let wgt = wv[((oi * c + ci) * 3 + kh) * 3 + kw];
                        if wgt == 0.0 {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * stride + kh) as isize - 1;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = &xmap[ih as usize * wd..(ih as usize + 1) * wd];
                            let orow = &mut omap[ohi * ow..(ohi + 1) * ow];
                            for (owi, ov) in orow.iter_mut().enumerate() {
                                let iw = (owi * stride + kw) as isize - 1;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                *ov += wgt * xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    g: &Tensor,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let o = w.shape()[0];
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let mut gx = need_x.then(|| Tensor::zeros([b, c, h, wd]));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape().to_vec()));
    let mut gb = need_b.then(|| Tensor::zeros([o]));
    let xd = x.data();
    let wv = w.data();
    let gd = g.data();
    for bi in 0..b {
        for oi in 0..o {
            let gmap = &gd[(bi * o + oi) * oh * ow..(bi * o + oi + 1) * oh * ow];
            if let Some(gb) = gb.as_mut() {
                let mut acc = 0.0f32;
                for &v in gmap {
                    acc += v;
                }
                gb.data_mut()[oi] += acc;
            }
            if gx.is_none() && gw.is_none() {
                continue;
            }
            for ci in 0..c {
                let xmap = &xd[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                for kh in 0..3usize {
                    for kw in 0..3usize {
                        let widx = ((oi * c + ci) * 3 + kh) * 3 + kw;
                        let mut wacc = 0.0f32;
                        let wgt = wv[widx];
                        for ohi in 0..oh {
                            let ih = (ohi * stride + kh) as isize - 1;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let ih = ih as usize;
                            let grow = &gmap[ohi * ow..(ohi + 1) * ow];
                            for (owi, &gvv) in grow.iter().enumerate() {
                                let iw = (owi * stride + kw) as isize - 1;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                let iw = iw as usize;
                                if gw.is_some() {
                                    wacc += gvv * xmap[ih * wd + iw];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    gx.data_mut()[(bi * c + ci) * h * wd + ih * wd + iw] +=
                                        wgt * gvv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw.data_mut()[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
