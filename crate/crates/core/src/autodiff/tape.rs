use std::sync::Arc;

use super::kernels::{self, ConvGeom, MatRef};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Forward-pass behaviour of layers with train/eval differences (batch norm).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
    pub op: Op,
    pub requires_grad: bool,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulLast(Var, Var),
    AddLast(Var, Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    Selu(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanAxis { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    ConcatLast(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AdaptiveAvgPool2d(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    BceWithLogits { z: Var, labels: Vec<f64> },
}

/// Ordered record of executed operations.
///
/// Values are computed eagerly as ops are recorded; [`Tape::backward`] replays
/// the record in reverse. A tape is meant for a single forward/backward pass
/// and is dropped afterwards.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    param_leaves: Vec<(Var, ParamId)>,
    bn_updates: Vec<BnUpdate>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    /// Bind a stored parameter as a leaf. The value is shared, not copied.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            shape: p.shape().to_vec(),
            value: p.shared_value(),
            op: Op::Leaf,
            requires_grad: p.requires_grad(),
        });
        let var = Var(self.nodes.len() - 1);
        if p.requires_grad() {
            self.param_leaves.push((var, id));
        }
        var
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!("expected a scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.param_leaves.iter().copied()
    }

    pub(crate) fn record_bn_update(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub(crate) fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Reverse-mode pass from a scalar `loss`.
    ///
    /// Visits every recorded op once, newest first. Only gradients of leaves
    /// are retained in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !loss_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn backward_op(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        let out = node.value.as_slice();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, &mut |ga| {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)),
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::MulLast(x, w) => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let d = wv.len();
                acc(*x, &mut |gx| {
                    for (i, (dst, gi)) in gx.iter_mut().zip(g).enumerate() {
                        *dst += gi * wv[i % d];
                    }
                });
                acc(*w, &mut |gw| {
                    for (i, gi) in g.iter().enumerate() {
                        gw[i % d] += gi * xv[i];
                    }
                });
            }
            Op::AddLast(x, b) => {
                let d = self.val(*b).len();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, &mut |ga| {
                    kernels::gemm(MatRef::new(g, m, n), MatRef::new(bv, k, n).t(), 1.0, ga)
                });
                acc(*b, &mut |gb| {
                    kernels::gemm(MatRef::new(av, m, k).t(), MatRef::new(g, m, n), 1.0, gb)
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let bt = if *trans_b {
                            MatRef::new(bi, n, k)
                        } else {
                            MatRef::new(bi, k, n).t()
                        };
                        kernels::gemm(MatRef::new(gi, m, n), bt, 1.0, &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // d(b) [n x k] = gᵀ @ a
                            kernels::gemm(MatRef::new(gi, m, n).t(), MatRef::new(ai, m, k), 1.0, dst);
                        } else {
                            kernels::gemm(MatRef::new(ai, m, k).t(), MatRef::new(gi, m, n), 1.0, dst);
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |ga| zip3(ga, g, out, |gi, y| gi * y)),
            Op::Log(a) => {
                let av = self.val(*a);
                acc(*a, &mut |ga| zip3(ga, g, av, |gi, x| gi / x));
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| zip3(ga, g, out, |gi, y| gi * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, &mut |ga| zip3(ga, g, out, |gi, y| gi * (1.0 - y * y))),
            Op::Sqrt(a) => acc(*a, &mut |ga| zip3(ga, g, out, |gi, y| gi * 0.5 / y)),
            Op::Selu(a) => {
                let av = self.val(*a);
                acc(*a, &mut |ga| {
                    for (((d, gi), x), y) in ga.iter_mut().zip(g).zip(av).zip(out) {
                        *d += if *x > 0.0 {
                            gi * SELU_SCALE
                        } else {
                            gi * (y + SELU_SCALE * SELU_ALPHA)
                        };
                    }
                });
            }
            Op::ClampMin(a, lo) => {
                let av = self.val(*a);
                acc(*a, &mut |ga| zip3(ga, g, av, |gi, x| if x > *lo { gi } else { 0.0 }));
            }
            Op::Softmax(a) => {
                let d = *node.shape.last().unwrap();
                acc(*a, &mut |ga| {
                    for ((dst, gr), yr) in ga.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum();
                        for ((di, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *di += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanAll(a) => {
                let n = self.val(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanAxis { x, axis } => {
                let shape = &self.nodes[x.0].shape;
                let (outer, len, inner) = split_axis(shape, *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += g[o * inner + i] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, &node.shape, &inverse);
                acc(*x, &mut |gx| add_into(gx, &back));
            }
            Op::ConcatLast(a, b) => {
                let da = *self.nodes[a.0].shape.last().unwrap();
                let db = *self.nodes[b.0].shape.last().unwrap();
                acc(*a, &mut |ga| {
                    for (dst, src) in ga.chunks_mut(da).zip(g.chunks(da + db)) {
                        add_into(dst, &src[..da]);
                    }
                });
                acc(*b, &mut |gb| {
                    for (dst, src) in gb.chunks_mut(db).zip(g.chunks(da + db)) {
                        add_into(dst, &src[da..]);
                    }
                });
            }
            Op::Conv2d { x, w, geom } => self.conv2d_backward(*x, *w, geom, g, grads),
            Op::MaxPool2d { x, argmax } => acc(*x, &mut |gx| {
                for (gi, &src) in g.iter().zip(argmax) {
                    gx[src] += gi;
                }
            }),
            Op::AdaptiveAvgPool2d(x) => {
                let s = &self.nodes[x.0].shape;
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                acc(*x, &mut |gx| {
                    for (plane_in, plane_out) in gx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                        for i in 0..oh {
                            let (h0, h1) = kernels::adaptive_window(i, h, oh);
                            for j in 0..ow {
                                let (w0, w1) = kernels::adaptive_window(j, w, ow);
                                let share = plane_out[i * ow + j] / ((h1 - h0) * (w1 - w0)) as f64;
                                for r in h0..h1 {
                                    for c in w0..w1 {
                                        plane_in[r * w + c] += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (outer, ch, inner) = bn_layout(&node.shape);
                let count = (outer * inner) as f64;
                let gamma_v = self.val(*gamma);
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in base..base + inner {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * xhat[i];
                        }
                    }
                }
                acc(*gamma, &mut |gg| add_into(gg, &sum_gx));
                acc(*beta, &mut |gb| add_into(gb, &sum_g));
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * inner;
                            let k = gamma_v[c] * inv_std[c];
                            for i in base..base + inner {
                                gx[i] += if *train {
                                    k / count * (count * g[i] - sum_g[c] - xhat[i] * sum_gx[c])
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::BceWithLogits { z, labels } => {
                let zv = self.val(*z);
                let n = zv.len() as f64;
                acc(*z, &mut |gz| {
                    for ((d, zi), yi) in gz.iter_mut().zip(zv).zip(labels) {
                        *d += g[0] * (sigmoid(*zi) - yi) / n;
                    }
                });
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, geom: &ConvGeom, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let xs = &self.nodes[x.0].shape;
        let batch = xs[0];
        let filters = self.nodes[w.0].shape[0];
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_size = geom.channels * geom.height * geom.width;
        let xv = self.val(x);
        let wv = self.val(w);
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;

        let mut gw = need_w.then(|| vec![0.0; wv.len()]);
        let mut gx = need_x.then(|| vec![0.0; xv.len()]);
        let mut col_buf = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
        let mut dcol_buf = if geom.is_pointwise() || !need_x { Vec::new() } else { vec![0.0; rows * cols] };

        for b in 0..batch {
            let xb = &xv[b * in_size..(b + 1) * in_size];
            let gb = &g[b * filters * cols..(b + 1) * filters * cols];
            if let Some(gw) = gw.as_mut() {
                let col: &[f64] = if geom.is_pointwise() {
                    xb
                } else {
                    kernels::im2col(xb, geom, &mut col_buf);
                    &col_buf
                };
                kernels::gemm(MatRef::new(gb, filters, cols), MatRef::new(col, rows, cols).t(), 1.0, gw);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[b * in_size..(b + 1) * in_size];
                if geom.is_pointwise() {
                    kernels::gemm(MatRef::new(wv, filters, rows).t(), MatRef::new(gb, filters, cols), 1.0, dst);
                } else {
                    kernels::gemm(
                        MatRef::new(wv, filters, rows).t(),
                        MatRef::new(gb, filters, cols),
                        0.0,
                        &mut dcol_buf,
                    );
                    kernels::col2im_add(&dcol_buf, geom, dst);
                }
            }
        }
        if let Some(gw) = gw {
            let slot = grads[w.0].get_or_insert_with(|| vec![0.0; gw.len()]);
            add_into(slot, &gw);
        }
        if let Some(gx) = gx {
            let slot = grads[x.0].get_or_insert_with(|| vec![0.0; gx.len()]);
            add_into(slot, &gx);
        }
    }
}

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip3(dst: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, gi), o) in dst.iter_mut().zip(g).zip(other) {
        *d += f(*gi, *o);
    }
}

/// `(outer, len, inner)` sizes around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `(outer, channels, inner)` for batch-norm inputs `[M, C]` or `[B, C, H, W]`.
pub(crate) fn bn_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
