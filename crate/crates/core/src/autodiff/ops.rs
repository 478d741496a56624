//! Forward definitions of the differentiable ops. Each op records itself on
//! the tape; its backward rule lives in `tape.rs`.

use super::kernels::{self, ConvGeom, MatRef};
use super::params::{ParamId, ParamStore};
use super::tape::{bn_layout, permute_data, sigmoid, split_axis, BnUpdate, Mode, Op, Tape, Var, SELU_ALPHA, SELU_SCALE};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Running statistics consulted (eval) or updated (train) by [`Tape::batch_norm`].
#[derive(Clone, Copy)]
pub struct BnStats<'a> {
    pub store: &'a ParamStore,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl Tape {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    fn check_last(&self, x: Var, v: Var, what: &str) -> Result<usize> {
        let d = self.shape(v);
        let last = self.shape(x).last().copied();
        if d.len() != 1 || last != Some(d[0]) {
            return Err(Error::dim(format!(
                "{what}: vector {:?} does not match last axis of {:?}",
                d,
                self.shape(x)
            )));
        }
        Ok(d[0])
    }

    /// `x * w` with `w` broadcast along the last axis of `x`.
    pub fn mul_last(&mut self, x: Var, w: Var) -> Result<Var> {
        let d = self.check_last(x, w, "mul_last")?;
        let wv = self.value(w).to_vec();
        let value = self.value(x).iter().enumerate().map(|(i, v)| v * wv[i % d]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, w]);
        Ok(self.push(shape, value, Op::MulLast(x, w), rg))
    }

    /// `x + b` with `b` broadcast along the last axis of `x`.
    pub fn add_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.check_last(x, b, "add_last")?;
        let bv = self.value(b).to_vec();
        let value = self.value(x).iter().enumerate().map(|(i, v)| v + bv[i % d]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        Ok(self.push(shape, value, Op::AddLast(x, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(MatRef::new(self.value(a), m, k), MatRef::new(self.value(b), k, n), 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Batched product of `a [B, M, K]` with `b [B, K, N]`, or with
    /// `b [B, N, K]` transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::dim(format!("bmm: {sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            let ai = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let bi = if trans_b { MatRef::new(bi, n, k).t() } else { MatRef::new(bi, k, n) };
            kernels::gemm(ai, bi, 0.0, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![batch, m, n], out, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Scaled exponential linear unit.
    pub fn selu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Selu(a), selu)
    }

    /// `max(x, lo)`; gradient passes only where `x > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("softmax on a scalar"))?;
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::Softmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::MeanAll(a), rg)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dim(format!("mean_axis: axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * len + l) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, out, Op::MeanAxis { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim(format!("reshape {:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("permute {perm:?} of {shape:?}")));
        }
        let value = permute_data(self.value(x), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, value, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim(format!("concat_last: {sa:?} and {sb:?}")));
        }
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut out = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        for (ra, rb) in self.value(a).chunks(da.max(1)).zip(self.value(b).chunks(db.max(1))) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = da + db;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::ConcatLast(a, b), rg))
    }

    /// 2-D cross-correlation of `x [B, C, H, W]` with `w [F, C, kh, kw]`,
    /// zero padding, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::dim(format!("conv2d: input {xs:?}, kernel {ws:?}")));
        }
        let (batch, filters) = (xs[0], ws[0]);
        let out_h = kernels::window_out(xs[2], ws[2], stride.0, padding.0);
        let out_w = kernels::window_out(xs[3], ws[3], stride.1, padding.1);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::dim(format!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                ws[2],
                ws[3],
                xs[2] + 2 * padding.0,
                xs[3] + 2 * padding.1
            )));
        };
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: ws[2],
            kw: ws[3],
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            out_h,
            out_w,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_size = geom.channels * geom.height * geom.width;
        let mut out = vec![0.0; batch * filters * cols];
        let mut col_buf = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
        let (xv, wv) = (self.value(x), self.value(w));
        for b in 0..batch {
            let xb = &xv[b * in_size..(b + 1) * in_size];
            let col: &[f64] = if geom.is_pointwise() {
                xb
            } else {
                kernels::im2col(xb, &geom, &mut col_buf);
                &col_buf
            };
            kernels::gemm(
                MatRef::new(wv, filters, rows),
                MatRef::new(col, rows, cols),
                0.0,
                &mut out[b * filters * cols..(b + 1) * filters * cols],
            );
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(vec![batch, filters, out_h, out_w], out, Op::Conv2d { x, w, geom }, rg))
    }

    /// Max pooling over `[B, C, H, W]`; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim(format!("max_pool2d: input {xs:?}")));
        }
        if padding.0 >= kernel.0 || padding.1 >= kernel.1 {
            return Err(Error::dim("max_pool2d: padding must be smaller than the window"));
        }
        let (h, w) = (xs[2], xs[3]);
        let oh = kernels::window_out(h, kernel.0, stride.0, padding.0);
        let ow = kernels::window_out(w, kernel.1, stride.1, padding.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::dim(format!(
                "max_pool2d: window {kernel:?} larger than padded input {}x{}",
                h + 2 * padding.0,
                w + 2 * padding.1
            )));
        };
        let planes = xs[0] * xs[1];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for di in 0..kernel.0 {
                        let r = (i * stride.0 + di) as isize - padding.0 as isize;
                        if r < 0 || r as usize >= h {
                            continue;
                        }
                        for dj in 0..kernel.1 {
                            let c = (j * stride.1 + dj) as isize - padding.1 as isize;
                            if c < 0 || c as usize >= w {
                                continue;
                            }
                            let idx = base + r as usize * w + c as usize;
                            // Strict comparison keeps the first row-major index on ties.
                            if xv[idx] > best || best_idx == usize::MAX {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![xs[0], xs[1], oh, ow], out, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Average `[B, C, H, W]` onto a fixed `(out_h, out_w)` grid.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, grid: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || grid.0 == 0 || grid.1 == 0 || xs[2] == 0 || xs[3] == 0 {
            return Err(Error::dim(format!("adaptive_avg_pool2d: input {xs:?} to {grid:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = grid;
        let mut out = Vec::with_capacity(xs[0] * xs[1] * oh * ow);
        for plane in self.value(x).chunks(h * w) {
            for i in 0..oh {
                let (h0, h1) = kernels::adaptive_window(i, h, oh);
                for j in 0..ow {
                    let (w0, w1) = kernels::adaptive_window(j, w, ow);
                    let mut s = 0.0;
                    for r in h0..h1 {
                        s += plane[r * w + w0..r * w + w1].iter().sum::<f64>();
                    }
                    out.push(s / ((h1 - h0) * (w1 - w0)) as f64);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![xs[0], xs[1], oh, ow], out, Op::AdaptiveAvgPool2d(x), rg))
    }

    /// Batch normalisation over `[M, C]` or `[B, C, H, W]` (per channel, all
    /// other axes pooled). Train mode normalises with batch statistics and
    /// records a running-statistics update; eval mode uses the running values.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<'_>, mode: Mode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(Error::dim(format!("batch_norm: input {shape:?}")));
        }
        let (outer, ch, inner) = bn_layout(&shape);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::dim(format!("batch_norm: affine params do not match {ch} channels")));
        }
        let count = outer * inner;
        let xv = self.value(x);
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batch norm in train mode needs at least 2 samples per channel, got {count}"
                    )));
                }
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        mean[c] += xv[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        var[c] += xv[base..base + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                let unbiased = var.iter().map(|v| v / (count - 1) as f64).collect();
                var.iter_mut().for_each(|v| *v /= count as f64);
                self.record_bn_update(BnUpdate {
                    running_mean: stats.running_mean,
                    running_var: stats.running_var,
                    batch_mean: mean.clone(),
                    batch_var_unbiased: unbiased,
                });
                (mean, var)
            }
            Mode::Eval => (
                stats.store.value(stats.running_mean).to_vec(),
                stats.store.value(stats.running_var).to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let xv = self.value(x);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = gv[c] * xhat[i] + bv[c];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == Mode::Train,
        };
        Ok(self.push(shape, out, op, rg))
    }

    /// Mean binary cross-entropy of logits `z [B]` against labels in {0, 1},
    /// in the overflow-free form `max(z,0) - z*y + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        let zv = self.value(z);
        if zv.len() != labels.len() || zv.is_empty() {
            return Err(Error::dim(format!("bce: {} logits vs {} labels", zv.len(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Contract(format!("bce label must be 0 or 1, got {bad}")));
        }
        if zv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("bce logits must be finite".into()));
        }
        let loss = zv
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / zv.len() as f64;
        let rg = self.rg(&[z]);
        Ok(self.push(vec![], vec![loss], Op::BceWithLogits { z, labels: labels.to_vec() }, rg))
    }
}

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_SCALE * x
    } else {
        SELU_SCALE * SELU_ALPHA * x.exp_m1()
    }
}
