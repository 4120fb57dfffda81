//! Reverse-mode automatic differentiation over f64 tensors.
//!
//! A `Graph` is a tape: each op validates shapes, computes its value eagerly,
//! and records what backward needs. `backward` walks the tape in reverse from
//! a scalar root and accumulates gradients per node. Binding the same
//! parameter node at several use sites is how parameter sharing works: all
//! uses accumulate into one gradient buffer.
//!
//! Debug builds check every op output for NaN/Inf and panic with the op name.

use super::kernels;
use super::tensor::Tensor;
use super::NnError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, k: f64 },
    Matmul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Deconv2d { x: Var, w: Var, b: Var, stride: usize },
    Relu(Var),
    GlobalAvgPool(Var),
    Concat { parts: Vec<Var> },
    StackRows { parts: Vec<Var> },
    SoftmaxRows(Var),
    OuterSum { col: Var, row: Var },
    SmoothL1 { pred: Var, target: Var },
    BceWithLogits { logit: Var, target: Var },
    Sum(Var),
    Reshape(Var),
    MaxPoolSegments { x: Var, argmax: Vec<usize> },
    ScatterCells { x: Var, cells: Vec<(usize, usize)> },
    RoiAlign { feat: Var, samples: Vec<(f64, f64)> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(usize, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a rank-1 length-1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value.data()[0]
    }

    /// (parameter slot, node) pairs bound into this graph.
    pub fn param_vars(&self) -> &[(usize, Var)] {
        &self.params
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // Non-finite values are not trapped here: they propagate through the
    // arithmetic and are caught where a loss or score is consumed, which
    // keeps divergence reportable instead of abortive.
    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Parameter leaf. `slot` identifies the tensor in the caller's store;
    /// bind each parameter at most once per graph and reuse the returned
    /// `Var` so shared uses accumulate into one gradient.
    pub fn param_leaf(&mut self, slot: usize, value: Tensor) -> Var {
        let v = self.push(Op::Param, value, true);
        self.params.push((slot, v));
        v
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), NnError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NnError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), data, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), data, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), data, needs))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            *v *= k;
        }
        let needs = self.needs(x);
        self.push(Op::Scale { x, k }, t, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let needs = self.needs(x);
        self.push(Op::Relu(x), t, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(s), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let t = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), t, needs))
    }

    /// a: (m, k), b: (k, n) -> (m, n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::from_vec(&[m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, t, needs))
    }

    /// Broadcasts `b` (rank 1) over the trailing axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sb.len() != 1 || sx.is_empty() || *sx.last().unwrap() != sb[0] {
            return Err(NnError::ShapeMismatch {
                op: "add_bias",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let c = sb[0];
        let mut t = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += bd[i % c];
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBias { x, b }, t, needs))
    }

    /// Fully connected layer. `x` may be rank 1 (a single row) or rank 2;
    /// `w` is (in, out), `b` is (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let rank1 = self.value(x).shape().len() == 1;
        let x2 = if rank1 {
            let n = self.value(x).len();
            self.reshape(x, &[1, n])?
        } else {
            x
        };
        let y = self.matmul(x2, w)?;
        let y = self.add_bias(y, b)?;
        if rank1 {
            let n = self.value(y).shape()[1];
            self.reshape(y, &[n])
        } else {
            Ok(y)
        }
    }

    /// 2-D convolution over an HWC image with zero padding.
    /// `w`: (kh, kw, in_c, out_c), `b`: (out_c).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NnError> {
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sx.len() != 3 || sw.len() != 4 || sx[2] != sw[2] {
            return Err(NnError::ShapeMismatch { op: "conv2d", left: sx, right: sw });
        }
        if sb.len() != 1 || sb[0] != sw[3] {
            return Err(NnError::ShapeMismatch { op: "conv2d bias", left: sw, right: sb });
        }
        let (h, wid, ic) = (sx[0], sx[1], sx[2]);
        let (kh, kw, oc) = (sw[0], sw[1], sw[3]);
        if h + 2 * pad < kh || wid + 2 * pad < kw || stride == 0 {
            return Err(NnError::BadShape {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} stride {stride} too large for {h}x{wid} pad {pad}"),
            });
        }
        let oh = kernels::conv_out_side(h, kh, stride, pad);
        let ow = kernels::conv_out_side(wid, kw, stride, pad);
        let cols = kernels::im2col(self.value(x).data(), h, wid, ic, kh, kw, stride, pad);
        let mut out = vec![0.0; oh * ow * oc];
        let bd = self.value(b).data();
        for row in out.chunks_exact_mut(oc) {
            row.copy_from_slice(bd);
        }
        kernels::matmul_acc(&mut out, &cols, self.value(w).data(), oh * ow, kh * kw * ic, oc);
        let t = Tensor::from_vec(&[oh, ow, oc], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, t, needs))
    }

    /// Transposed convolution (upsampling). `w`: (kh, kw, in_c, out_c);
    /// output side = (in - 1) * stride + kernel.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, NnError> {
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sx.len() != 3 || sw.len() != 4 || sx[2] != sw[2] {
            return Err(NnError::ShapeMismatch { op: "deconv2d", left: sx, right: sw });
        }
        if sb.len() != 1 || sb[0] != sw[3] {
            return Err(NnError::ShapeMismatch { op: "deconv2d bias", left: sw, right: sb });
        }
        if stride == 0 {
            return Err(NnError::BadShape { op: "deconv2d", detail: "stride 0".into() });
        }
        let (h, wid, ic) = (sx[0], sx[1], sx[2]);
        let (kh, kw, oc) = (sw[0], sw[1], sw[3]);
        let (oh, ow) = ((h - 1) * stride + kh, (wid - 1) * stride + kw);
        let mut out = vec![0.0; oh * ow * oc];
        let bd = self.value(b).data();
        for row in out.chunks_exact_mut(oc) {
            row.copy_from_slice(bd);
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for iy in 0..h {
            for ix in 0..wid {
                let xin = &xd[(iy * wid + ix) * ic..(iy * wid + ix + 1) * ic];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let o = ((iy * stride + ky) * ow + ix * stride + kx) * oc;
                        let dst = &mut out[o..o + oc];
                        for (ci, &xv) in xin.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &wd[((ky * kw + kx) * ic + ci) * oc..][..oc];
                            for (dv, &wv) in dst.iter_mut().zip(wrow) {
                                *dv += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[oh, ow, oc], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Deconv2d { x, w, b, stride }, t, needs))
    }

    /// HWC -> C, averaging over the spatial grid.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(NnError::BadShape {
                op: "global_avg_pool",
                detail: format!("want rank 3, got {s:?}"),
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut acc = vec![0.0; c];
        for px in self.value(x).data().chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        let inv = 1.0 / (h * w) as f64;
        for a in &mut acc {
            *a *= inv;
        }
        let t = Tensor::from_vec(&[c], acc)?;
        let needs = self.needs(x);
        Ok(self.push(Op::GlobalAvgPool(x), t, needs))
    }

    /// Concatenation along the trailing axis. All leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(NnError::BadShape { op: "concat", detail: "no parts".into() });
        }
        let lead = self.value(parts[0]).shape()
            [..self.value(parts[0]).shape().len() - 1]
            .to_vec();
        let mut total_c = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(NnError::ShapeMismatch {
                    op: "concat",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: s.to_vec(),
                });
            }
            total_c += *s.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total_c];
        let mut offset = 0;
        for &p in parts {
            let c = *self.value(p).shape().last().unwrap();
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total_c + offset..r * total_c + offset + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let mut shape = lead;
        shape.push(total_c);
        let t = Tensor::from_vec(&shape, out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, t, needs))
    }

    /// Stacks rank-1 tensors of equal length into a (n, len) matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(NnError::BadShape { op: "stack_rows", detail: "no parts".into() });
        }
        let len = self.value(parts[0]).len();
        let mut out = Vec::with_capacity(parts.len() * len);
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 1 || s[0] != len {
                return Err(NnError::ShapeMismatch {
                    op: "stack_rows",
                    left: vec![len],
                    right: s.to_vec(),
                });
            }
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::from_vec(&[parts.len(), len], out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::StackRows { parts: parts.to_vec() }, t, needs))
    }

    /// Row-wise stabilized softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(NnError::BadShape {
                op: "softmax",
                detail: format!("want rank 2, got {s:?}"),
            });
        }
        let cols = s[1];
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxRows(x), t, needs))
    }

    /// y[i][j] = col[i] + row[j] for rank-1 inputs of equal length n.
    pub fn outer_sum(&mut self, col: Var, row: Var) -> Result<Var, NnError> {
        let (sc, sr) = (self.value(col).shape(), self.value(row).shape());
        if sc.len() != 1 || sr.len() != 1 {
            return Err(NnError::ShapeMismatch {
                op: "outer_sum",
                left: sc.to_vec(),
                right: sr.to_vec(),
            });
        }
        let (n, m) = (sc[0], sr[0]);
        let mut out = vec![0.0; n * m];
        let (cd, rd) = (self.value(col).data(), self.value(row).data());
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = cd[i] + rd[j];
            }
        }
        let t = Tensor::from_vec(&[n, m], out)?;
        let needs = self.needs(col) || self.needs(row);
        Ok(self.push(Op::OuterSum { col, row }, t, needs))
    }

    /// Elementwise smooth L1: 0.5 e^2 for |e| < 1 else |e| - 0.5, e = pred - target.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        self.same_shape(pred, target, "smooth_l1")?;
        let data = zip_map(self.value(pred), self.value(target), |p, t| {
            let e = p - t;
            if e.abs() < 1.0 {
                0.5 * e * e
            } else {
                e.abs() - 0.5
            }
        });
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Op::SmoothL1 { pred, target }, data, needs))
    }

    /// Elementwise binary cross-entropy on logits, computed in stabilized
    /// form: max(z, 0) - z t + ln(1 + exp(-|z|)). Finite for all finite z.
    pub fn bce_with_logits(&mut self, logit: Var, target: Var) -> Result<Var, NnError> {
        self.same_shape(logit, target, "bce_with_logits")?;
        let data = zip_map(self.value(logit), self.value(target), |z, t| {
            z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
        });
        let needs = self.needs(logit) || self.needs(target);
        Ok(self.push(Op::BceWithLogits { logit, target }, data, needs))
    }

    /// Max over ragged row segments of a (n, c) tensor. `counts` gives each
    /// segment's row count and must sum to n. Empty segments pool to zero.
    pub fn max_pool_segments(&mut self, x: Var, counts: &[usize]) -> Result<Var, NnError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || counts.iter().sum::<usize>() != s[0] {
            return Err(NnError::BadShape {
                op: "max_pool_segments",
                detail: format!("counts sum {} vs {} rows", counts.iter().sum::<usize>(), s[0]),
            });
        }
        let c = s[1];
        let xd = self.value(x).data();
        let mut out = vec![0.0; counts.len() * c];
        let mut argmax = vec![usize::MAX; counts.len() * c];
        let mut row = 0;
        for (seg, &cnt) in counts.iter().enumerate() {
            for ch in 0..c {
                let (mut best, mut best_row) = (f64::NEG_INFINITY, usize::MAX);
                for r in row..row + cnt {
                    let v = xd[r * c + ch];
                    if v > best {
                        best = v;
                        best_row = r;
                    }
                }
                if cnt > 0 {
                    out[seg * c + ch] = best;
                    argmax[seg * c + ch] = best_row;
                }
            }
            row += cnt;
        }
        let t = Tensor::from_vec(&[counts.len(), c], out)?;
        let needs = self.needs(x);
        Ok(self.push(Op::MaxPoolSegments { x, argmax }, t, needs))
    }

    /// Scatters rows of a (p, c) tensor into an (h, w, c) grid at the given
    /// distinct cells; untouched cells stay zero.
    pub fn scatter_cells(
        &mut self,
        x: Var,
        cells: &[(usize, usize)],
        h: usize,
        w: usize,
    ) -> Result<Var, NnError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || s[0] != cells.len() {
            return Err(NnError::BadShape {
                op: "scatter_cells",
                detail: format!("{} rows vs {} cells", s.first().copied().unwrap_or(0), cells.len()),
            });
        }
        let c = s[1];
        if let Some(&(r, q)) = cells.iter().find(|&&(r, q)| r >= h || q >= w) {
            return Err(NnError::BadShape {
                op: "scatter_cells",
                detail: format!("cell ({r}, {q}) outside {h}x{w}"),
            });
        }
        let mut out = vec![0.0; h * w * c];
        let xd = self.value(x).data();
        for (p, &(r, q)) in cells.iter().enumerate() {
            out[(r * w + q) * c..(r * w + q + 1) * c].copy_from_slice(&xd[p * c..(p + 1) * c]);
        }
        let t = Tensor::from_vec(&[h, w, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(Op::ScatterCells { x, cells: cells.to_vec() }, t, needs))
    }

    /// Bilinear crop of an HWC feature map at `s x s` sample points.
    ///
    /// Sample coordinates are continuous (row, col) positions in cell units;
    /// the value of cell (r, c) sits at (r + 0.5, c + 0.5). Samples outside
    /// the map clamp to the border. Differentiable w.r.t. the feature map.
    pub fn roi_align(&mut self, feat: Var, samples: &[(f64, f64)], s: usize) -> Result<Var, NnError> {
        let sf = self.value(feat).shape().to_vec();
        if sf.len() != 3 {
            return Err(NnError::BadShape {
                op: "roi_align",
                detail: format!("want rank-3 feature map, got {sf:?}"),
            });
        }
        if samples.len() != s * s {
            return Err(NnError::BadShape {
                op: "roi_align",
                detail: format!("{} samples for {s}x{s} grid", samples.len()),
            });
        }
        let (h, w, c) = (sf[0], sf[1], sf[2]);
        let fd = self.value(feat).data();
        let mut out = vec![0.0; s * s * c];
        for (i, &(u, v)) in samples.iter().enumerate() {
            let taps = bilinear_taps(u, v, h, w);
            let dst = &mut out[i * c..(i + 1) * c];
            for &(r, q, wt) in &taps {
                let src = &fd[(r * w + q) * c..(r * w + q + 1) * c];
                for (d, &sv) in dst.iter_mut().zip(src) {
                    *d += wt * sv;
                }
            }
        }
        let t = Tensor::from_vec(&[s, s, c], out)?;
        let needs = self.needs(feat);
        Ok(self.push(Op::RoiAlign { feat, samples: samples.to_vec() }, t, needs))
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; nodes on
    /// no path to a gradient-requiring leaf are skipped.
    pub fn backward(&self, root: Var) -> Result<Gradients, NnError> {
        if self.value(root).len() != 1 {
            return Err(NnError::NonScalarRoot(self.value(root).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_into = |grads: &mut [Option<Tensor>], v: Var, update: &dyn Fn(&mut Tensor)| {
            if !self.needs(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
            update(slot);
        };

        match &self.nodes[id].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                add_into(grads, *a, &|t| axpy(t, 1.0, g.data()));
                add_into(grads, *b, &|t| axpy(t, 1.0, g.data()));
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, &|t| axpy(t, 1.0, g.data()));
                add_into(grads, *b, &|t| axpy(t, -1.0, g.data()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                add_into(grads, *a, &|t| {
                    for ((d, &gv), &o) in t.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *d += gv * o;
                    }
                });
                add_into(grads, *b, &|t| {
                    for ((d, &gv), &o) in t.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *d += gv * o;
                    }
                });
            }
            Op::Scale { x, k } => {
                add_into(grads, *x, &|t| axpy(t, *k, g.data()));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                add_into(grads, *x, &|t| {
                    for ((d, &gv), &o) in t.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        if o > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                add_into(grads, *x, &|t| {
                    for d in t.data_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Reshape(x) => {
                add_into(grads, *x, &|t| axpy(t, 1.0, g.data()));
            }
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = kernels::transpose(self.value(*b).data(), k, n);
                add_into(grads, *a, &|t| {
                    kernels::matmul_acc(t.data_mut(), g.data(), &bt, m, n, k);
                });
                let at = kernels::transpose(self.value(*a).data(), m, k);
                add_into(grads, *b, &|t| {
                    kernels::matmul_acc(t.data_mut(), &at, g.data(), k, m, n);
                });
            }
            Op::AddBias { x, b } => {
                add_into(grads, *x, &|t| axpy(t, 1.0, g.data()));
                let c = self.value(*b).len();
                add_into(grads, *b, &|t| {
                    let td = t.data_mut();
                    for (i, &gv) in g.data().iter().enumerate() {
                        td[i % c] += gv;
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let sx = self.value(*x).shape();
                let sw = self.value(*w).shape();
                let (h, wid, ic) = (sx[0], sx[1], sx[2]);
                let (kh, kw, oc) = (sw[0], sw[1], sw[3]);
                let oh = kernels::conv_out_side(h, kh, *stride, *pad);
                let ow = kernels::conv_out_side(wid, kw, *stride, *pad);
                let rows = oh * ow;
                let klen = kh * kw * ic;
                if self.needs(*x) || self.needs(*w) {
                    let cols = kernels::im2col(self.value(*x).data(), h, wid, ic, kh, kw, *stride, *pad);
                    add_into(grads, *w, &|t| {
                        let colst = kernels::transpose(&cols, rows, klen);
                        kernels::matmul_acc(t.data_mut(), &colst, g.data(), klen, rows, oc);
                    });
                    add_into(grads, *x, &|t| {
                        let wt = kernels::transpose(self.value(*w).data(), klen, oc);
                        let dcols = kernels::matmul(g.data(), &wt, rows, oc, klen);
                        kernels::col2im_acc(&dcols, t.data_mut(), h, wid, ic, kh, kw, *stride, *pad);
                    });
                }
                add_into(grads, *b, &|t| {
                    let td = t.data_mut();
                    for row in g.data().chunks_exact(oc) {
                        for (d, &gv) in td.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Deconv2d { x, w, b, stride } => {
                let sx = self.value(*x).shape();
                let sw = self.value(*w).shape();
                let (h, wid, ic) = (sx[0], sx[1], sx[2]);
                let (kh, kw, oc) = (sw[0], sw[1], sw[3]);
                let ow = (wid - 1) * stride + kw;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let gd = g.data();
                add_into(grads, *x, &|t| {
                    let td = t.data_mut();
                    for iy in 0..h {
                        for ix in 0..wid {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let o = ((iy * stride + ky) * ow + ix * stride + kx) * oc;
                                    let grow = &gd[o..o + oc];
                                    for ci in 0..ic {
                                        let wrow = &wd[((ky * kw + kx) * ic + ci) * oc..][..oc];
                                        let mut acc = 0.0;
                                        for (&gv, &wv) in grow.iter().zip(wrow) {
                                            acc += gv * wv;
                                        }
                                        td[(iy * wid + ix) * ic + ci] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
                add_into(grads, *w, &|t| {
                    let td = t.data_mut();
                    for iy in 0..h {
                        for ix in 0..wid {
                            let xin = &xd[(iy * wid + ix) * ic..(iy * wid + ix + 1) * ic];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let o = ((iy * stride + ky) * ow + ix * stride + kx) * oc;
                                    let grow = &gd[o..o + oc];
                                    for (ci, &xv) in xin.iter().enumerate() {
                                        let wrow =
                                            &mut td[((ky * kw + kx) * ic + ci) * oc..][..oc];
                                        for (wv, &gv) in wrow.iter_mut().zip(grow) {
                                            *wv += xv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                add_into(grads, *b, &|t| {
                    let td = t.data_mut();
                    for row in gd.chunks_exact(oc) {
                        for (d, &gv) in td.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let inv = 1.0 / (h * w) as f64;
                add_into(grads, *x, &|t| {
                    for px in t.data_mut().chunks_exact_mut(c) {
                        for (d, &gv) in px.iter_mut().zip(g.data()) {
                            *d += gv * inv;
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let total_c = *self.nodes[id].value.shape().last().unwrap();
                let rows = self.nodes[id].value.len() / total_c;
                let mut offset = 0;
                for &p in parts {
                    let c = *self.value(p).shape().last().unwrap();
                    let off = offset;
                    add_into(grads, p, &|t| {
                        let td = t.data_mut();
                        for r in 0..rows {
                            for i in 0..c {
                                td[r * c + i] += g.data()[r * total_c + off + i];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::StackRows { parts } => {
                let len = self.value(parts[0]).len();
                for (r, &p) in parts.iter().enumerate() {
                    add_into(grads, p, &|t| {
                        axpy(t, 1.0, &g.data()[r * len..(r + 1) * len]);
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[id].value.data();
                let cols = self.nodes[id].value.shape()[1];
                add_into(grads, *x, &|t| {
                    let rows = t.len() / cols;
                    let td = t.data_mut();
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..cols {
                            td[r * cols + i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::OuterSum { col, row } => {
                let m = self.value(*row).len();
                add_into(grads, *col, &|t| {
                    for (i, d) in t.data_mut().iter_mut().enumerate() {
                        *d += g.data()[i * m..(i + 1) * m].iter().sum::<f64>();
                    }
                });
                add_into(grads, *row, &|t| {
                    let td = t.data_mut();
                    for (idx, &gv) in g.data().iter().enumerate() {
                        td[idx % m] += gv;
                    }
                });
            }
            Op::SmoothL1 { pred, target } => {
                let (pv, tv) = (self.value(*pred).data(), self.value(*target).data());
                let d: Vec<f64> =
                    pv.iter().zip(tv).map(|(p, t)| (p - t).clamp(-1.0, 1.0)).collect();
                add_into(grads, *pred, &|t| {
                    for ((o, &gv), &dv) in t.data_mut().iter_mut().zip(g.data()).zip(&d) {
                        *o += gv * dv;
                    }
                });
                add_into(grads, *target, &|t| {
                    for ((o, &gv), &dv) in t.data_mut().iter_mut().zip(g.data()).zip(&d) {
                        *o -= gv * dv;
                    }
                });
            }
            Op::BceWithLogits { logit, target } => {
                let (zv, tv) = (self.value(*logit).data(), self.value(*target).data());
                add_into(grads, *logit, &|t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        *o += g.data()[i] * (sigmoid(zv[i]) - tv[i]);
                    }
                });
                add_into(grads, *target, &|t| {
                    for (i, o) in t.data_mut().iter_mut().enumerate() {
                        *o -= g.data()[i] * zv[i];
                    }
                });
            }
            Op::MaxPoolSegments { x, argmax, .. } => {
                let c = self.nodes[id].value.shape()[1];
                add_into(grads, *x, &|t| {
                    let td = t.data_mut();
                    for (i, &src) in argmax.iter().enumerate() {
                        if src != usize::MAX {
                            td[src * c + i % c] += g.data()[i];
                        }
                    }
                });
            }
            Op::ScatterCells { x, cells } => {
                let c = self.value(*x).shape()[1];
                let w = self.nodes[id].value.shape()[1];
                add_into(grads, *x, &|t| {
                    let td = t.data_mut();
                    for (p, &(r, q)) in cells.iter().enumerate() {
                        for i in 0..c {
                            td[p * c + i] += g.data()[(r * w + q) * c + i];
                        }
                    }
                });
            }
            Op::RoiAlign { feat, samples } => {
                let sf = self.value(*feat).shape();
                let (h, w, c) = (sf[0], sf[1], sf[2]);
                add_into(grads, *feat, &|t| {
                    let td = t.data_mut();
                    for (i, &(u, v)) in samples.iter().enumerate() {
                        let taps = bilinear_taps(u, v, h, w);
                        let grow = &g.data()[i * c..(i + 1) * c];
                        for &(r, q, wt) in &taps {
                            for (ch, &gv) in grow.iter().enumerate() {
                                td[(r * w + q) * c + ch] += wt * gv;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Four (row, col, weight) taps for a bilinear sample at continuous (u, v),
/// border-clamped. Cell (r, c) has its value at (r + 0.5, c + 0.5).
fn bilinear_taps(u: f64, v: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let fu = u - 0.5;
    let fv = v - 0.5;
    let r0 = fu.floor();
    let c0 = fv.floor();
    let ar = fu - r0;
    let ac = fv - c0;
    let clamp = |x: f64, hi: usize| -> usize { (x.max(0.0) as usize).min(hi - 1) };
    let (r0i, r1i) = (clamp(r0, h), clamp(r0 + 1.0, h));
    let (c0i, c1i) = (clamp(c0, w), clamp(c0 + 1.0, w));
    [
        (r0i, c0i, (1.0 - ar) * (1.0 - ac)),
        (r0i, c1i, (1.0 - ar) * ac),
        (r1i, c0i, ar * (1.0 - ac)),
        (r1i, c1i, ar * ac),
    ]
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn axpy(t: &mut Tensor, k: f64, src: &[f64]) {
    for (d, &s) in t.data_mut().iter_mut().zip(src) {
        *d += k * s;
    }
}
