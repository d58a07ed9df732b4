use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::real::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    AddRowBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Relu { x: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cout: usize },
    AddChannelBias { x: Var, b: Var },
    MulBroadcast { x: Var, w: Var },
    Concat { a: Var, b: Var },
    Upsample2x { x: Var },
    MaxPool2x2 { x: Var, picks: Vec<u32> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    L2Normalize { x: Var, inv_denom: Vec<T>, clamped: Vec<bool> },
    RowMax { r: Var, picks: Vec<usize> },
    Gather { v: Var, idx: Vec<usize> },
    L1 { a: Var, b: Var },
    CrossEntropy { logits: Var, target: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    Reshape { x: Var },
    Transpose { x: Var },
    Scale { x: Var, s: T },
    WeightedSum { x: Var, coeffs: Vec<T> },
    Sum { xs: Vec<Var> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// A tape is single-use: after one backward pass it refuses another, since the
/// gradients it holds belong to that pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, if `v` took part in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name, node: self.nodes.len() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn feat(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        self.value(v).dims3().map_err(|_| shape_err(op, format!("expected [C,h,w], got {:?}", self.shape(v))))
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| shape_err(op, format!("expected [rows,cols], got {:?}", self.shape(v))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, &[a, b])
    }

    /// `x[r,n] + b[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, n) = self.mat(x, "add_row_bias")?;
        if self.shape(b) != [n] {
            return Err(shape_err("add_row_bias", format!("bias {:?} for {n} columns", self.shape(b))));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push("add_row_bias", Tensor::new(&[r, n], out)?, Op::AddRowBias { x, b }, &[x, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::new(&shape, out)?, Op::Add { a, b }, &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| if e > T::zero() || e.is_nan() { e } else { T::zero() }).collect();
        let shape = v.shape().to_vec();
        self.push("relu", Tensor::new(&shape, out)?, Op::Relu { x }, &[x])
    }

    /// Zero-padded cross-correlation of `x[Cin,h,w]` with `kernel[Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, w) = self.feat(x, "conv2d")?;
        let (cout, kc, kh, kw) = match self.shape(kernel)[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_err("conv2d", format!("kernel shape {:?}", self.shape(kernel)))),
        };
        if kc != cin {
            return Err(shape_err("conv2d", format!("kernel expects {kc} input channels, got {cin}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} must be odd, stride {stride} > 0")));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw || !(span_h - kh).is_multiple_of(stride) || !(span_w - kw).is_multiple_of(stride)
        {
            return Err(shape_err(
                "conv2d",
                format!("non-integral output size for {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"),
            ));
        }
        let geom =
            ConvGeom { cin, h, w, kh, kw, stride, pad, oh: (span_h - kh) / stride + 1, ow: (span_w - kw) / stride + 1 };
        let mut out = vec![T::zero(); cout * geom.out_len()];
        let kdata = self.value(kernel).data();
        if geom.is_pointwise() {
            kernels::gemm_nn(cout, cin, geom.out_len(), kdata, self.value(x).data(), &mut out);
        } else {
            let mut cols = vec![T::zero(); geom.patch_len() * geom.out_len()];
            kernels::im2col(self.value(x).data(), &geom, &mut cols);
            kernels::gemm_nn(cout, geom.patch_len(), geom.out_len(), kdata, &cols, &mut out);
        }
        let value = Tensor::new(&[cout, geom.oh, geom.ow], out)?;
        self.push("conv2d", value, Op::Conv2d { x, k: kernel, geom, cout }, &[x, kernel])
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, h, w) = self.feat(x, "add_channel_bias")?;
        if self.shape(b) != [c] {
            return Err(shape_err("add_channel_bias", format!("bias {:?} for {c} channels", self.shape(b))));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (plane, &bv) in out.chunks_mut(h * w).zip(bias) {
            plane.iter_mut().for_each(|o| *o += bv);
        }
        self.push("add_channel_bias", Tensor::new(&[c, h, w], out)?, Op::AddChannelBias { x, b }, &[x, b])
    }

    /// `x[C,h,w] ⊙ w[1,h,w]`, the single weight map broadcast across channels.
    pub fn mul_broadcast(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c, h, wd) = self.feat(x, "mul_broadcast")?;
        if self.shape(w) != [1, h, wd] {
            return Err(shape_err("mul_broadcast", format!("weight {:?} for [{c},{h},{wd}]", self.shape(w))));
        }
        let wm = self.value(w).data();
        let mut out = self.value(x).data().to_vec();
        for plane in out.chunks_mut(h * wd) {
            for (o, &s) in plane.iter_mut().zip(wm) {
                *o *= s;
            }
        }
        self.push("mul_broadcast", Tensor::new(&[c, h, wd], out)?, Op::MulBroadcast { x, w }, &[x, w])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, h, w) = self.feat(a, "concat_channels")?;
        let (cb, h2, w2) = self.feat(b, "concat_channels")?;
        if (h, w) != (h2, w2) {
            return Err(shape_err("concat_channels", format!("{h}x{w} vs {h2}x{w2}")));
        }
        let mut out = Vec::with_capacity((ca + cb) * h * w);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        self.push("concat_channels", Tensor::new(&[ca + cb, h, w], out)?, Op::Concat { a, b }, &[a, b])
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.feat(x, "upsample2x")?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let srow = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                let drow = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / 2];
                }
            }
        }
        self.push("upsample2x", Tensor::new(&[c, oh, ow], out)?, Op::Upsample2x { x }, &[x])
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.feat(x, "maxpool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("maxpool2x2", format!("odd extent {h}x{w}")));
        }
        let src = self.value(x).data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut picks = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let base = (ch * h + 2 * y) * w + 2 * xo;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    out.push(src[best]);
                    picks.push(best as u32);
                }
            }
        }
        self.push("maxpool2x2", Tensor::new(&[c, oh, ow], out)?, Op::MaxPool2x2 { x, picks }, &[x])
    }

    /// Per-channel normalization over the spatial extent of one sample,
    /// followed by the affine map `gamma * xhat + beta`.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (c, h, w) = self.feat(x, "batchnorm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batchnorm", format!("affine params for {c} channels")));
        }
        let n = h * w;
        let nf = T::from_usize(n);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let plane = &src[ch * n..(ch + 1) * n];
            let mean = plane.iter().copied().sum::<T>() / nf;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + T::from_f64(EPS)).sqrt();
            inv_std[ch] = is;
            for i in 0..n {
                let xh = (plane[i] - mean) * is;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = g[ch] * xh + bt[ch];
            }
        }
        self.push(
            "batchnorm",
            Tensor::new(&[c, h, w], out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        )
    }

    /// Divide each location's channel vector by `max(‖v‖₂, eps)`.
    pub fn l2_normalize_channel(&mut self, x: Var, eps: T) -> Result<Var> {
        let (c, h, w) = self.feat(x, "l2_normalize_channel")?;
        let n = h * w;
        let src = self.value(x).data();
        let mut inv_denom = vec![T::zero(); n];
        let mut clamped = vec![false; n];
        for p in 0..n {
            let norm = (0..c).map(|ch| src[ch * n + p] * src[ch * n + p]).sum::<T>().sqrt();
            clamped[p] = !(norm > eps);
            inv_denom[p] = T::one() / if clamped[p] { eps } else { norm };
        }
        let out: Vec<T> = src.iter().enumerate().map(|(i, &v)| v * inv_denom[i % n]).collect();
        self.push(
            "l2_normalize_channel",
            Tensor::new(&[c, h, w], out)?,
            Op::L2Normalize { x, inv_denom, clamped },
            &[x],
        )
    }

    /// Row-wise maximum of `r[n,m]` and its index; ties go to the lowest
    /// index. Only the maximum is differentiable.
    pub fn rowwise_max_argmax(&mut self, r: Var) -> Result<(Var, Vec<usize>)> {
        let (n, m) = self.mat(r, "rowwise_max_argmax")?;
        let src = self.value(r).data();
        let mut picks = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for row in src.chunks(m) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            picks.push(best);
            out.push(row[best]);
        }
        let w = self.push("rowwise_max", Tensor::new(&[n], out)?, Op::RowMax { r, picks: picks.clone() }, &[r])?;
        Ok((w, picks))
    }

    /// Rows of `v[m,C]` selected by `idx`; backward scatter-adds.
    pub fn gather_rows(&mut self, v: Var, idx: &[usize]) -> Result<Var> {
        let (m, c) = self.mat(v, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::IndexOutOfRange { index: bad, len: m });
        }
        let src = self.value(v).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(&[idx.len(), c], out)?;
        self.push("gather_rows", value, Op::Gather { v, idx: idx.to_vec() }, &[v])
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("l1_loss", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let total: T = va.iter().zip(vb).map(|(x, y)| (*x - *y).abs()).sum();
        let loss = total / T::from_usize(va.len());
        self.push("l1_loss", Tensor::scalar(loss), Op::L1 { a, b }, &[a, b])
    }

    /// Pixel-mean of `weights[t] * -log softmax(logits)[t]` with `t` the
    /// target class. `weights` are constants.
    pub fn weighted_cross_entropy(&mut self, logits: Var, target: &[u8], weights: &[T]) -> Result<Var> {
        let (k, h, w) = self.feat(logits, "weighted_cross_entropy")?;
        let n = h * w;
        if target.len() != n {
            return Err(shape_err("weighted_cross_entropy", format!("target of {} pixels for {h}x{w}", target.len())));
        }
        if weights.len() != k {
            return Err(shape_err("weighted_cross_entropy", format!("{} weights for {k} classes", weights.len())));
        }
        if let Some(&bad) = target.iter().find(|&&t| t as usize >= k) {
            return Err(Error::InvalidClass { class: bad as usize, num_classes: k });
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); k * n];
        let mut total = T::zero();
        for p in 0..n {
            let mx = (0..k).map(|c| src[c * n + p]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..k {
                let e = (src[c * n + p] - mx).portable_exp();
                probs[c * n + p] = e;
                z += e;
            }
            for c in 0..k {
                probs[c * n + p] /= z;
            }
            let t = target[p] as usize;
            let log_p = src[t * n + p] - mx - z.portable_ln();
            total += -weights[t] * log_p;
        }
        let loss = total / T::from_usize(n);
        let op = Op::CrossEntropy {
            logits,
            target: target.iter().map(|&t| t as usize).collect(),
            weights: weights.to_vec(),
            probs,
        };
        self.push("weighted_cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(&[c, r], out)?, Op::Transpose { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&e| e * s).collect();
        let shape = v.shape().to_vec();
        self.push("scale", Tensor::new(&shape, out)?, Op::Scale { x, s }, &[x])
    }

    /// `Σ coeffs[i] * x[i]` with constant coefficients.
    pub fn weighted_sum(&mut self, x: Var, coeffs: &[T]) -> Result<Var> {
        if coeffs.len() != self.value(x).len() {
            return Err(shape_err("weighted_sum", format!("{} coeffs for {:?}", coeffs.len(), self.shape(x))));
        }
        let s: T = self.value(x).data().iter().zip(coeffs).map(|(a, b)| *a * *b).sum();
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum { x, coeffs: coeffs.to_vec() }, &[x])
    }

    /// Sum of single-element values.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Empty("sum"));
        }
        let mut s = T::zero();
        for &v in xs {
            if self.value(v).len() != 1 {
                return Err(shape_err("sum", format!("non-scalar term {:?}", self.shape(v))));
            }
            s += self.value(v).item();
        }
        self.push("sum", Tensor::scalar(s), Op::Sum { xs: xs.to_vec() }, xs)
    }

    /// Hash of every discrete branch taken during the forward pass (ReLU
    /// signs, pooling and argmax picks, L1 signs, norm clamping). Two passes
    /// with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = Fnv::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.value(*x).data() {
                        h.write(u64::from(v > T::zero()));
                    }
                }
                Op::MaxPool2x2 { picks, .. } => picks.iter().for_each(|&p| h.write(u64::from(p))),
                Op::RowMax { picks, .. } => picks.iter().for_each(|&p| h.write(p as u64)),
                Op::L1 { a, b } => {
                    for (x, y) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        h.write(sign_code(*x - *y));
                    }
                }
                Op::L2Normalize { clamped, .. } => clamped.iter().for_each(|&c| h.write(u64::from(c))),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode pass from the single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut finished: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            finished[id] = Some(Tensor::new(self.nodes[id].value.shape(), g)?);
        }
        self.grads = finished;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    kernels::gemm_nt(m, n, k, g, nodes[b.0].value.data(), ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    kernels::gemm_tn(k, m, n, nodes[a.0].value.data(), g, gb);
                }
            }
            Op::AddRowBias { x, b } => {
                let n = nodes[b.0].value.len();
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Relu { x } => {
                let out = nodes[id].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &gv), &o) in gx.iter_mut().zip(g).zip(out) {
                        if o > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, geom, cout } => {
                let (p_len, k_len) = (geom.out_len(), geom.patch_len());
                let xdata = nodes[x.0].value.data();
                let kdata = nodes[k.0].value.data();
                let need_k = nodes[k.0].requires_grad;
                let need_x = nodes[x.0].requires_grad;
                if need_k {
                    let gk = slot(nodes, grads, *k).expect("kernel requires grad");
                    if geom.is_pointwise() {
                        kernels::gemm_nt(*cout, p_len, k_len, g, xdata, gk);
                    } else {
                        let mut cols = vec![T::zero(); k_len * p_len];
                        kernels::im2col(xdata, geom, &mut cols);
                        kernels::gemm_nt(*cout, p_len, k_len, g, &cols, gk);
                    }
                }
                if need_x {
                    let gx = slot(nodes, grads, *x).expect("input requires grad");
                    if geom.is_pointwise() {
                        kernels::gemm_tn(k_len, *cout, p_len, kdata, g, gx);
                    } else {
                        let mut dcols = vec![T::zero(); k_len * p_len];
                        kernels::gemm_tn(k_len, *cout, p_len, kdata, g, &mut dcols);
                        kernels::col2im(&dcols, geom, gx);
                    }
                }
            }
            Op::AddChannelBias { x, b } => {
                let c = nodes[b.0].value.len();
                let plane = g.len() / c;
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (d, gp) in gb.iter_mut().zip(g.chunks(plane)) {
                        *d += gp.iter().copied().sum::<T>();
                    }
                }
            }
            Op::MulBroadcast { x, w } => {
                let wm = nodes[w.0].value.data();
                let plane = wm.len();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (gxp, gp) in gx.chunks_mut(plane).zip(g.chunks(plane)) {
                        for ((d, &gv), &s) in gxp.iter_mut().zip(gp).zip(wm) {
                            *d += gv * s;
                        }
                    }
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    let xv = nodes[x.0].value.data();
                    for (xp, gp) in xv.chunks(plane).zip(g.chunks(plane)) {
                        for ((d, &gv), &xe) in gw.iter_mut().zip(gp).zip(xp) {
                            *d += gv * xe;
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let na = nodes[a.0].value.len();
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, &g[..na]);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_into(gb, &g[na..]);
                }
            }
            Op::Upsample2x { x } => {
                let (c, h, w) = dims3(&nodes[x.0].value);
                let ow = 2 * w;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            let grow = &g[(ch * 2 * h + y) * ow..(ch * 2 * h + y + 1) * ow];
                            let drow = &mut gx[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                            for (xo, &gv) in grow.iter().enumerate() {
                                drow[xo / 2] += gv;
                            }
                        }
                    }
                }
            }
            Op::MaxPool2x2 { x, picks } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (&p, &gv) in picks.iter().zip(g) {
                        gx[p as usize] += gv;
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let nf = T::from_usize(n);
                let gam = nodes[gamma.0].value.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for ch in 0..c {
                    for i in 0..n {
                        sum_g[ch] += g[ch * n + i];
                        sum_gx[ch] += g[ch * n + i] * xhat[ch * n + i];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    add_into(gb, &sum_g);
                }
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    add_into(gg, &sum_gx);
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch] / nf;
                        for i in 0..n {
                            let j = ch * n + i;
                            gx[j] += scale * (nf * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch]);
                        }
                    }
                }
            }
            Op::L2Normalize { x, inv_denom, clamped } => {
                let n = inv_denom.len();
                let c = g.len() / n;
                let y = nodes[id].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for p in 0..n {
                        if clamped[p] {
                            for ch in 0..c {
                                gx[ch * n + p] += g[ch * n + p] * inv_denom[p];
                            }
                        } else {
                            let yg: T = (0..c).map(|ch| y[ch * n + p] * g[ch * n + p]).sum();
                            for ch in 0..c {
                                let j = ch * n + p;
                                gx[j] += (g[j] - y[j] * yg) * inv_denom[p];
                            }
                        }
                    }
                }
            }
            Op::RowMax { r, picks } => {
                let m = nodes[r.0].value.shape()[1];
                if let Some(gr) = slot(nodes, grads, *r) {
                    for (i, (&p, &gv)) in picks.iter().zip(g).enumerate() {
                        gr[i * m + p] += gv;
                    }
                }
            }
            Op::Gather { v, idx } => {
                let c = nodes[v.0].value.shape()[1];
                if let Some(gv) = slot(nodes, grads, *v) {
                    for (row, &src) in idx.iter().enumerate() {
                        add_into(&mut gv[src * c..(src + 1) * c], &g[row * c..(row + 1) * c]);
                    }
                }
            }
            Op::L1 { a, b } => {
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                let scale = g[0] / T::from_usize(va.len());
                let signs: Vec<T> = va.iter().zip(vb).map(|(x, y)| sign(*x - *y) * scale).collect();
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, &signs);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (d, s) in gb.iter_mut().zip(&signs) {
                        *d -= *s;
                    }
                }
            }
            Op::CrossEntropy { logits, target, weights, probs } => {
                let n = target.len();
                let scale = g[0] / T::from_usize(n);
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let k = probs.len() / n;
                    for (p, &t) in target.iter().enumerate() {
                        let wt = weights[t] * scale;
                        for c in 0..k {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            gl[c * n + p] += wt * (probs[c * n + p] - onehot);
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, &gv) in gx.iter_mut().zip(g) {
                        *d += gv * *s;
                    }
                }
            }
            Op::WeightedSum { x, coeffs } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, &c) in gx.iter_mut().zip(coeffs) {
                        *d += g[0] * c;
                    }
                }
            }
            Op::Sum { xs } => {
                for &v in xs {
                    if let Some(gv) = slot(nodes, grads, v) {
                        gv[0] += g[0];
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, or None when `v` is excluded from differentiation.
fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dims3<T: Real>(t: &Tensor<T>) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

/// Subgradient of |x|, taking 0 at the kink.
fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn sign_code<T: Real>(x: T) -> u64 {
    if x > T::zero() {
        2
    } else if x < T::zero() {
        0
    } else {
        1
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
