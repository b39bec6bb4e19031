//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every forward op records its inputs; `backward` replays the tape in
//! reverse, accumulating gradients for nodes flagged as requiring them.
//! Values are immutable once written, so read-only sharing is safe.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddConst(Var, S),
    AddBias(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Softmax(Var, usize),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: S },
    ChannelNorm { x: Var, gamma: Var, beta: Var, eps: S },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Tensor<S>, var: Tensor<S>, eps: S, training: bool },
    Relu(Var),
    Elu1(Var),
    Sigmoid(Var),
    ReplicatePadT(Var, usize),
    Conv { x: Var, w: Var, b: Var, stride: [usize; 3], pad: [usize; 3] },
    AvgPoolGrid { x: Var, h: usize, w: usize },
    MeanOverRows(Var),
    SumOverRows(Var),
    SumAll(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    PickLogProb { x: Var, ids: Vec<usize> },
    RowDiv { x: Var, denom: Var },
    BceMean { probs: Var, labels: Vec<S> },
    AddTiled { x: Var, tile: Var },
    FrameAttention { q: Var, k: Var, v: Var, n_heads: usize, rows: usize },
    PoolFrames { weights: Var, x: Var },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Grads<S> {
    g: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.g[v.0].as_ref()
    }
    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.g[v.0].take()
    }
}

/// Linear operation tape.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, value: Tensor<S>, a: Var, op: Op<S>) -> Var {
        let ng = self.nodes[a.0].needs_grad;
        self.push(value, op, ng)
    }

    fn binary(&mut self, value: Tensor<S>, a: Var, b: Var, op: Op<S>) -> Var {
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, ng)
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.binary(v, a, b, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.binary(v, a, b, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.binary(v, a, b, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.unary(v, a, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.unary(v, a, Op::AddConst(a, c))
    }

    /// `[r, c] + [c]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(bias));
        if ad.len() != 2 || bd.len() != 1 || ad[1] != bd[0] {
            return Err(Error::shape(format!("add_bias dims {:?} vs {:?}", ad, bd)));
        }
        let (r, c) = (ad[0], ad[1]);
        let av = self.value(a).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(av[i * c + j] + bv[j]);
            }
        }
        let v = Tensor::new(vec![r, c], out)?;
        Ok(self.binary(v, a, bias, Op::AddBias(a, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.unary(v, a, Op::Relu(a))
    }

    /// `elu(x) + 1`: positive-valued feature map used by linear attention.
    pub fn elu1(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > S::zero() { x + S::one() } else { x.exp() });
        self.unary(v, a, Op::Elu1(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| S::one() / (S::one() + (-x).exp()));
        self.unary(v, a, Op::Sigmoid(a))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::shape(format!("matmul dims {:?} x {:?}", ad, bd)));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a).data(), self.value(b).data(), S::zero(), &mut out);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(v, a, b, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ad = self.dims(a);
        if ad.len() != 2 {
            return Err(Error::shape(format!("transpose expects rank 2, got {:?}", ad)));
        }
        let (r, c) = (ad[0], ad[1]);
        let av = self.value(a).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let v = Tensor::new(vec![c, r], out)?;
        Ok(self.unary(v, a, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(dims)?;
        Ok(self.unary(v, a, Op::Reshape(a)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ad = self.dims(a);
        if ad.len() != 2 || start + len > ad[0] || len == 0 {
            return Err(Error::shape(format!("slice_rows {}..{} of {:?}", start, start + len, ad)));
        }
        let c = ad[1];
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let v = Tensor::new(vec![len, c], data)?;
        Ok(self.unary(v, a, Op::SliceRows(a, start, len)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ad = self.dims(a);
        if ad.len() != 2 || start + len > ad[1] || len == 0 {
            return Err(Error::shape(format!("slice_cols {}..{} of {:?}", start, start + len, ad)));
        }
        let (r, c) = (ad[0], ad[1]);
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let v = Tensor::new(vec![r, len], out)?;
        Ok(self.unary(v, a, Op::SliceCols(a, start, len)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat_rows of zero parts"));
        }
        let c = self.dims(parts[0]).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let d = self.dims(p);
            if d.len() != 2 || d[1] != c {
                return Err(Error::shape(format!("concat_rows part dims {:?}, want [_, {}]", d, c)));
            }
            rows += d[0];
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.nodes[p.0].needs_grad);
        let v = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat_cols of zero parts"));
        }
        let r = self.dims(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.dims(p);
            if d.len() != 2 || d[0] != r {
                return Err(Error::shape(format!("concat_cols part dims {:?}, want [{}, _]", d, r)));
            }
            widths.push(d[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                let pv = self.value(p).data();
                out.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.nodes[p.0].needs_grad);
        let v = Tensor::new(vec![r, total], out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    // ── normalization and activations over slices ───────────────────

    /// Overflow-safe softmax along `axis` (max is subtracted per slice).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ad = self.dims(a).to_vec();
        if axis >= ad.len() {
            return Err(Error::shape(format!("softmax axis {} of {:?}", axis, ad)));
        }
        let (outer, m, inner) = split_axis(&ad, axis);
        let av = self.value(a).data();
        let mut out = vec![S::zero(); av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * m + j) * inner + i;
                let mut mx = S::neg_infinity();
                for j in 0..m {
                    if av[idx(j)] > mx {
                        mx = av[idx(j)];
                    }
                }
                let mut sum = S::zero();
                for j in 0..m {
                    let e = (av[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..m {
                    out[idx(j)] /= sum;
                }
            }
        }
        let v = Tensor::new(ad, out)?;
        Ok(self.unary(v, a, Op::Softmax(a, axis)))
    }

    /// Log-softmax along the last axis of a rank-1 or rank-2 tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ad = self.dims(a).to_vec();
        let (rows, c) = match ad.len() {
            1 => (1, ad[0]),
            2 => (ad[0], ad[1]),
            _ => return Err(Error::shape(format!("log_softmax expects rank <= 2, got {:?}", ad))),
        };
        let av = self.value(a).data();
        let mut out = vec![S::zero(); av.len()];
        for r in 0..rows {
            let row = &av[r * c..(r + 1) * c];
            let mut mx = S::neg_infinity();
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut sum = S::zero();
            for &x in row {
                sum += (x - mx).exp();
            }
            let lse = mx + sum.ln();
            for (j, &x) in row.iter().enumerate() {
                out[r * c + j] = x - lse;
            }
        }
        let v = Tensor::new(ad, out)?;
        Ok(self.unary(v, a, Op::LogSoftmax(a)))
    }

    /// Layer normalization over the last axis with learnable gain/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let d = *xd.last().unwrap();
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm gamma/beta must be [{}], got {:?} / {:?}",
                d,
                self.dims(gamma),
                self.dims(beta)
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let n_vec = xv.len() / d;
        let mut out = vec![S::zero(); xv.len()];
        for v in 0..n_vec {
            let s = &xv[v * d..(v + 1) * d];
            let (mean, var) = mean_var(s);
            let inv = S::one() / (var + eps).sqrt();
            for j in 0..d {
                out[v * d + j] = (s[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let val = Tensor::new(xd, out)?;
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        Ok(self.push(val, Op::LayerNorm { x, gamma, beta, eps }, ng))
    }

    /// Per-(frame, channel) normalization over spatial extent of a
    /// `[T, H, W, C]` map; batch-statistics-free batch-norm substitute.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if xd.len() != 4 {
            return Err(Error::shape(format!("channel_norm expects [T,H,W,C], got {:?}", xd)));
        }
        let (t, h, w, c) = (xd[0], xd[1], xd[2], xd[3]);
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(Error::shape("channel_norm gamma/beta extent mismatch".to_string()));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![S::zero(); xv.len()];
        let hw = h * w;
        let n = S::of_usize(hw);
        for ti in 0..t {
            for ci in 0..c {
                let mut sum = S::zero();
                let mut sq = S::zero();
                for p in 0..hw {
                    let v = xv[(ti * hw + p) * c + ci];
                    sum += v;
                    sq += v * v;
                }
                let mean = sum / n;
                let var = sq / n - mean * mean;
                let inv = S::one() / (var + eps).sqrt();
                for p in 0..hw {
                    let i = (ti * hw + p) * c + ci;
                    out[i] = (xv[i] - mean) * inv * gv[ci] + bv[ci];
                }
            }
        }
        let val = Tensor::new(xd, out)?;
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        Ok(self.push(val, Op::ChannelNorm { x, gamma, beta, eps }, ng))
    }

    /// Batch normalization over `[T, H, W, C]` with per-channel statistics.
    /// Training mode normalizes by batch statistics; eval mode uses the
    /// supplied running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Tensor<S>,
        running_var: Tensor<S>,
        eps: S,
        training: bool,
    ) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if xd.len() != 4 {
            return Err(Error::shape(format!("batch_norm expects [T,H,W,C], got {:?}", xd)));
        }
        let c = xd[3];
        if self.dims(gamma) != [c]
            || self.dims(beta) != [c]
            || running_mean.dims() != [c]
            || running_var.dims() != [c]
        {
            return Err(Error::shape("batch_norm channel extent mismatch".to_string()));
        }
        let (mean, var) = if training {
            batch_stats(self.value(x), c)
        } else {
            (running_mean.clone(), running_var.clone())
        };
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mv = mean.data();
        let vv = var.data();
        let mut out = vec![S::zero(); xv.len()];
        for (i, &v) in xv.iter().enumerate() {
            let ci = i % c;
            out[i] = (v - mv[ci]) / (vv[ci] + eps).sqrt() * gv[ci] + bv[ci];
        }
        let val = Tensor::new(xd, out)?;
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        Ok(self.push(
            val,
            Op::BatchNorm { x, gamma, beta, mean: running_mean, var: running_var, eps, training },
            ng,
        ))
    }

    // ── convolution and spatial ops ─────────────────────────────────

    /// Replicate the first and last frame `pad` times along the temporal
    /// axis of a `[T, H, W, C]` tensor.
    pub fn replicate_pad_t(&mut self, x: Var, pad: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if xd.len() != 4 {
            return Err(Error::shape(format!("replicate_pad_t expects [T,H,W,C], got {:?}", xd)));
        }
        let (t, h, w, c) = (xd[0], xd[1], xd[2], xd[3]);
        let frame = h * w * c;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity((t + 2 * pad) * frame);
        for _ in 0..pad {
            out.extend_from_slice(&xv[0..frame]);
        }
        out.extend_from_slice(xv);
        for _ in 0..pad {
            out.extend_from_slice(&xv[(t - 1) * frame..t * frame]);
        }
        let v = Tensor::new(vec![t + 2 * pad, h, w, c], out)?;
        Ok(self.unary(v, x, Op::ReplicatePadT(x, pad)))
    }

    /// Spatio-temporal convolution of `x: [T, H, W, Ci]` with
    /// `w: [kt, kh, kw, Ci, Co]` and per-channel bias, zero padding.
    /// Purely spatial kernels use `kt = 1`.
    ///
    /// Accumulation order per output channel is the plain nested-loop order
    /// `(kt, kh, kw, ci)`, so results match a naive direct convolution
    /// bit-for-bit at any precision.
    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if xd.len() != 4 || wd.len() != 5 {
            return Err(Error::shape(format!(
                "conv expects x [T,H,W,Ci] and w [kt,kh,kw,Ci,Co], got {:?} / {:?}",
                xd, wd
            )));
        }
        if xd[3] != wd[3] {
            return Err(Error::shape(format!(
                "conv input channels {} != kernel channels {}",
                xd[3], wd[3]
            )));
        }
        let co = wd[4];
        if self.dims(b) != [co] {
            return Err(Error::shape(format!("conv bias must be [{}]", co)));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::shape("conv stride must be positive".to_string()));
        }
        let mut od = [0usize; 3];
        for a in 0..3 {
            let n = xd[a] + 2 * pad[a];
            if wd[a] > n {
                return Err(Error::shape(format!(
                    "conv kernel extent {} exceeds padded input extent {} on axis {}",
                    wd[a], n, a
                )));
            }
            od[a] = (n - wd[a]) / stride[a] + 1;
        }
        let out = conv_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            pad,
            od,
        );
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        Ok(self.push(out, Op::Conv { x, w, b, stride, pad }, ng))
    }

    /// 2x2 average pooling of a flattened `[h*w, d]` grid (`h`, `w` even).
    pub fn avg_pool_grid(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if xd.len() != 2 || xd[0] != h * w || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "avg_pool_grid wants [{}*{}, d] with even grid, got {:?}",
                h, w, xd
            )));
        }
        let d = xd[1];
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = S::of_f64(0.25);
        let mut out = vec![S::zero(); oh * ow * d];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (oy * ow + ox) * d;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * oy + dy) * w + (2 * ox + dx)) * d;
                    for j in 0..d {
                        out[o + j] += xv[i + j];
                    }
                }
                for j in 0..d {
                    out[o + j] *= quarter;
                }
            }
        }
        let v = Tensor::new(vec![oh * ow, d], out)?;
        Ok(self.unary(v, x, Op::AvgPoolGrid { x, h, w }))
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Column means of a rank-2 tensor: `[r, c] -> [c]`.
    pub fn mean_over_rows(&mut self, a: Var) -> Result<Var> {
        let ad = self.dims(a).to_vec();
        if ad.len() != 2 {
            return Err(Error::shape(format!("mean_over_rows expects rank 2, got {:?}", ad)));
        }
        let (r, c) = (ad[0], ad[1]);
        let av = self.value(a).data();
        let inv = S::one() / S::of_usize(r);
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let v = Tensor::new(vec![c], out)?;
        Ok(self.unary(v, a, Op::MeanOverRows(a)))
    }

    /// Column sums of a rank-2 tensor: `[r, c] -> [c]`.
    pub fn sum_over_rows(&mut self, a: Var) -> Result<Var> {
        let ad = self.dims(a).to_vec();
        if ad.len() != 2 {
            return Err(Error::shape(format!("sum_over_rows expects rank 2, got {:?}", ad)));
        }
        let (r, c) = (ad[0], ad[1]);
        let av = self.value(a).data();
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        let v = Tensor::new(vec![c], out)?;
        Ok(self.unary(v, a, Op::SumOverRows(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        self.unary(Tensor::scalar(s), a, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, S::one() / S::of_usize(n))
    }

    // ── indexed ops ─────────────────────────────────────────────────

    /// Embedding lookup: rows of `table: [V, d]` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let td = self.dims(table).to_vec();
        if td.len() != 2 {
            return Err(Error::shape(format!("gather_rows table must be rank 2, got {:?}", td)));
        }
        let (v_sz, d) = (td[0], td[1]);
        if ids.is_empty() {
            return Err(Error::usage("gather_rows with empty ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v_sz) {
            return Err(Error::data(format!("row id {} out of range {}", bad, v_sz)));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let val = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.unary(val, table, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// Per-row element pick: `out[i] = x[i, ids[i]]`.
    pub fn pick(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if xd.len() != 2 || ids.len() != xd[0] {
            return Err(Error::shape(format!("pick ids len {} vs dims {:?}", ids.len(), xd)));
        }
        let c = xd[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= c) {
            return Err(Error::data(format!("pick id {} out of range {}", bad, c)));
        }
        let xv = self.value(x).data();
        let out: Vec<S> = ids.iter().enumerate().map(|(i, &j)| xv[i * c + j]).collect();
        let val = Tensor::new(vec![ids.len()], out)?;
        Ok(self.unary(val, x, Op::PickLogProb { x, ids: ids.to_vec() }))
    }

    /// Divide each row of `x: [r, c]` by the matching entry of `denom: [r]`.
    pub fn row_div(&mut self, x: Var, denom: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let dd = self.dims(denom).to_vec();
        if xd.len() != 2 || dd != [xd[0]] {
            return Err(Error::shape(format!("row_div dims {:?} / {:?}", xd, dd)));
        }
        let (r, c) = (xd[0], xd[1]);
        let xv = self.value(x).data();
        let dv = self.value(denom).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xv[i * c + j] / dv[i]);
            }
        }
        let v = Tensor::new(vec![r, c], out)?;
        Ok(self.binary(v, x, denom, Op::RowDiv { x, denom }))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    /// Probabilities are clamped to [1e-7, 1 - 1e-7] inside the loss.
    pub fn bce_mean(&mut self, probs: Var, labels: &[S]) -> Result<Var> {
        let pd = self.dims(probs).to_vec();
        if pd.len() != 1 || pd[0] != labels.len() {
            return Err(Error::data(format!(
                "bce_mean labels len {} vs probs dims {:?}",
                labels.len(),
                pd
            )));
        }
        let pv = self.value(probs).data();
        let mut loss = S::zero();
        for (&p, &y) in pv.iter().zip(labels.iter()) {
            let pc = clamp_prob(p);
            loss -= y * pc.ln() + (S::one() - y) * (S::one() - pc).ln();
        }
        loss /= S::of_usize(labels.len());
        let val = Tensor::scalar(loss);
        Ok(self.unary(val, probs, Op::BceMean { probs, labels: labels.to_vec() }))
    }

    /// Add a `[rows, d]` tile onto every `rows`-row block of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let td = self.dims(tile).to_vec();
        if xd.len() != 2 || td.len() != 2 || td[1] != xd[1] || xd[0] % td[0] != 0 {
            return Err(Error::shape(format!("add_tiled dims {:?} + {:?}", xd, td)));
        }
        let rows = td[0];
        let d = xd[1];
        let xv = self.value(x).data();
        let tv = self.value(tile).data();
        let mut out = Vec::with_capacity(xv.len());
        for (i, &v) in xv.iter().enumerate() {
            out.push(v + tv[(i / d % rows) * d + i % d]);
        }
        let v = Tensor::new(xd, out)?;
        Ok(self.binary(v, x, tile, Op::AddTiled { x, tile }))
    }

    /// Scaled-dot attention evaluated independently within each
    /// `rows`-row block (frame) of the stacked `[frames*rows, d]` inputs,
    /// heads splitting the feature axis.
    pub fn frame_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        rows: usize,
    ) -> Result<Var> {
        let qd = self.dims(q).to_vec();
        if qd.len() != 2 || self.dims(k) != qd.as_slice() || self.dims(v) != qd.as_slice() {
            return Err(Error::shape(format!(
                "frame_attention wants equal [n, d] inputs, got {:?}/{:?}/{:?}",
                qd,
                self.dims(k),
                self.dims(v)
            )));
        }
        let d = qd[1];
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::config(format!(
                "model dimension {d} not divisible by {n_heads} heads"
            )));
        }
        if rows == 0 || qd[0] % rows != 0 {
            return Err(Error::shape(format!(
                "frame_attention rows {} does not divide {}",
                rows, qd[0]
            )));
        }
        let out = frame_attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            qd[0],
            d,
            n_heads,
            rows,
        );
        let val = Tensor::new(qd, out)?;
        let ng = self.nodes[q.0].needs_grad
            || self.nodes[k.0].needs_grad
            || self.nodes[v.0].needs_grad;
        Ok(self.push(val, Op::FrameAttention { q, k, v, n_heads, rows }, ng))
    }

    /// Per-frame weighted sum: `out[f, :] = sum_r w[f, r] * x[f*R + r, :]`.
    pub fn pool_frames(&mut self, weights: Var, x: Var) -> Result<Var> {
        let wd = self.dims(weights).to_vec();
        let xd = self.dims(x).to_vec();
        if wd.len() != 2 || xd.len() != 2 || wd[0] * wd[1] != xd[0] {
            return Err(Error::shape(format!("pool_frames dims {:?} over {:?}", wd, xd)));
        }
        let (f, r) = (wd[0], wd[1]);
        let d = xd[1];
        let wv = self.value(weights).data();
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); f * d];
        for fi in 0..f {
            let orow = &mut out[fi * d..(fi + 1) * d];
            for ri in 0..r {
                let wgt = wv[fi * r + ri];
                let xrow = &xv[(fi * r + ri) * d..(fi * r + ri + 1) * d];
                for (o, &xvv) in orow.iter_mut().zip(xrow) {
                    *o += wgt * xvv;
                }
            }
        }
        let v = Tensor::new(vec![f, d], out)?;
        Ok(self.binary(v, weights, x, Op::PoolFrames { weights, x }))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "{} dims {:?} vs {:?}",
                what,
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage("backward requires a scalar loss"));
        }
        let mut g: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                g[i] = None;
                continue;
            }
            let Some(gi) = g[i].take() else { continue };
            self.backprop_node(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        Ok(Grads { g })
    }

    fn backprop_node(&self, i: usize, gi: &Tensor<S>, g: &mut [Option<Tensor<S>>]) {
        let gd = gi.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(g, *a, gd.iter().copied());
                self.accum(g, *b, gd.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accum(g, *a, gd.iter().copied());
                self.accum(g, *b, gd.iter().map(|&x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data();
                self.accum(g, *a, gd.iter().zip(bv.iter()).map(|(&gx, &y)| gx * y));
                self.accum(g, *b, gd.iter().zip(av.iter()).map(|(&gx, &x)| gx * x));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(g, *a, gd.iter().map(|&x| x * c));
            }
            Op::AddConst(a, _) => {
                self.accum(g, *a, gd.iter().copied());
            }
            Op::AddBias(a, bias) => {
                self.accum(g, *a, gd.iter().copied());
                let c = self.dims(*bias)[0];
                let r = gd.len() / c;
                let mut db = vec![S::zero(); c];
                for i2 in 0..r {
                    for j in 0..c {
                        db[j] += gd[i2 * c + j];
                    }
                }
                self.accum(g, *bias, db.into_iter());
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                if self.nodes[a.0].needs_grad {
                    // dA = dC * B^T (transposed view via strides)
                    let bv = self.value(*b).data();
                    let mut da = vec![S::zero(); m * k];
                    S::gemm_strided(m, n, k, gd, n as isize, 1, bv, 1, n as isize, S::zero(), &mut da);
                    self.accum(g, *a, da.into_iter());
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T * dC
                    let av = self.value(*a).data();
                    let mut db = vec![S::zero(); k * n];
                    S::gemm_strided(k, m, n, av, 1, k as isize, gd, n as isize, 1, S::zero(), &mut db);
                    self.accum(g, *b, db.into_iter());
                }
            }
            Op::Transpose(a) => {
                let (c, r) = (self.dims(Var(i))[0], self.dims(Var(i))[1]);
                let mut da = vec![S::zero(); r * c];
                for p in 0..c {
                    for q in 0..r {
                        da[q * c + p] = gd[p * r + q];
                    }
                }
                self.accum(g, *a, da.into_iter());
            }
            Op::Reshape(a) => {
                self.accum(g, *a, gd.iter().copied());
            }
            Op::SliceRows(a, start, len) => {
                let ad = self.dims(*a);
                let c = ad[1];
                let mut da = vec![S::zero(); ad[0] * c];
                da[start * c..(start + len) * c].copy_from_slice(gd);
                self.accum(g, *a, da.into_iter());
            }
            Op::SliceCols(a, start, len) => {
                let ad = self.dims(*a);
                let (r, c) = (ad[0], ad[1]);
                let mut da = vec![S::zero(); r * c];
                for i2 in 0..r {
                    for j in 0..*len {
                        da[i2 * c + start + j] = gd[i2 * len + j];
                    }
                }
                self.accum(g, *a, da.into_iter());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.nodes[p.0].needs_grad {
                        self.accum(g, p, gd[offset..offset + n].iter().copied());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.dims(parts[0])[0];
                let total = self.dims(Var(i))[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p)[1];
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Vec::with_capacity(r * w);
                        for i2 in 0..r {
                            dp.extend_from_slice(&gd[i2 * total + offset..i2 * total + offset + w]);
                        }
                        self.accum(g, p, dp.into_iter());
                    }
                    offset += w;
                }
            }
            Op::Softmax(a, axis) => {
                let y = self.value(Var(i)).data();
                let ad = self.dims(*a);
                let (outer, m, inner) = split_axis(ad, *axis);
                let mut da = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * m + j) * inner + ii;
                        let mut dot = S::zero();
                        for j in 0..m {
                            dot += gd[idx(j)] * y[idx(j)];
                        }
                        for j in 0..m {
                            da[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accum(g, *a, da.into_iter());
            }
            Op::LogSoftmax(a) => {
                let y = self.value(Var(i)).data();
                let ad = self.dims(*a);
                let (rows, c) = if ad.len() == 1 { (1, ad[0]) } else { (ad[0], ad[1]) };
                let mut da = vec![S::zero(); y.len()];
                for r in 0..rows {
                    let mut sum = S::zero();
                    for j in 0..c {
                        sum += gd[r * c + j];
                    }
                    for j in 0..c {
                        let e = y[r * c + j].exp();
                        da[r * c + j] = gd[r * c + j] - e * sum;
                    }
                }
                self.accum(g, *a, da.into_iter());
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let d = self.dims(*gamma)[0];
                let n_vec = xv.len() / d;
                let mut dx = vec![S::zero(); xv.len()];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                let nd = S::of_usize(d);
                for v in 0..n_vec {
                    let s = &xv[v * d..(v + 1) * d];
                    let gslice = &gd[v * d..(v + 1) * d];
                    let (mean, var) = mean_var(s);
                    let inv = S::one() / (var + *eps).sqrt();
                    let mut dxhat = vec![S::zero(); d];
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for j in 0..d {
                        let xhat = (s[j] - mean) * inv;
                        dgamma[j] += gslice[j] * xhat;
                        dbeta[j] += gslice[j];
                        dxhat[j] = gslice[j] * gv[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat;
                    }
                    for j in 0..d {
                        let xhat = (s[j] - mean) * inv;
                        dx[v * d + j] =
                            inv / nd * (nd * dxhat[j] - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                self.accum(g, *x, dx.into_iter());
                self.accum(g, *gamma, dgamma.into_iter());
                self.accum(g, *beta, dbeta.into_iter());
            }
            Op::ChannelNorm { x, gamma, beta, eps } => {
                let xd = self.dims(*x);
                let (t, h, w, c) = (xd[0], xd[1], xd[2], xd[3]);
                let hw = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dx = vec![S::zero(); xv.len()];
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let n = S::of_usize(hw);
                for ti in 0..t {
                    for ci in 0..c {
                        let at = |p: usize| (ti * hw + p) * c + ci;
                        let mut sum = S::zero();
                        let mut sq = S::zero();
                        for p in 0..hw {
                            let v = xv[at(p)];
                            sum += v;
                            sq += v * v;
                        }
                        let mean = sum / n;
                        let var = sq / n - mean * mean;
                        let inv = S::one() / (var + *eps).sqrt();
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for p in 0..hw {
                            let xhat = (xv[at(p)] - mean) * inv;
                            let dy = gd[at(p)];
                            dgamma[ci] += dy * xhat;
                            dbeta[ci] += dy;
                            let dxhat = dy * gv[ci];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for p in 0..hw {
                            let xhat = (xv[at(p)] - mean) * inv;
                            let dxhat = gd[at(p)] * gv[ci];
                            dx[at(p)] = inv / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                }
                self.accum(g, *x, dx.into_iter());
                self.accum(g, *gamma, dgamma.into_iter());
                self.accum(g, *beta, dbeta.into_iter());
            }
            Op::BatchNorm { x, gamma, beta, mean, var, eps, training } => {
                let xd = self.dims(*x);
                let c = xd[3];
                let n = self.value(*x).numel() / c;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let (m_t, v_t) = if *training {
                    batch_stats(self.value(*x), c)
                } else {
                    (mean.clone(), var.clone())
                };
                let mv = m_t.data();
                let vv = v_t.data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for (idx, &dy) in gd.iter().enumerate() {
                    let ci = idx % c;
                    let inv = S::one() / (vv[ci] + *eps).sqrt();
                    dgamma[ci] += dy * (xv[idx] - mv[ci]) * inv;
                    dbeta[ci] += dy;
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![S::zero(); xv.len()];
                    if *training {
                        let nf = S::of_usize(n);
                        // per channel: dx = inv/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                        let mut sum_dxhat = vec![S::zero(); c];
                        let mut sum_dxhat_xhat = vec![S::zero(); c];
                        for (idx, &dy) in gd.iter().enumerate() {
                            let ci = idx % c;
                            let inv = S::one() / (vv[ci] + *eps).sqrt();
                            let xhat = (xv[idx] - mv[ci]) * inv;
                            let dxhat = dy * gv[ci];
                            sum_dxhat[ci] += dxhat;
                            sum_dxhat_xhat[ci] += dxhat * xhat;
                        }
                        for (idx, &dy) in gd.iter().enumerate() {
                            let ci = idx % c;
                            let inv = S::one() / (vv[ci] + *eps).sqrt();
                            let xhat = (xv[idx] - mv[ci]) * inv;
                            let dxhat = dy * gv[ci];
                            dx[idx] = inv / nf
                                * (nf * dxhat - sum_dxhat[ci] - xhat * sum_dxhat_xhat[ci]);
                        }
                    } else {
                        for (idx, &dy) in gd.iter().enumerate() {
                            let ci = idx % c;
                            dx[idx] = dy * gv[ci] / (vv[ci] + *eps).sqrt();
                        }
                    }
                    self.accum(g, *x, dx.into_iter());
                }
                self.accum(g, *gamma, dgamma.into_iter());
                self.accum(g, *beta, dbeta.into_iter());
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accum(
                    g,
                    *a,
                    gd.iter()
                        .zip(av.iter())
                        .map(|(&gx, &x)| if x > S::zero() { gx } else { S::zero() }),
                );
            }
            Op::Elu1(a) => {
                let av = self.value(*a).data();
                self.accum(
                    g,
                    *a,
                    gd.iter()
                        .zip(av.iter())
                        .map(|(&gx, &x)| if x > S::zero() { gx } else { gx * x.exp() }),
                );
            }
            Op::Sigmoid(a) => {
                let y = self.value(Var(i)).data();
                self.accum(
                    g,
                    *a,
                    gd.iter().zip(y.iter()).map(|(&gx, &s)| gx * s * (S::one() - s)),
                );
            }
            Op::ReplicatePadT(a, pad) => {
                let ad = self.dims(*a);
                let (t, frame) = (ad[0], ad[1] * ad[2] * ad[3]);
                let mut da = vec![S::zero(); t * frame];
                for src in 0..t + 2 * pad {
                    let dst = src.saturating_sub(*pad).min(t - 1);
                    for j in 0..frame {
                        da[dst * frame + j] += gd[src * frame + j];
                    }
                }
                self.accum(g, *a, da.into_iter());
            }
            Op::Conv { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv_backward(
                    self.value(*x),
                    self.value(*w),
                    gi,
                    *stride,
                    *pad,
                    self.nodes[x.0].needs_grad,
                    self.nodes[w.0].needs_grad,
                );
                if self.nodes[x.0].needs_grad {
                    self.accum(g, *x, dx.into_iter());
                }
                if self.nodes[w.0].needs_grad {
                    self.accum(g, *w, dw.into_iter());
                }
                self.accum(g, *b, db.into_iter());
            }
            Op::AvgPoolGrid { x, h, w } => {
                let d = self.dims(*x)[1];
                let (oh, ow) = (h / 2, w / 2);
                let quarter = S::of_f64(0.25);
                let mut dx = vec![S::zero(); h * w * d];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = (oy * ow + ox) * d;
                        for (dy2, dx2) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i2 = ((2 * oy + dy2) * w + (2 * ox + dx2)) * d;
                            for j in 0..d {
                                dx[i2 + j] += gd[o + j] * quarter;
                            }
                        }
                    }
                }
                self.accum(g, *x, dx.into_iter());
            }
            Op::MeanOverRows(a) => {
                let ad = self.dims(*a);
                let (r, c) = (ad[0], ad[1]);
                let inv = S::one() / S::of_usize(r);
                let mut da = Vec::with_capacity(r * c);
                for _ in 0..r {
                    da.extend(gd.iter().map(|&gx| gx * inv));
                }
                self.accum(g, *a, da.into_iter());
            }
            Op::SumOverRows(a) => {
                let ad = self.dims(*a);
                let (r, c) = (ad[0], ad[1]);
                let mut da = Vec::with_capacity(r * c);
                for _ in 0..r {
                    da.extend_from_slice(gd);
                }
                self.accum(g, *a, da.into_iter());
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                let gx = gd[0];
                self.accum(g, *a, std::iter::repeat(gx).take(n));
            }
            Op::GatherRows { table, ids } => {
                let td = self.dims(*table);
                let d = td[1];
                let mut dt = vec![S::zero(); td[0] * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[row * d + j];
                    }
                }
                self.accum(g, *table, dt.into_iter());
            }
            Op::PickLogProb { x, ids } => {
                let xd = self.dims(*x);
                let c = xd[1];
                let mut dx = vec![S::zero(); xd[0] * c];
                for (row, &id) in ids.iter().enumerate() {
                    dx[row * c + id] = gd[row];
                }
                self.accum(g, *x, dx.into_iter());
            }
            Op::RowDiv { x, denom } => {
                let xd = self.dims(*x);
                let (r, c) = (xd[0], xd[1]);
                let xv = self.value(*x).data();
                let dv = self.value(*denom).data();
                if self.nodes[x.0].needs_grad {
                    let mut dx = Vec::with_capacity(r * c);
                    for i2 in 0..r {
                        for j in 0..c {
                            dx.push(gd[i2 * c + j] / dv[i2]);
                        }
                    }
                    self.accum(g, *x, dx.into_iter());
                }
                if self.nodes[denom.0].needs_grad {
                    let mut dd = vec![S::zero(); r];
                    for i2 in 0..r {
                        for j in 0..c {
                            let idx = i2 * c + j;
                            dd[i2] -= gd[idx] * xv[idx] / (dv[i2] * dv[i2]);
                        }
                    }
                    self.accum(g, *denom, dd.into_iter());
                }
            }
            Op::AddTiled { x, tile } => {
                self.accum(g, *x, gd.iter().copied());
                if self.nodes[tile.0].needs_grad {
                    let td = self.dims(*tile);
                    let (rows, d) = (td[0], td[1]);
                    let mut dt = vec![S::zero(); rows * d];
                    for (i, &gx) in gd.iter().enumerate() {
                        dt[(i / d % rows) * d + i % d] += gx;
                    }
                    self.accum(g, *tile, dt.into_iter());
                }
            }
            Op::FrameAttention { q, k, v, n_heads, rows } => {
                let (dq, dk, dv) = frame_attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    gd,
                    self.value(*q).numel() / self.dims(*q)[1],
                    self.dims(*q)[1],
                    *n_heads,
                    *rows,
                );
                self.accum(g, *q, dq.into_iter());
                self.accum(g, *k, dk.into_iter());
                self.accum(g, *v, dv.into_iter());
            }
            Op::PoolFrames { weights, x } => {
                let wd = self.dims(*weights);
                let (f, r) = (wd[0], wd[1]);
                let d = self.dims(*x)[1];
                let wv = self.value(*weights).data();
                let xv = self.value(*x).data();
                if self.nodes[weights.0].needs_grad {
                    let mut dw = vec![S::zero(); f * r];
                    for fi in 0..f {
                        let grow = &gd[fi * d..(fi + 1) * d];
                        for ri in 0..r {
                            let xrow = &xv[(fi * r + ri) * d..(fi * r + ri + 1) * d];
                            let mut acc = S::zero();
                            for (gx, xvv) in grow.iter().zip(xrow) {
                                acc += *gx * *xvv;
                            }
                            dw[fi * r + ri] = acc;
                        }
                    }
                    self.accum(g, *weights, dw.into_iter());
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![S::zero(); f * r * d];
                    for fi in 0..f {
                        let grow = &gd[fi * d..(fi + 1) * d];
                        for ri in 0..r {
                            let wgt = wv[fi * r + ri];
                            let drow = &mut dx[(fi * r + ri) * d..(fi * r + ri + 1) * d];
                            for (dvv, gx) in drow.iter_mut().zip(grow) {
                                *dvv = wgt * *gx;
                            }
                        }
                    }
                    self.accum(g, *x, dx.into_iter());
                }
            }
            Op::BceMean { probs, labels } => {
                let pv = self.value(*probs).data();
                let n = S::of_usize(labels.len());
                let gx = gd[0];
                let one = S::one();
                self.accum(
                    g,
                    *probs,
                    pv.iter().zip(labels.iter()).map(move |(&p, &y)| {
                        let pc = clamp_prob(p);
                        if pc != p {
                            S::zero()
                        } else {
                            gx * (pc - y) / (pc * (one - pc)) / n
                        }
                    }),
                );
            }
        }
    }

    fn accum(&self, g: &mut [Option<Tensor<S>>], v: Var, contrib: impl Iterator<Item = S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut g[v.0];
        match slot {
            Some(t) => {
                for (dst, c) in t.data_mut().iter_mut().zip(contrib) {
                    *dst += c;
                }
            }
            None => {
                let dims = self.nodes[v.0].value.dims().to_vec();
                let data: Vec<S> = contrib.collect();
                debug_assert_eq!(data.len(), self.nodes[v.0].value.numel());
                *slot = Some(Tensor::new(dims, data).expect("gradient shape"));
            }
        }
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    Tensor::new(
        a.dims().to_vec(),
        a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("zip_map shape")
}

fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

fn mean_var<S: Scalar>(s: &[S]) -> (S, S) {
    let n = S::of_usize(s.len());
    let mut sum = S::zero();
    for &x in s {
        sum += x;
    }
    let mean = sum / n;
    let mut sq = S::zero();
    for &x in s {
        let d = x - mean;
        sq += d * d;
    }
    (mean, sq / n)
}

fn clamp_prob<S: Scalar>(p: S) -> S {
    let lo = S::of_f64(1e-7);
    let hi = S::one() - lo;
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

/// Per-channel mean and biased variance over all positions of `[T,H,W,C]`.
pub fn batch_stats<S: Scalar>(x: &Tensor<S>, c: usize) -> (Tensor<S>, Tensor<S>) {
    let n = x.numel() / c;
    let nf = S::of_usize(n);
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for (i, &v) in x.data().iter().enumerate() {
        mean[i % c] += v;
    }
    for m in mean.iter_mut() {
        *m /= nf;
    }
    for (i, &v) in x.data().iter().enumerate() {
        let d = v - mean[i % c];
        var[i % c] += d * d;
    }
    for v in var.iter_mut() {
        *v /= nf;
    }
    (
        Tensor::new(vec![c], mean).expect("stats shape"),
        Tensor::new(vec![c], var).expect("stats shape"),
    )
}

fn pack_head<S: Scalar>(src: &[S], base_row: usize, rows: usize, d: usize, col: usize, dh: usize, dst: &mut [S]) {
    for i in 0..rows {
        let row = (base_row + i) * d + col;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[row..row + dh]);
    }
}

fn softmax_rows_inplace<S: Scalar>(m: &mut [S], rows: usize, cols: usize) {
    for i in 0..rows {
        let row = &mut m[i * cols..(i + 1) * cols];
        let mut mx = S::neg_infinity();
        for &x in row.iter() {
            if x > mx {
                mx = x;
            }
        }
        let mut sum = S::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

fn frame_attention_forward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    n: usize,
    d: usize,
    n_heads: usize,
    rows: usize,
) -> Vec<S> {
    let frames = n / rows;
    let dh = d / n_heads;
    let scale = S::of_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![S::zero(); n * d];
    let mut qh = vec![S::zero(); rows * dh];
    let mut kht = vec![S::zero(); dh * rows];
    let mut vh = vec![S::zero(); rows * dh];
    let mut scores = vec![S::zero(); rows * rows];
    let mut oh = vec![S::zero(); rows * dh];
    for f in 0..frames {
        let base = f * rows;
        for h in 0..n_heads {
            let col = h * dh;
            pack_head(q, base, rows, d, col, dh, &mut qh);
            for i in 0..rows {
                for c in 0..dh {
                    kht[c * rows + i] = k[(base + i) * d + col + c];
                }
            }
            pack_head(v, base, rows, d, col, dh, &mut vh);
            S::gemm(rows, dh, rows, &qh, &kht, S::zero(), &mut scores);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            softmax_rows_inplace(&mut scores, rows, rows);
            S::gemm(rows, rows, dh, &scores, &vh, S::zero(), &mut oh);
            for i in 0..rows {
                out[(base + i) * d + col..(base + i) * d + col + dh]
                    .copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn frame_attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    gout: &[S],
    n: usize,
    d: usize,
    n_heads: usize,
    rows: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let frames = n / rows;
    let dh = d / n_heads;
    let scale = S::of_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![S::zero(); n * d];
    let mut dk = vec![S::zero(); n * d];
    let mut dv = vec![S::zero(); n * d];
    let mut qh = vec![S::zero(); rows * dh];
    let mut kh = vec![S::zero(); rows * dh];
    let mut kht = vec![S::zero(); dh * rows];
    let mut vht = vec![S::zero(); dh * rows];
    let mut vh = vec![S::zero(); rows * dh];
    let mut goh = vec![S::zero(); rows * dh];
    let mut attn = vec![S::zero(); rows * rows];
    let mut attn_t = vec![S::zero(); rows * rows];
    let mut dattn = vec![S::zero(); rows * rows];
    let mut buf = vec![S::zero(); rows * dh];
    for f in 0..frames {
        let base = f * rows;
        for h in 0..n_heads {
            let col = h * dh;
            pack_head(q, base, rows, d, col, dh, &mut qh);
            pack_head(k, base, rows, d, col, dh, &mut kh);
            pack_head(v, base, rows, d, col, dh, &mut vh);
            pack_head(gout, base, rows, d, col, dh, &mut goh);
            for i in 0..rows {
                for c in 0..dh {
                    kht[c * rows + i] = kh[i * dh + c];
                    vht[c * rows + i] = vh[i * dh + c];
                }
            }
            // recompute attention probabilities
            S::gemm(rows, dh, rows, &qh, &kht, S::zero(), &mut attn);
            for s in attn.iter_mut() {
                *s *= scale;
            }
            softmax_rows_inplace(&mut attn, rows, rows);
            // dV = attn^T dOut
            for i in 0..rows {
                for j in 0..rows {
                    attn_t[j * rows + i] = attn[i * rows + j];
                }
            }
            S::gemm(rows, rows, dh, &attn_t, &goh, S::zero(), &mut buf);
            for i in 0..rows {
                for c in 0..dh {
                    dv[(base + i) * d + col + c] += buf[i * dh + c];
                }
            }
            // dAttn = dOut V^T, then the row-wise softmax backward
            S::gemm(rows, dh, rows, &goh, &vht, S::zero(), &mut dattn);
            for i in 0..rows {
                let arow = &attn[i * rows..(i + 1) * rows];
                let drow = &mut dattn[i * rows..(i + 1) * rows];
                let mut dot = S::zero();
                for (a, dd) in arow.iter().zip(drow.iter()) {
                    dot += *a * *dd;
                }
                for (a, dd) in arow.iter().zip(drow.iter_mut()) {
                    *dd = *a * (*dd - dot) * scale;
                }
            }
            // dQ = dScores K, dK = dScores^T Q
            S::gemm(rows, rows, dh, &dattn, &kh, S::zero(), &mut buf);
            for i in 0..rows {
                for c in 0..dh {
                    dq[(base + i) * d + col + c] += buf[i * dh + c];
                }
            }
            for i in 0..rows {
                for j in 0..rows {
                    attn_t[j * rows + i] = dattn[i * rows + j];
                }
            }
            S::gemm(rows, rows, dh, &attn_t, &qh, S::zero(), &mut buf);
            for i in 0..rows {
                for c in 0..dh {
                    dk[(base + i) * d + col + c] += buf[i * dh + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

fn conv_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: [usize; 3],
    pad: [usize; 3],
    od: [usize; 3],
) -> Tensor<S> {
    let xd = x.dims();
    let wd = w.dims();
    let (t, h, ww, ci) = (xd[0], xd[1], xd[2], xd[3]);
    let (kt, kh, kw, co) = (wd[0], wd[1], wd[2], wd[4]);
    let (xv, wv, bv) = (x.data(), w.data(), b.data());
    let mut out = vec![S::zero(); od[0] * od[1] * od[2] * co];
    for t0 in 0..od[0] {
        for y0 in 0..od[1] {
            for x0 in 0..od[2] {
                let orow = ((t0 * od[1] + y0) * od[2] + x0) * co;
                out[orow..orow + co].copy_from_slice(bv);
                for dt in 0..kt {
                    let ti = (t0 * stride[0] + dt) as isize - pad[0] as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    for dy in 0..kh {
                        let yi = (y0 * stride[1] + dy) as isize - pad[1] as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let xi = (x0 * stride[2] + dx) as isize - pad[2] as isize;
                            if xi < 0 || xi >= ww as isize {
                                continue;
                            }
                            let xrow =
                                (((ti as usize) * h + yi as usize) * ww + xi as usize) * ci;
                            let wblock = ((dt * kh + dy) * kw + dx) * ci * co;
                            for c in 0..ci {
                                let xval = xv[xrow + c];
                                let wrow = wblock + c * co;
                                let orow_s = &mut out[orow..orow + co];
                                for (o, wv2) in orow_s.iter_mut().zip(&wv[wrow..wrow + co]) {
                                    *o += xval * *wv2;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![od[0], od[1], od[2], co], out).expect("conv shape")
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gout: &Tensor<S>,
    stride: [usize; 3],
    pad: [usize; 3],
    need_dx: bool,
    need_dw: bool,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let xd = x.dims();
    let wd = w.dims();
    let odn = gout.dims();
    let (t, h, ww, ci) = (xd[0], xd[1], xd[2], xd[3]);
    let (kt, kh, kw, co) = (wd[0], wd[1], wd[2], wd[4]);
    let (xv, wv, gv) = (x.data(), w.data(), gout.data());
    let mut dx = vec![S::zero(); if need_dx { xv.len() } else { 0 }];
    let mut dw = vec![S::zero(); if need_dw { wv.len() } else { 0 }];
    let mut db = vec![S::zero(); co];
    // weights transposed per tap to [k][co][ci] so the dX update runs along
    // contiguous ci; dW is accumulated in the same layout and folded back
    let k_taps = kt * kh * kw;
    let mut wt = vec![S::zero(); k_taps * co * ci];
    for k in 0..k_taps {
        for c in 0..ci {
            for o in 0..co {
                wt[(k * co + o) * ci + c] = wv[(k * ci + c) * co + o];
            }
        }
    }
    let mut dwt = vec![S::zero(); if need_dw { wt.len() } else { 0 }];
    for t0 in 0..odn[0] {
        for y0 in 0..odn[1] {
            for x0 in 0..odn[2] {
                let orow = ((t0 * odn[1] + y0) * odn[2] + x0) * co;
                let grow = &gv[orow..orow + co];
                for (o, gval) in grow.iter().enumerate() {
                    db[o] += *gval;
                }
                for dt in 0..kt {
                    let ti = (t0 * stride[0] + dt) as isize - pad[0] as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    for dy in 0..kh {
                        let yi = (y0 * stride[1] + dy) as isize - pad[1] as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        for dx2 in 0..kw {
                            let xi = (x0 * stride[2] + dx2) as isize - pad[2] as isize;
                            if xi < 0 || xi >= ww as isize {
                                continue;
                            }
                            let xrow =
                                (((ti as usize) * h + yi as usize) * ww + xi as usize) * ci;
                            let k = (dt * kh + dy) * kw + dx2;
                            if need_dx {
                                let drow = &mut dx[xrow..xrow + ci];
                                for (o, gval) in grow.iter().enumerate() {
                                    let wrow = &wt[(k * co + o) * ci..(k * co + o + 1) * ci];
                                    for (d, wval) in drow.iter_mut().zip(wrow) {
                                        *d += *gval * *wval;
                                    }
                                }
                            }
                            if need_dw {
                                let xrow_s = &xv[xrow..xrow + ci];
                                for (o, gval) in grow.iter().enumerate() {
                                    let dwrow =
                                        &mut dwt[(k * co + o) * ci..(k * co + o + 1) * ci];
                                    for (d, xval) in dwrow.iter_mut().zip(xrow_s) {
                                        *d += *gval * *xval;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if need_dw {
        for k in 0..k_taps {
            for c in 0..ci {
                for o in 0..co {
                    dw[(k * ci + c) * co + o] = dwt[(k * co + o) * ci + c];
                }
            }
        }
    }
    (dx, dw, db)
}
