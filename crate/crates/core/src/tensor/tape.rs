//! Recorded computation tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding the forward value and enough
//! context to accumulate parent gradients later. `backward` walks the
//! nodes in reverse creation order, so a node is always visited after all
//! of its consumers. The tape is dropped after each pass.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{numel, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: u32,
}

/// Output-column range [lo, hi) for which `j*sw + b - pw` lands inside
/// an input row of width `w`.
fn conv_j_range(w: usize, pw: usize, b: usize, sw: usize, ow: usize) -> (usize, usize) {
    let lo = if b >= pw { 0 } else { (pw - b + sw - 1) / sw };
    let hi = if w + pw > b { (((w + pw - b - 1) / sw) + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Scale(u32, f64),
    Relu(u32),
    Matmul(u32, u32),
    Transpose2(u32),
    Reshape(u32),
    SoftmaxRows(u32),
    Conv2d {
        x: u32,
        k: u32,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    ConvTranspose2d {
        x: u32,
        k: u32,
        stride: (usize, usize),
    },
    AddChannelBias {
        x: u32,
        b: u32,
    },
    UpsampleNearest2(u32),
    SelectChannel {
        x: u32,
        channel: usize,
    },
    NarrowChannels {
        x: u32,
        start: usize,
    },
    ConcatChannels(Vec<u32>),
    Sum(u32),
    Mean(u32),
    SumSqDiff(u32, u32),
    Mse(u32, u32),
}

pub struct Tape {
    id: u64,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>, // empty unless the node needs a gradient
    needs: Vec<bool>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let idx = self.ops.len() as u32;
        self.grads.push(if needs { vec![0.0; value.len()] } else { Vec::new() });
        self.shapes.push(shape);
        self.values.push(value);
        self.needs.push(needs);
        self.ops.push(op);
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var, op: &'static str) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::invalid(op, "var belongs to a different tape"));
        }
        Ok(v.idx as usize)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.idx as usize]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.idx as usize]
    }

    /// Gradient accumulated for `v` by the last `backward`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let i = v.idx as usize;
        if self.needs[i] {
            Some(&self.grads[i])
        } else {
            None
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(&self.shapes[v.idx as usize], self.values[v.idx as usize].clone())
            .expect("tape node is well formed")
    }

    /// Record an input node, copying the tensor's data onto the tape.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "leaf",
                format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "add")?, self.check(b, "add")?);
        if self.shapes[ia] != self.shapes[ib] {
            return Err(Error::shape("add", &self.shapes[ia], &self.shapes[ib]));
        }
        let value: Vec<f64> = self.values[ia]
            .iter()
            .zip(&self.values[ib])
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs[ia] || self.needs[ib];
        Ok(self.push(self.shapes[ia].clone(), value, needs, Op::Add(a.idx, b.idx)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "sub")?, self.check(b, "sub")?);
        if self.shapes[ia] != self.shapes[ib] {
            return Err(Error::shape("sub", &self.shapes[ia], &self.shapes[ib]));
        }
        let value: Vec<f64> = self.values[ia]
            .iter()
            .zip(&self.values[ib])
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs[ia] || self.needs[ib];
        Ok(self.push(self.shapes[ia].clone(), value, needs, Op::Sub(a.idx, b.idx)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a, "scale")?;
        let value: Vec<f64> = self.values[ia].iter().map(|x| x * s).collect();
        Ok(self.push(self.shapes[ia].clone(), value, self.needs[ia], Op::Scale(a.idx, s)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "relu")?;
        let value: Vec<f64> = self.values[ia].iter().map(|x| x.max(0.0)).collect();
        Ok(self.push(self.shapes[ia].clone(), value, self.needs[ia], Op::Relu(a.idx)))
    }

    /// Standard matrix product; backward accumulates dA = G·Bᵀ and dB = Aᵀ·G.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "matmul")?, self.check(b, "matmul")?);
        let (sa, sb) = (&self.shapes[ia], &self.shapes[ib]);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = self.values[ia][i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    value[i * n + j] += av * self.values[ib][p * n + j];
                }
            }
        }
        let needs = self.needs[ia] || self.needs[ib];
        Ok(self.push(vec![m, n], value, needs, Op::Matmul(a.idx, b.idx)))
    }

    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "transpose")?;
        let sa = &self.shapes[ia];
        if sa.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected rank 2, got {sa:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = self.values[ia][i * n + j];
            }
        }
        Ok(self.push(vec![n, m], value, self.needs[ia], Op::Transpose2(a.idx)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a, "reshape")?;
        if numel(shape) != self.values[ia].len() {
            return Err(Error::shape("reshape", &self.shapes[ia], shape));
        }
        let value = self.values[ia].clone();
        Ok(self.push(shape.to_vec(), value, self.needs[ia], Op::Reshape(a.idx)))
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "softmax_rows")?;
        let sa = &self.shapes[ia];
        if sa.len() != 2 {
            return Err(Error::invalid("softmax_rows", format!("expected rank 2, got {sa:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.values[ia][i * n..(i + 1) * n];
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - hi).exp();
                value[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                value[i * n + j] /= denom;
            }
        }
        Ok(self.push(vec![m, n], value, self.needs[ia], Op::SoftmaxRows(a.idx)))
    }

    /// Cross-correlation of `x: [C,H,W]` with `k: [K,C,kh,kw]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (ix, ik) = (self.check(x, "conv2d")?, self.check(k, "conv2d")?);
        let (sx, sk) = (self.shapes[ix].clone(), self.shapes[ik].clone());
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] {
            return Err(Error::shape("conv2d", &sx, &sk));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * ph, w + 2 * pw),
            ));
        }
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        let mut value = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            for c in 0..c_in {
                let xc = &self.values[ix][c * h * w..(c + 1) * h * w];
                for a in 0..kh {
                    for b in 0..kw {
                        let wv = self.values[ik][((o * c_in + c) * kh + a) * kw + b];
                        let (j_lo, j_hi) = conv_j_range(w, pw, b, sw, ow);
                        for i in 0..oh {
                            let y = (i * sh + a) as isize - ph as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = &xc[y as usize * w..(y as usize + 1) * w];
                            let orow = &mut value[(o * oh + i) * ow..(o * oh + i + 1) * ow];
                            for j in j_lo..j_hi {
                                orow[j] += wv * xrow[j * sw + b - pw];
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs[ix] || self.needs[ik];
        Ok(self.push(
            vec![c_out, oh, ow],
            value,
            needs,
            Op::Conv2d { x: x.idx, k: k.idx, stride, padding },
        ))
    }

    /// Transposed convolution with kernel extent equal to stride, so each
    /// input cell paints a disjoint `mh x mw` block: `x: [C,H,W]`,
    /// `k: [C,K,mh,mw]` gives `[K, H*mh, W*mw]`. Adjoint of `conv2d` with
    /// the same kernel, stride = kernel size, no padding.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: (usize, usize)) -> Result<Var> {
        let (ix, ik) = (self.check(x, "conv_transpose2d")?, self.check(k, "conv_transpose2d")?);
        let (sx, sk) = (self.shapes[ix].clone(), self.shapes[ik].clone());
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[0] {
            return Err(Error::shape("conv_transpose2d", &sx, &sk));
        }
        let (mh, mw) = stride;
        if mh < 1 || mw < 1 {
            return Err(Error::invalid("conv_transpose2d", "stride must be at least 1"));
        }
        if sk[2] != mh || sk[3] != mw {
            return Err(Error::invalid(
                "conv_transpose2d",
                format!("kernel extent {}x{} must equal stride {mh}x{mw}", sk[2], sk[3]),
            ));
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let c_out = sk[1];
        let (oh, ow) = (h * mh, w * mw);
        let mut value = vec![0.0; c_out * oh * ow];
        for c in 0..c_in {
            for i in 0..h {
                for j in 0..w {
                    let xv = self.values[ix][(c * h + i) * w + j];
                    if xv == 0.0 {
                        continue;
                    }
                    for o in 0..c_out {
                        for a in 0..mh {
                            for b in 0..mw {
                                value[(o * oh + i * mh + a) * ow + j * mw + b] +=
                                    xv * self.values[ik][((c * c_out + o) * mh + a) * mw + b];
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs[ix] || self.needs[ik];
        Ok(self.push(
            vec![c_out, oh, ow],
            value,
            needs,
            Op::ConvTranspose2d { x: x.idx, k: k.idx, stride },
        ))
    }

    /// Per-channel bias: `x: [C,H,W] + b: [C]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x, "add_channel_bias")?, self.check(b, "add_channel_bias")?);
        let (sx, sb) = (&self.shapes[ix], &self.shapes[ib]);
        if sx.len() != 3 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::shape("add_channel_bias", sx, sb));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let mut value = self.values[ix].clone();
        for ch in 0..c {
            let bias = self.values[ib][ch];
            for v in &mut value[ch * h * w..(ch + 1) * h * w] {
                *v += bias;
            }
        }
        let needs = self.needs[ix] || self.needs[ib];
        Ok(self.push(sx.clone(), value, needs, Op::AddChannelBias { x: x.idx, b: b.idx }))
    }

    /// Nearest-neighbor 2x spatial upsampling of `[C,H,W]`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x, "upsample_nearest2")?;
        let sx = &self.shapes[ix];
        if sx.len() != 3 {
            return Err(Error::invalid("upsample_nearest2", format!("expected rank 3, got {sx:?}")));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut value = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = self.values[ix][(ch * h + i) * w + j];
                    for a in 0..2 {
                        for b in 0..2 {
                            value[(ch * oh + 2 * i + a) * ow + 2 * j + b] = v;
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], value, self.needs[ix], Op::UpsampleNearest2(x.idx)))
    }

    /// Extract channel `c` of `[C,H,W]` as an `[H,W]` matrix.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let ix = self.check(x, "select_channel")?;
        let sx = &self.shapes[ix];
        if sx.len() != 3 || channel >= sx[0] {
            return Err(Error::invalid(
                "select_channel",
                format!("channel {channel} out of range for {sx:?}"),
            ));
        }
        let (h, w) = (sx[1], sx[2]);
        let value = self.values[ix][channel * h * w..(channel + 1) * h * w].to_vec();
        Ok(self.push(vec![h, w], value, self.needs[ix], Op::SelectChannel { x: x.idx, channel }))
    }

    /// Contiguous channel slice `[start, start+len)` of `[C,H,W]`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x, "narrow_channels")?;
        let sx = &self.shapes[ix];
        if sx.len() != 3 || len == 0 || start + len > sx[0] {
            return Err(Error::invalid(
                "narrow_channels",
                format!("range {start}..{} out of bounds for {sx:?}", start + len),
            ));
        }
        let (h, w) = (sx[1], sx[2]);
        let value = self.values[ix][start * h * w..(start + len) * h * w].to_vec();
        Ok(self.push(vec![len, h, w], value, self.needs[ix], Op::NarrowChannels { x: x.idx, start }))
    }

    /// Concatenate `[Ci,H,W]` parts along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels", "no inputs"));
        }
        let mut idxs = Vec::with_capacity(parts.len());
        for &p in parts {
            idxs.push(self.check(p, "concat_channels")?);
        }
        let (h, w) = {
            let s0 = &self.shapes[idxs[0]];
            if s0.len() != 3 {
                return Err(Error::invalid("concat_channels", format!("expected rank 3, got {s0:?}")));
            }
            (s0[1], s0[2])
        };
        let mut c_total = 0;
        for &i in &idxs {
            let s = &self.shapes[i];
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::shape("concat_channels", &self.shapes[idxs[0]], s));
            }
            c_total += s[0];
        }
        let mut value = Vec::with_capacity(c_total * h * w);
        for &i in &idxs {
            value.extend_from_slice(&self.values[i]);
        }
        let needs = idxs.iter().any(|&i| self.needs[i]);
        Ok(self.push(
            vec![c_total, h, w],
            value,
            needs,
            Op::ConcatChannels(parts.iter().map(|p| p.idx).collect()),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "sum")?;
        let total: f64 = self.values[ia].iter().sum();
        Ok(self.push(vec![], vec![total], self.needs[ia], Op::Sum(a.idx)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "mean")?;
        let n = self.values[ia].len() as f64;
        let total: f64 = self.values[ia].iter().sum();
        Ok(self.push(vec![], vec![total / n], self.needs[ia], Op::Mean(a.idx)))
    }

    /// Σ (a - b)², the squared-error reduction used by the losses.
    pub fn sum_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "sum_sq_diff")?, self.check(b, "sum_sq_diff")?);
        if self.shapes[ia] != self.shapes[ib] {
            return Err(Error::shape("sum_sq_diff", &self.shapes[ia], &self.shapes[ib]));
        }
        let total: f64 = self.values[ia]
            .iter()
            .zip(&self.values[ib])
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs[ia] || self.needs[ib];
        Ok(self.push(vec![], vec![total], needs, Op::SumSqDiff(a.idx, b.idx)))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "mse")?, self.check(b, "mse")?);
        if self.shapes[ia] != self.shapes[ib] {
            return Err(Error::shape("mse", &self.shapes[ia], &self.shapes[ib]));
        }
        let n = self.values[ia].len() as f64;
        let total: f64 = self.values[ia]
            .iter()
            .zip(&self.values[ib])
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs[ia] || self.needs[ib];
        Ok(self.push(vec![], vec![total / n], needs, Op::Mse(a.idx, b.idx)))
    }

    /// Reverse pass from a scalar node. Gradients of all grad-tracked nodes
    /// are available through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss, "backward")?;
        if self.values[il].len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shapes[il]),
            ));
        }
        if !self.needs[il] {
            return Err(Error::invalid("backward", "loss does not depend on any tracked input"));
        }
        self.grads[il][0] = 1.0;
        for i in (0..self.ops.len()).rev() {
            if !self.needs[i] {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            let op = self.ops[i].clone();
            self.accumulate(&op, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn addg(&mut self, node: u32, f: impl FnOnce(&[Vec<f64>], &mut [f64])) {
        let i = node as usize;
        if !self.needs[i] {
            return;
        }
        let mut dst = std::mem::take(&mut self.grads[i]);
        f(&self.values, &mut dst);
        self.grads[i] = dst;
    }

    fn accumulate(&mut self, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.addg(a, |_, d| d.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv));
                self.addg(b, |_, d| d.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv));
            }
            Op::Sub(a, b) => {
                self.addg(a, |_, d| d.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv));
                self.addg(b, |_, d| d.iter_mut().zip(g).for_each(|(x, &gv)| *x -= gv));
            }
            Op::Scale(a, s) => {
                self.addg(a, |_, d| d.iter_mut().zip(g).for_each(|(x, &gv)| *x += s * gv));
            }
            Op::Relu(a) => {
                let ia = a as usize;
                self.addg(a, |vals, d| {
                    for (j, gv) in g.iter().enumerate() {
                        if vals[ia][j] > 0.0 {
                            d[j] += gv;
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (ia, ib) = (a as usize, b as usize);
                let (m, k) = (self.shapes[ia][0], self.shapes[ia][1]);
                let n = self.shapes[ib][1];
                // dA = G · Bᵀ
                self.addg(a, |vals, d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * vals[ib][p * n + j];
                            }
                            d[i * k + p] += acc;
                        }
                    }
                });
                // dB = Aᵀ · G
                self.addg(b, |vals, d| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = vals[ia][i * k + p];
                            let drow = &mut d[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                });
            }
            Op::Transpose2(a) => {
                let ia = a as usize;
                let (m, n) = (self.shapes[ia][0], self.shapes[ia][1]);
                self.addg(a, |_, d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.addg(a, |_, d| d.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv));
            }
            Op::SoftmaxRows(a) => {
                // This node's own output is needed; find it by scanning is
                // avoided: softmax output y satisfies dx = y ⊙ (g - ⟨g,y⟩).
                let ia = a as usize;
                let (m, n) = (self.shapes[ia][0], self.shapes[ia][1]);
                // Recompute y from the input (cheap, stable).
                let mut y = vec![0.0; m * n];
                {
                    let row_src = &self.values[ia];
                    for i in 0..m {
                        let row = &row_src[i * n..(i + 1) * n];
                        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut denom = 0.0;
                        for j in 0..n {
                            let e = (row[j] - hi).exp();
                            y[i * n + j] = e;
                            denom += e;
                        }
                        for j in 0..n {
                            y[i * n + j] /= denom;
                        }
                    }
                }
                self.addg(a, |_, d| {
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[i * n + j] * y[i * n + j];
                        }
                        for j in 0..n {
                            d[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                });
            }
            Op::Conv2d { x, k, stride, padding } => {
                let (ix, ik) = (x as usize, k as usize);
                let (c_in, h, w) = (self.shapes[ix][0], self.shapes[ix][1], self.shapes[ix][2]);
                let (c_out, kh, kw) = (self.shapes[ik][0], self.shapes[ik][2], self.shapes[ik][3]);
                let (sh, sw) = stride;
                let (ph, pw) = padding;
                let oh = (h + 2 * ph - kh) / sh + 1;
                let ow = (w + 2 * pw - kw) / sw + 1;
                self.addg(x, |vals, d| {
                    for o in 0..c_out {
                        for c in 0..c_in {
                            let dxc = &mut d[c * h * w..(c + 1) * h * w];
                            for a in 0..kh {
                                for b in 0..kw {
                                    let wv = vals[ik][((o * c_in + c) * kh + a) * kw + b];
                                    let (j_lo, j_hi) = conv_j_range(w, pw, b, sw, ow);
                                    for i in 0..oh {
                                        let y = (i * sh + a) as isize - ph as isize;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        let grow = &g[(o * oh + i) * ow..(o * oh + i + 1) * ow];
                                        let drow = &mut dxc[y as usize * w..(y as usize + 1) * w];
                                        for j in j_lo..j_hi {
                                            drow[j * sw + b - pw] += wv * grow[j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.addg(k, |vals, d| {
                    for o in 0..c_out {
                        for c in 0..c_in {
                            let xc = &vals[ix][c * h * w..(c + 1) * h * w];
                            for a in 0..kh {
                                for b in 0..kw {
                                    let (j_lo, j_hi) = conv_j_range(w, pw, b, sw, ow);
                                    let mut acc = 0.0;
                                    for i in 0..oh {
                                        let y = (i * sh + a) as isize - ph as isize;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        let grow = &g[(o * oh + i) * ow..(o * oh + i + 1) * ow];
                                        let xrow = &xc[y as usize * w..(y as usize + 1) * w];
                                        for j in j_lo..j_hi {
                                            acc += grow[j] * xrow[j * sw + b - pw];
                                        }
                                    }
                                    d[((o * c_in + c) * kh + a) * kw + b] += acc;
                                }
                            }
                        }
                    }
                });
            }
            Op::ConvTranspose2d { x, k, stride } => {
                let (ix, ik) = (x as usize, k as usize);
                let (c_in, h, w) = (self.shapes[ix][0], self.shapes[ix][1], self.shapes[ix][2]);
                let c_out = self.shapes[ik][1];
                let (mh, mw) = stride;
                let (oh, ow) = (h * mh, w * mw);
                self.addg(x, |vals, d| {
                    for c in 0..c_in {
                        for i in 0..h {
                            for j in 0..w {
                                let mut acc = 0.0;
                                for o in 0..c_out {
                                    for a in 0..mh {
                                        for b in 0..mw {
                                            acc += g[(o * oh + i * mh + a) * ow + j * mw + b]
                                                * vals[ik][((c * c_out + o) * mh + a) * mw + b];
                                        }
                                    }
                                }
                                d[(c * h + i) * w + j] += acc;
                            }
                        }
                    }
                });
                self.addg(k, |vals, d| {
                    for c in 0..c_in {
                        for o in 0..c_out {
                            for a in 0..mh {
                                for b in 0..mw {
                                    let mut acc = 0.0;
                                    for i in 0..h {
                                        for j in 0..w {
                                            acc += vals[ix][(c * h + i) * w + j]
                                                * g[(o * oh + i * mh + a) * ow + j * mw + b];
                                        }
                                    }
                                    d[((c * c_out + o) * mh + a) * mw + b] += acc;
                                }
                            }
                        }
                    }
                });
            }
            Op::AddChannelBias { x, b } => {
                let ix = x as usize;
                let (c, h, w) = (self.shapes[ix][0], self.shapes[ix][1], self.shapes[ix][2]);
                self.addg(x, |_, d| d.iter_mut().zip(g).for_each(|(v, &gv)| *v += gv));
                self.addg(b, |_, d| {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for v in &g[ch * h * w..(ch + 1) * h * w] {
                            acc += v;
                        }
                        d[ch] += acc;
                    }
                });
            }
            Op::UpsampleNearest2(a) => {
                let ia = a as usize;
                let (c, h, w) = (self.shapes[ia][0], self.shapes[ia][1], self.shapes[ia][2]);
                let (oh, ow) = (2 * h, 2 * w);
                self.addg(a, |_, d| {
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let mut acc = 0.0;
                                for a2 in 0..2 {
                                    for b2 in 0..2 {
                                        acc += g[(ch * oh + 2 * i + a2) * ow + 2 * j + b2];
                                    }
                                }
                                d[(ch * h + i) * w + j] += acc;
                            }
                        }
                    }
                });
            }
            Op::SelectChannel { x, channel } => {
                let ix = x as usize;
                let (h, w) = (self.shapes[ix][1], self.shapes[ix][2]);
                self.addg(x, |_, d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[channel * h * w + j] += gv;
                    }
                });
            }
            Op::NarrowChannels { x, start } => {
                let ix = x as usize;
                let (h, w) = (self.shapes[ix][1], self.shapes[ix][2]);
                self.addg(x, |_, d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[start * h * w + j] += gv;
                    }
                });
            }
            Op::ConcatChannels(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.values[p as usize].len();
                    let seg = &g[offset..offset + n];
                    self.addg(p, |_, d| d.iter_mut().zip(seg).for_each(|(v, &gv)| *v += gv));
                    offset += n;
                }
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.addg(a, |_, d| d.iter_mut().for_each(|v| *v += gv));
            }
            Op::Mean(a) => {
                let ia = a as usize;
                let gv = g[0] / self.values[ia].len() as f64;
                self.addg(a, |_, d| d.iter_mut().for_each(|v| *v += gv));
            }
            Op::SumSqDiff(a, b) => {
                let (ia, ib) = (a as usize, b as usize);
                let gv = g[0];
                self.addg(a, |vals, d| {
                    for j in 0..d.len() {
                        d[j] += 2.0 * (vals[ia][j] - vals[ib][j]) * gv;
                    }
                });
                self.addg(b, |vals, d| {
                    for j in 0..d.len() {
                        d[j] -= 2.0 * (vals[ia][j] - vals[ib][j]) * gv;
                    }
                });
            }
            Op::Mse(a, b) => {
                let (ia, ib) = (a as usize, b as usize);
                let n = self.values[ia].len() as f64;
                let gv = g[0];
                self.addg(a, |vals, d| {
                    for j in 0..d.len() {
                        d[j] += 2.0 * (vals[ia][j] - vals[ib][j]) * gv / n;
                    }
                });
                self.addg(b, |vals, d| {
                    for j in 0..d.len() {
                        d[j] -= 2.0 * (vals[ia][j] - vals[ib][j]) * gv / n;
                    }
                });
            }
        }
    }
}
