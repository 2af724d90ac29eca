//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] owns every intermediate value of a computation as an immutable
//! [`Tensor`] in an arena; recording an operation appends an [`Op`] naming
//! its input and output slots. [`Tape::backward`] replays the list once in
//! reverse, accumulating vector-Jacobian products per slot. Inputs that do
//! not reach the loss keep a zero gradient (exactly zero, never a rounding
//! artifact). Shape errors surface at record time, not during backward.

use crate::error::{CoreError, Result};
use crate::tensor::fft;
use crate::tensor::{matmul_raw, Tensor};

/// Handle to a tape slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Matmul { a: usize, b: usize, out: usize },
    Transpose { a: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { a: usize, c: f64, out: usize },
    AddRow { x: usize, row: usize, out: usize },
    MulRow { x: usize, row: usize, out: usize },
    BroadcastRow { row: usize, out: usize },
    SliceCols { a: usize, start: usize, len: usize, out: usize },
    ConcatCols { parts: Vec<usize>, out: usize },
    MeanRows { a: usize, out: usize },
    SumAll { a: usize, out: usize },
    SumSquares { a: usize, out: usize },
    SumAbs { a: usize, out: usize },
    SoftmaxRows { a: usize, out: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64, out: usize },
    Sigmoid { a: usize, out: usize },
    Tanh { a: usize, out: usize },
    Gelu { a: usize, out: usize },
    LogisticLoss { logits: usize, targets: Tensor, out: usize },
    Rdft { x: usize, out_re: usize, out_im: usize },
    Irdft { re: usize, im: usize, tau: usize, out: usize },
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers a leaf value whose gradient can be read after backward.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Alias of [`Tape::input`] for values whose gradient is never used,
    /// e.g. data tensors or stop-gradient masks.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Scalar payload of a 1x1 slot.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.values[v.0].len(), 1);
        self.values[v.0].data()[0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, t: Tensor) -> usize {
        self.values.push(t);
        self.grads.push(None);
        self.values.len() - 1
    }

    fn dims2(&self, v: Var, context: &str) -> Result<(usize, usize)> {
        let s = self.values[v.0].shape();
        if s.len() != 2 {
            return Err(CoreError::shape(context, format!("expected 2D, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(CoreError::shape("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let data = matmul_raw(self.values[a.0].data(), self.values[b.0].data(), m, k, n);
        let out = self.push(Tensor::from_vec(&[m, n], data)?);
        self.ops.push(Op::Matmul { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims2(a, "transpose")?;
        let out = self.push(self.values[a.0].transpose());
        self.ops.push(Op::Transpose { a: a.0, out });
        Ok(Var(out))
    }

    fn binary(&mut self, a: Var, b: Var, context: &str) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(CoreError::shape(
                context,
                format!("{:?} vs {:?}", self.values[a.0].shape(), self.values[b.0].shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let t = self.values[a.0].add(&self.values[b.0])?;
        let out = self.push(t);
        self.ops.push(Op::Add { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub")?;
        let t = self.values[a.0].sub(&self.values[b.0])?;
        let out = self.push(t);
        self.ops.push(Op::Sub { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let t = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y)?;
        let out = self.push(t);
        self.ops.push(Op::Mul { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.push(self.values[a.0].scale(c));
        self.ops.push(Op::Scale { a: a.0, c, out });
        Ok(Var(out))
    }

    /// Adds a 1 x m row to every row of an n x m tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims2(x, "add_row")?;
        let (rn, rm) = self.dims2(row, "add_row")?;
        if rn != 1 || rm != m {
            return Err(CoreError::shape("add_row", format!("{n}x{m} plus {rn}x{rm}")));
        }
        let r = self.values[row.0].data().to_vec();
        let t = Tensor::from_fn_2d(n, m, |i, j| self.values[x.0].get(i, j) + r[j]);
        let out = self.push(t);
        self.ops.push(Op::AddRow { x: x.0, row: row.0, out });
        Ok(Var(out))
    }

    /// Multiplies every row of an n x m tensor by a 1 x m row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims2(x, "mul_row")?;
        let (rn, rm) = self.dims2(row, "mul_row")?;
        if rn != 1 || rm != m {
            return Err(CoreError::shape("mul_row", format!("{n}x{m} times {rn}x{rm}")));
        }
        let r = self.values[row.0].data().to_vec();
        let t = Tensor::from_fn_2d(n, m, |i, j| self.values[x.0].get(i, j) * r[j]);
        let out = self.push(t);
        self.ops.push(Op::MulRow { x: x.0, row: row.0, out });
        Ok(Var(out))
    }

    /// Repeats a 1 x m row n times.
    pub fn broadcast_row(&mut self, row: Var, n: usize) -> Result<Var> {
        let (rn, m) = self.dims2(row, "broadcast_row")?;
        if rn != 1 {
            return Err(CoreError::shape("broadcast_row", format!("expected 1 row, got {rn}")));
        }
        let r = self.values[row.0].data().to_vec();
        let t = Tensor::from_fn_2d(n, m, |_, j| r[j]);
        let out = self.push(t);
        self.ops.push(Op::BroadcastRow { row: row.0, out });
        Ok(Var(out))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims2(a, "slice_cols")?;
        if start + len > m || len == 0 {
            return Err(CoreError::shape("slice_cols", format!("[{start}..{}) of {m}", start + len)));
        }
        let t = Tensor::from_fn_2d(n, len, |i, j| self.values[a.0].get(i, start + j));
        let out = self.push(t);
        self.ops.push(Op::SliceCols { a: a.0, start, len, out });
        Ok(Var(out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::shape("concat_cols", "no parts"));
        }
        let (n, _) = self.dims2(parts[0], "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pn, pm) = self.dims2(p, "concat_cols")?;
            if pn != n {
                return Err(CoreError::shape("concat_cols", format!("row counts {n} vs {pn}")));
            }
            total += pm;
        }
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                let pm = self.values[p.0].cols();
                let row = &self.values[p.0].data()[i * pm..(i + 1) * pm];
                data.extend_from_slice(row);
            }
        }
        let out = self.push(Tensor::from_vec(&[n, total], data)?);
        self.ops.push(Op::ConcatCols { parts: parts.iter().map(|v| v.0).collect(), out });
        Ok(Var(out))
    }

    /// Column-wise mean over rows, producing 1 x m.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2(a, "mean_rows")?;
        if n == 0 {
            return Err(CoreError::shape("mean_rows", "no rows"));
        }
        let mut acc = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                acc[j] += self.values[a.0].get(i, j);
            }
        }
        for v in &mut acc {
            *v /= n as f64;
        }
        let out = self.push(Tensor::from_vec(&[1, m], acc)?);
        self.ops.push(Op::MeanRows { a: a.0, out });
        Ok(Var(out))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].sum();
        let out = self.push(Tensor::scalar(s));
        self.ops.push(Op::SumAll { a: a.0, out });
        Ok(Var(out))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].sq_norm();
        let out = self.push(Tensor::scalar(s));
        self.ops.push(Op::SumSquares { a: a.0, out });
        Ok(Var(out))
    }

    pub fn sum_abs(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.values[a.0].data().iter().map(|v| v.abs()).sum();
        let out = self.push(Tensor::scalar(s));
        self.ops.push(Op::SumAbs { a: a.0, out });
        Ok(Var(out))
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2(a, "softmax_rows")?;
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = &self.values[a.0].data()[i * m..(i + 1) * m];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / z));
        }
        let out = self.push(Tensor::from_vec(&[n, m], data)?);
        self.ops.push(Op::SoftmaxRows { a: a.0, out });
        Ok(Var(out))
    }

    /// Normalizes each row to zero mean, unit variance (plus `eps` inside
    /// the root), then applies per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, m) = self.dims2(x, "layer_norm")?;
        if m == 0 {
            return Err(CoreError::shape("layer_norm", "zero-length last axis"));
        }
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            let (rn, rm) = self.dims2(v, "layer_norm")?;
            if rn != 1 || rm != m {
                return Err(CoreError::shape("layer_norm", format!("{name} is {rn}x{rm}, want 1x{m}")));
            }
        }
        if eps < 0.0 {
            return Err(CoreError::OutOfRange { context: "layer_norm".into(), detail: format!("eps {eps} < 0") });
        }
        let g = self.values[gain.0].data().to_vec();
        let b = self.values[bias.0].data().to_vec();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = &self.values[x.0].data()[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let denom = (var + eps).sqrt();
            if denom == 0.0 {
                return Err(CoreError::non_finite("layer_norm: zero variance with eps=0"));
            }
            for j in 0..m {
                data.push((row[j] - mean) / denom * g[j] + b[j]);
            }
        }
        let out = self.push(Tensor::from_vec(&[n, m], data)?);
        self.ops.push(Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps, out });
        Ok(Var(out))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(sigmoid_f);
        let out = self.push(t);
        self.ops.push(Op::Sigmoid { a: a.0, out });
        Ok(Var(out))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(f64::tanh);
        let out = self.push(t);
        self.ops.push(Op::Tanh { a: a.0, out });
        Ok(Var(out))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(gelu_f);
        let out = self.push(t);
        self.ops.push(Op::Gelu { a: a.0, out });
        Ok(Var(out))
    }

    /// Mean binary cross-entropy with logits against constant 0/1 targets.
    pub fn logistic_loss(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.values[logits.0].shape() != targets.shape() {
            return Err(CoreError::shape(
                "logistic_loss",
                format!("{:?} vs {:?}", self.values[logits.0].shape(), targets.shape()),
            ));
        }
        let n = targets.len() as f64;
        // log(1 + exp(-|l|)) + max(l,0) - l*y, the stable softplus form.
        let s: f64 = self.values[logits.0]
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &y)| (-l.abs()).exp().ln_1p() + l.max(0.0) - l * y)
            .sum();
        let out = self.push(Tensor::scalar(s / n));
        self.ops.push(Op::LogisticLoss { logits: logits.0, targets: targets.clone(), out });
        Ok(Var(out))
    }

    /// One-sided DFT; returns (re, im) handles, each bins x d.
    pub fn rdft(&mut self, x: Var) -> Result<(Var, Var)> {
        let (tau, d) = self.dims2(x, "rdft")?;
        if tau == 0 {
            return Err(CoreError::shape("rdft", "zero-length series"));
        }
        let (re, im) = fft::rdft_raw(self.values[x.0].data(), tau, d);
        let bins = fft::n_bins(tau);
        let out_re = self.push(Tensor::from_vec(&[bins, d], re)?);
        let out_im = self.push(Tensor::from_vec(&[bins, d], im)?);
        self.ops.push(Op::Rdft { x: x.0, out_re, out_im });
        Ok((Var(out_re), Var(out_im)))
    }

    /// Inverse one-sided DFT back to a tau x d series.
    pub fn irdft(&mut self, re: Var, im: Var, tau: usize) -> Result<Var> {
        let (bins, d) = self.dims2(re, "irdft")?;
        let (bins2, d2) = self.dims2(im, "irdft")?;
        if bins != bins2 || d != d2 || bins != fft::n_bins(tau) {
            return Err(CoreError::shape(
                "irdft",
                format!("re {bins}x{d}, im {bins2}x{d2}, tau {tau}"),
            ));
        }
        let data = fft::irdft_raw(self.values[re.0].data(), self.values[im.0].data(), tau, d);
        let out = self.push(Tensor::from_vec(&[tau, d], data)?);
        self.ops.push(Op::Irdft { re: re.0, im: im.0, tau, out });
        Ok(Var(out))
    }

    /// Scaled dot-product attention for a single head:
    /// softmax(q k^T * scale) v. Composed from recorded primitives, so it is
    /// differentiable through all three operands.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (_, hq) = self.dims2(q, "softmax_attention")?;
        let (nk, hk) = self.dims2(k, "softmax_attention")?;
        let (nv, _) = self.dims2(v, "softmax_attention")?;
        if hq == 0 {
            return Err(CoreError::shape("softmax_attention", "zero-dim head"));
        }
        if hq != hk || nk != nv {
            return Err(CoreError::shape(
                "softmax_attention",
                format!("q {:?} k {:?} v {:?}", self.values[q.0].shape(), self.values[k.0].shape(), self.values[v.0].shape()),
            ));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, scale)?;
        let probs = self.softmax_rows(scaled)?;
        self.matmul(probs, v)
    }

    /// Reverse pass from a scalar loss. Replays recorded ops once, newest
    /// first; slots that never influence the loss keep a `None` gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(CoreError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.values[loss.0].shape()),
            ));
        }
        let mut grads = std::mem::take(&mut self.grads);
        grads[loss.0] = Some(vec![1.0]);

        for op in self.ops.iter().rev() {
            self.replay(op, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a slot after [`Tape::backward`]; `None` if the slot never
    /// reached the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor, exact zeros when the slot is unused.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.values[v.0].shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(&shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn replay(&self, op: &Op, grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
            let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }
        macro_rules! out_grad {
            ($out:expr) => {
                match &grads[*$out] {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }

        match op {
            Op::Matmul { a, b, out } => {
                let g = out_grad!(out);
                let (m, k) = (self.values[*a].rows(), self.values[*a].cols());
                let n = self.values[*b].cols();
                // dA = g B^T, dB = A^T g
                let bt = self.values[*b].transpose();
                let da = matmul_raw(&g, bt.data(), m, n, k);
                let at = self.values[*a].transpose();
                let db = matmul_raw(at.data(), &g, k, m, n);
                acc(grads, *a, m * k, |s| add_into(s, &da));
                acc(grads, *b, k * n, |s| add_into(s, &db));
            }
            Op::Transpose { a, out } => {
                let g = out_grad!(out);
                let (m, n) = (self.values[*a].rows(), self.values[*a].cols());
                acc(grads, *a, m * n, |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add { a, b, out } => {
                let g = out_grad!(out);
                acc(grads, *a, g.len(), |s| add_into(s, &g));
                acc(grads, *b, g.len(), |s| add_into(s, &g));
            }
            Op::Sub { a, b, out } => {
                let g = out_grad!(out);
                acc(grads, *a, g.len(), |s| add_into(s, &g));
                acc(grads, *b, g.len(), |s| {
                    for (sv, gv) in s.iter_mut().zip(&g) {
                        *sv -= gv;
                    }
                });
            }
            Op::Mul { a, b, out } => {
                let g = out_grad!(out);
                let av = self.values[*a].data();
                let bv = self.values[*b].data();
                acc(grads, *a, g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(grads, *b, g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { a, c, out } => {
                let g = out_grad!(out);
                acc(grads, *a, g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * c;
                    }
                });
            }
            Op::AddRow { x, row, out } => {
                let g = out_grad!(out);
                let m = self.values[*row].cols();
                let n = g.len() / m;
                acc(grads, *x, g.len(), |s| add_into(s, &g));
                acc(grads, *row, m, |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[j] += g[i * m + j];
                        }
                    }
                });
            }
            Op::MulRow { x, row, out } => {
                let g = out_grad!(out);
                let m = self.values[*row].cols();
                let n = g.len() / m;
                let xv = self.values[*x].data();
                let rv = self.values[*row].data();
                acc(grads, *x, g.len(), |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[i * m + j] += g[i * m + j] * rv[j];
                        }
                    }
                });
                acc(grads, *row, m, |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[j] += g[i * m + j] * xv[i * m + j];
                        }
                    }
                });
            }
            Op::BroadcastRow { row, out } => {
                let g = out_grad!(out);
                let m = self.values[*row].cols();
                let n = g.len() / m;
                acc(grads, *row, m, |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[j] += g[i * m + j];
                        }
                    }
                });
            }
            Op::SliceCols { a, start, len, out } => {
                let g = out_grad!(out);
                let (n, m) = (self.values[*a].rows(), self.values[*a].cols());
                acc(grads, *a, n * m, |s| {
                    for i in 0..n {
                        for j in 0..*len {
                            s[i * m + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts, out } => {
                let g = out_grad!(out);
                let n = self.values[*out].rows();
                let total = self.values[*out].cols();
                let mut offset = 0;
                for &p in parts {
                    let pm = self.values[p].cols();
                    acc(grads, p, n * pm, |s| {
                        for i in 0..n {
                            for j in 0..pm {
                                s[i * pm + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += pm;
                }
            }
            Op::MeanRows { a, out } => {
                let g = out_grad!(out);
                let (n, m) = (self.values[*a].rows(), self.values[*a].cols());
                let inv = 1.0 / n as f64;
                acc(grads, *a, n * m, |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[i * m + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::SumAll { a, out } => {
                let g = out_grad!(out)[0];
                let len = self.values[*a].len();
                acc(grads, *a, len, |s| {
                    for v in s.iter_mut() {
                        *v += g;
                    }
                });
            }
            Op::SumSquares { a, out } => {
                let g = out_grad!(out)[0];
                let av = self.values[*a].data();
                acc(grads, *a, av.len(), |s| {
                    for (sv, &x) in s.iter_mut().zip(av) {
                        *sv += 2.0 * g * x;
                    }
                });
            }
            Op::SumAbs { a, out } => {
                let g = out_grad!(out)[0];
                let av = self.values[*a].data();
                acc(grads, *a, av.len(), |s| {
                    for (sv, &x) in s.iter_mut().zip(av) {
                        *sv += g * sign(x);
                    }
                });
            }
            Op::SoftmaxRows { a, out } => {
                let g = out_grad!(out);
                let (n, m) = (self.values[*a].rows(), self.values[*a].cols());
                let y = self.values[*out].data();
                acc(grads, *a, n * m, |s| {
                    for i in 0..n {
                        let yr = &y[i * m..(i + 1) * m];
                        let gr = &g[i * m..(i + 1) * m];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            s[i * m + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps, out } => {
                let g = out_grad!(out);
                let (n, m) = (self.values[*x].rows(), self.values[*x].cols());
                let xv = self.values[*x].data();
                let gv = self.values[*gain].data();
                let mf = m as f64;
                let mut dx = vec![0.0; n * m];
                let mut dgain = vec![0.0; m];
                let mut dbias = vec![0.0; m];
                for i in 0..n {
                    let row = &xv[i * m..(i + 1) * m];
                    let gr = &g[i * m..(i + 1) * m];
                    let mean = row.iter().sum::<f64>() / mf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / mf;
                    let denom = (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / denom).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(&gg, &ga)| gg * ga).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / mf;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / mf;
                    for j in 0..m {
                        dx[i * m + j] +=
                            (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / denom;
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                acc(grads, *x, n * m, |s| add_into(s, &dx));
                acc(grads, *gain, m, |s| add_into(s, &dgain));
                acc(grads, *bias, m, |s| add_into(s, &dbias));
            }
            Op::Sigmoid { a, out } => {
                let g = out_grad!(out);
                let y = self.values[*out].data();
                acc(grads, *a, g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh { a, out } => {
                let g = out_grad!(out);
                let y = self.values[*out].data();
                acc(grads, *a, g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Gelu { a, out } => {
                let g = out_grad!(out);
                let xv = self.values[*a].data();
                acc(grads, *a, g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * gelu_df(xv[i]);
                    }
                });
            }
            Op::LogisticLoss { logits, targets, out } => {
                let g = out_grad!(out)[0];
                let lv = self.values[*logits].data();
                let n = targets.len() as f64;
                let tv = targets.data();
                acc(grads, *logits, lv.len(), |s| {
                    for i in 0..lv.len() {
                        s[i] += g * (sigmoid_f(lv[i]) - tv[i]) / n;
                    }
                });
            }
            Op::Rdft { x, out_re, out_im } => {
                let (tau, d) = (self.values[*x].rows(), self.values[*x].cols());
                let bins = fft::n_bins(tau);
                let zero = vec![0.0; bins * d];
                let gre = grads[*out_re].clone();
                let gim = grads[*out_im].clone();
                if gre.is_none() && gim.is_none() {
                    return;
                }
                let dx = fft::rdft_adjoint(
                    gre.as_deref().unwrap_or(&zero),
                    gim.as_deref().unwrap_or(&zero),
                    tau,
                    d,
                );
                acc(grads, *x, tau * d, |s| add_into(s, &dx));
            }
            Op::Irdft { re, im, tau, out } => {
                let g = out_grad!(out);
                let d = self.values[*re].cols();
                let (dre, dim) = fft::irdft_adjoint(&g, *tau, d);
                acc(grads, *re, dre.len(), |s| add_into(s, &dre));
                acc(grads, *im, dim.len(), |s| add_into(s, &dim));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
