use super::kernels::{col2im, im2col, Window};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Backward rule for `clamp01`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClampGrad {
    /// Gradient 1 strictly inside (0, 1), 0 elsewhere (including the boundary).
    #[default]
    Interior,
    /// Gradient 1 everywhere.
    StraightThrough,
}

/// Batch statistics observed by a train-mode batch norm, for running-stat updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n-1) variance.
    pub var: Vec<f64>,
}

enum Op<T: Real> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, win: Window, batch: usize, out_channels: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, win: Window, batch: usize, in_channels: usize },
    MaxPool { x: Var, k: usize, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<f64>, train: bool },
    Relu { x: Var },
    Clamp01 { x: Var, mode: ClampGrad },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    ChannelAffine { x: Var, scale: Vec<f64> },
    Sum { x: Var },
    SumSquares { x: Var },
    Abs { x: Var },
    PixelNorm { x: Var },
    UnitNormalize { x: Var, norms: Vec<f64>, eps: f64 },
    GlobalAvgPool { x: Var },
    PixelMap3 { x: Var, jacobians: Vec<[[f64; 3]; 3]> },
}

struct Node<T: Real> {
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in execution order, so every
/// node's inputs precede it and a single reverse sweep visits each node once.
pub struct Graph<T: Real> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the graph's differentiable leaves.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.nodes.push(Node { op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        tensor.clear_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn param(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, h, wd] = self.value(x).dims4()?;
        let [co, wci, kh, kw] = self.value(w).dims4()?;
        if wci != ci {
            return Err(TensorError::Dimension(format!(
                "conv2d: input has {ci} channels, weight expects {wci}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(TensorError::Dimension(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(TensorError::Dimension(format!(
                    "conv2d: bias shape {:?}, expected [{co}]",
                    self.value(b).shape()
                )));
            }
        }
        let win = Window { channels: ci, height: h, width: wd, kh, kw, stride, pad };
        let (ho, wo) = (win.out_height(), win.out_width());
        let (k, p) = (win.col_rows(), win.col_cols());
        let xin = self.value(x).data();
        let wdat = self.value(w).data();
        let mut out = vec![T::zero(); n * co * p];
        let mut cols = if win.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for bi in 0..n {
            let img = &xin[bi * ci * h * wd..(bi + 1) * ci * h * wd];
            let src: &[T] = if win.is_pointwise() {
                img
            } else {
                im2col(img, &win, &mut cols);
                &cols
            };
            let dst = &mut out[bi * co * p..(bi + 1) * co * p];
            T::gemm(co, k, p, T::one(), wdat, k as isize, 1, src, p as isize, 1, T::zero(), dst);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, co, p);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_parts(vec![n, co, ho, wo], out);
        Ok(self.push(value, Op::Conv2d { x, w, b, win, batch: n, out_channels: co }, rg))
    }

    /// Transposed convolution that multiplies the spatial size exactly by `stride`.
    ///
    /// Weight layout is `[Cin, Cout, kh, kw]`; padding is `(k - stride) / 2`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let [n, ci, h, wd] = self.value(x).dims4()?;
        let [wci, co, kh, kw] = self.value(w).dims4()?;
        if wci != ci {
            return Err(TensorError::Dimension(format!(
                "conv_transpose2d: input has {ci} channels, weight expects {wci}"
            )));
        }
        if stride == 0 || kh != kw || kh < stride || !(kh - stride).is_multiple_of(2) {
            return Err(TensorError::Config(format!(
                "conv_transpose2d: kernel {kh}x{kw} with stride {stride} cannot scale the input exactly"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(TensorError::Dimension(format!(
                    "conv_transpose2d: bias shape {:?}, expected [{co}]",
                    self.value(b).shape()
                )));
            }
        }
        let pad = (kh - stride) / 2;
        let (ho, wo) = (h * stride, wd * stride);
        let win = Window { channels: co, height: ho, width: wo, kh, kw, stride, pad };
        debug_assert_eq!((win.out_height(), win.out_width()), (h, wd));
        let (k, p) = (win.col_rows(), h * wd);
        let xin = self.value(x).data();
        let wdat = self.value(w).data();
        let mut out = vec![T::zero(); n * co * ho * wo];
        let mut cols = vec![T::zero(); k * p];
        for bi in 0..n {
            let img = &xin[bi * ci * p..(bi + 1) * ci * p];
            // cols[k, p] = W^T[k, ci] * x[ci, p]
            T::gemm(k, ci, p, T::one(), wdat, 1, k as isize, img, p as isize, 1, T::zero(), &mut cols);
            col2im(&cols, &win, &mut out[bi * co * ho * wo..(bi + 1) * co * ho * wo]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, co, ho * wo);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_parts(vec![n, co, ho, wo], out);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, win, batch: n, in_channels: ci }, rg))
    }

    /// Non-overlapping `k x k` max pooling. Ties resolve to the first cell in row-major order.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::Dimension(format!(
                "maxpool2d: {h}x{w} is not divisible by window {k}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let xin = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if xin[idx] > xin[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xin[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::from_parts(vec![n, c, ho, wo], out);
        let argmax = if rg { argmax } else { Vec::new() };
        Ok(self.push(value, Op::MaxPool { x, k, argmax }, rg))
    }

    /// Per-channel batch normalization.
    ///
    /// Train mode normalizes with the batch statistics and returns them so the
    /// caller can update its running estimates; eval mode uses `running_*`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [n, c, h, w] = self.value(x).dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(TensorError::Dimension(format!(
                    "batchnorm2d: {name} shape {:?}, expected [{c}]",
                    self.value(v).shape()
                )));
            }
        }
        let plane = h * w;
        let m = n * plane;
        let xin = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(TensorError::Contract(format!(
                        "batchnorm2d: train mode needs >= 2 values per channel, got {m}"
                    )));
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        s += xin[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        sq += xin[base..base + plane]
                            .iter()
                            .map(|v| {
                                let d = v.as_f64() - mu;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                }
                let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Eval => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(TensorError::Dimension(format!(
                        "batchnorm2d: running stats of length {}/{}, expected {c}",
                        running_mean.len(),
                        running_var.len()
                    )));
                }
                let mean = running_mean.iter().map(|v| v.as_f64()).collect();
                let var = running_var.iter().map(|v| v.as_f64()).collect();
                (mean, var, None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xin.len()];
        let mut xhat = vec![T::zero(); xin.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (gm, bs) = (g[ch].as_f64(), bt[ch].as_f64());
                for i in base..base + plane {
                    let xh = (xin[i].as_f64() - mean[ch]) * inv_std[ch];
                    xhat[i] = T::from_f64(xh);
                    out[i] = T::from_f64(gm * xh + bs);
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: mode == BnMode::Train };
        Ok((self.push(value, op, rg), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn clamp01(&mut self, x: Var, mode: ClampGrad) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(T::zero()).min(T::one())).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(value, Op::Clamp01 { x, mode }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(TensorError::Dimension(format!(
                "concat_channels: [{na},_,{ha},{wa}] vs [{nb},_,{hb},{wb}]"
            )));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for n in 0..na {
            out.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::from_parts(vec![na, ca + cb, ha, wa], out);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| T::from_f64(v.as_f64() * factor)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// `y[n,c] = scale[c] * x[n,c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if scale.len() != c || shift.len() != c {
            return Err(TensorError::Dimension(format!(
                "channel_affine: {} scales / {} shifts for {c} channels",
                scale.len(),
                shift.len()
            )));
        }
        let plane = h * w;
        let xin = self.value(x).data();
        let mut out = Vec::with_capacity(xin.len());
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                out.extend(
                    xin[base..base + plane]
                        .iter()
                        .map(|v| T::from_f64(scale[ch] * v.as_f64() + shift[ch])),
                );
            }
        }
        let rg = self.rg(x);
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(value, Op::ChannelAffine { x, scale: scale.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::SumSquares { x }, rg)
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v.abs()).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(value, Op::Abs { x }, rg)
    }

    /// Euclidean norm over the channel axis: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn pixel_norm(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let norms = channel_norms(self.value(x).data(), n, c, h * w);
        let rg = self.rg(x);
        let value = Tensor::from_parts(vec![n, 1, h, w], norms.iter().map(|&v| T::from_f64(v)).collect());
        Ok(self.push(value, Op::PixelNorm { x }, rg))
    }

    /// Scales each pixel's channel vector to unit length: `x / (|x| + eps)`.
    pub fn unit_normalize_channels(&mut self, x: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let xin = self.value(x).data();
        let norms = channel_norms(xin, n, c, plane);
        let mut out = vec![T::zero(); xin.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for p in 0..plane {
                    let d = norms[b * plane + p] + eps;
                    out[base + p] = T::from_f64(xin[base + p].as_f64() / d);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let norms = if rg { norms } else { Vec::new() };
        Ok(self.push(value, Op::UnitNormalize { x, norms, eps }, rg))
    }

    /// Spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let xin = self.value(x).data();
        let out = (0..n * c)
            .map(|i| {
                let s: f64 = xin[i * plane..(i + 1) * plane].iter().map(|v| v.as_f64()).sum();
                T::from_f64(s / plane as f64)
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool { x }, rg))
    }

    /// Applies a per-pixel map on three channels. `f` returns the mapped value and
    /// its Jacobian `J[i][j] = d out_i / d in_j` at the input point.
    pub fn pixel_map3(
        &mut self,
        x: Var,
        f: impl Fn([f64; 3]) -> ([f64; 3], [[f64; 3]; 3]),
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if c != 3 {
            return Err(TensorError::Dimension(format!("pixel_map3: expected 3 channels, got {c}")));
        }
        let plane = h * w;
        let rg = self.rg(x);
        let xin = self.value(x).data();
        let mut out = vec![T::zero(); xin.len()];
        let mut jacobians = Vec::with_capacity(if rg { n * plane } else { 0 });
        for b in 0..n {
            let base = b * 3 * plane;
            for p in 0..plane {
                let idx = [base + p, base + plane + p, base + 2 * plane + p];
                let px = idx.map(|i| xin[i].as_f64());
                let (y, jac) = f(px);
                for (k, &i) in idx.iter().enumerate() {
                    out[i] = T::from_f64(y[k]);
                }
                if rg {
                    jacobians.push(jac);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, 3, h, w], out);
        Ok(self.push(value, Op::PixelMap3 { x, jacobians }, rg))
    }

    /// Smallest distance of any recorded value to a point where its operation
    /// is not differentiable (ReLU/abs at 0, clamp at 0 and 1, max-pool ties,
    /// zero-norm pixels). Used to qualify finite-difference fixtures.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let vals = |v: &Var| self.values[v.0].data().iter().map(|x| x.as_f64());
            match &node.op {
                Op::Relu { x } | Op::Abs { x } => {
                    margin = vals(x).fold(margin, |m, v| m.min(v.abs()));
                }
                Op::Clamp01 { x, mode: ClampGrad::Interior } => {
                    margin = vals(x).fold(margin, |m, v| m.min(v.abs()).min((v - 1.0).abs()));
                }
                Op::PixelNorm { x } | Op::UnitNormalize { x, .. } => {
                    if let Ok([n, c, h, w]) = self.values[x.0].dims4() {
                        let norms = channel_norms(self.values[x.0].data(), n, c, h * w);
                        margin = norms.iter().fold(margin, |m, v| m.min(*v));
                    }
                }
                Op::MaxPool { x, k, .. } => {
                    let t = &self.values[x.0];
                    if let Ok([n, c, h, w]) = t.dims4() {
                        let d = t.data();
                        for plane in 0..n * c {
                            for oy in 0..h / k {
                                for ox in 0..w / k {
                                    let mut win: Vec<f64> = (0..k * k)
                                        .map(|i| {
                                            let (dy, dx) = (i / k, i % k);
                                            d[plane * h * w + (oy * k + dy) * w + ox * k + dx].as_f64()
                                        })
                                        .collect();
                                    win.sort_by(|a, b| b.total_cmp(a));
                                    if win.len() > 1 {
                                        margin = margin.min(win[0] - win[1]);
                                    }
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar `loss`, consuming the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let lt = &self.values[loss.0];
        if lt.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.is_finite() {
            return Err(TensorError::NonFinite("loss".into()));
        }
        if !self.rg(loss) {
            return Err(TensorError::Contract("loss is not reachable from any parameter".into()));
        }
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..count).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, gy, &mut grads, &mut leaf_grads)?;
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backward_node(
        &self,
        i: usize,
        gy: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaf_grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |v: Var| &self.values[v.0];
        let mut send = |v: Var, g: Vec<T>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], g);
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {
                leaf_grads[i] = Some(Tensor::from_parts(self.values[i].shape().to_vec(), gy));
            }
            Op::Conv2d { x, w, b, win, batch, out_channels } => {
                let (co, k, p) = (*out_channels, win.col_rows(), win.col_cols());
                let img_len = win.channels * win.height * win.width;
                let xin = val(*x).data();
                let wdat = val(*w).data();
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                let mut dw = if need_w { vec![T::zero(); co * k] } else { Vec::new() };
                let mut dx = if need_x { vec![T::zero(); xin.len()] } else { Vec::new() };
                let mut cols = vec![T::zero(); k * p];
                let mut dcols = vec![T::zero(); k * p];
                for bi in 0..*batch {
                    let g = &gy[bi * co * p..(bi + 1) * co * p];
                    let img = &xin[bi * img_len..(bi + 1) * img_len];
                    if need_w {
                        let src: &[T] = if win.is_pointwise() {
                            img
                        } else {
                            im2col(img, win, &mut cols);
                            &cols
                        };
                        // dW[co, k] += g[co, p] * cols^T[p, k]
                        T::gemm(co, p, k, T::one(), g, p as isize, 1, src, 1, p as isize, T::one(), &mut dw);
                    }
                    if need_x {
                        let dst = &mut dx[bi * img_len..(bi + 1) * img_len];
                        if win.is_pointwise() {
                            T::gemm(k, co, p, T::one(), wdat, 1, k as isize, g, p as isize, 1, T::zero(), dst);
                        } else {
                            T::gemm(k, co, p, T::one(), wdat, 1, k as isize, g, p as isize, 1, T::zero(), &mut dcols);
                            col2im(&dcols, win, dst);
                        }
                    }
                }
                if need_w {
                    send(*w, dw);
                }
                if need_x {
                    send(*x, dx);
                }
                if let Some(b) = b {
                    send(*b, channel_sums(&gy, *batch, co, p));
                }
            }
            Op::ConvTranspose2d { x, w, b, win, batch, in_channels } => {
                let ci = *in_channels;
                let k = win.col_rows();
                let p = win.col_cols();
                let out_len = win.channels * win.height * win.width;
                let xin = val(*x).data();
                let wdat = val(*w).data();
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                let mut dw = if need_w { vec![T::zero(); ci * k] } else { Vec::new() };
                let mut dx = if need_x { vec![T::zero(); xin.len()] } else { Vec::new() };
                let mut dcols = vec![T::zero(); k * p];
                for bi in 0..*batch {
                    im2col(&gy[bi * out_len..(bi + 1) * out_len], win, &mut dcols);
                    if need_x {
                        // dx[ci, p] = W[ci, k] * dcols[k, p]
                        let dst = &mut dx[bi * ci * p..(bi + 1) * ci * p];
                        T::gemm(ci, k, p, T::one(), wdat, k as isize, 1, &dcols, p as isize, 1, T::zero(), dst);
                    }
                    if need_w {
                        // dW[ci, k] += x[ci, p] * dcols^T[p, k]
                        let img = &xin[bi * ci * p..(bi + 1) * ci * p];
                        T::gemm(ci, p, k, T::one(), img, p as isize, 1, &dcols, 1, p as isize, T::one(), &mut dw);
                    }
                }
                if need_w {
                    send(*w, dw);
                }
                if need_x {
                    send(*x, dx);
                }
                if let Some(b) = b {
                    send(*b, channel_sums(&gy, *batch, win.channels, win.height * win.width));
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (g, &src) in gy.iter().zip(argmax) {
                    dx[src] += *g;
                }
                send(*x, dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let [n, c, h, w] = val(*x).dims4()?;
                let plane = h * w;
                let m = (n * plane) as f64;
                let gm = val(*gamma).data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for idx in base..base + plane {
                            let g = gy[idx].as_f64();
                            sum_g[ch] += g;
                            sum_gx[ch] += g * xhat[idx].as_f64();
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); gy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let scale = gm[ch].as_f64() * inv_std[ch];
                            for idx in base..base + plane {
                                let g = gy[idx].as_f64();
                                dx[idx] = T::from_f64(if *train {
                                    scale * (g - sum_g[ch] / m - xhat[idx].as_f64() * sum_gx[ch] / m)
                                } else {
                                    scale * g
                                });
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, sum_gx.iter().map(|&v| T::from_f64(v)).collect());
                send(*beta, sum_g.iter().map(|&v| T::from_f64(v)).collect());
            }
            Op::Relu { x } => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(&gy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                send(*x, dx);
            }
            Op::Clamp01 { x, mode } => {
                let dx = match mode {
                    ClampGrad::StraightThrough => gy,
                    ClampGrad::Interior => val(*x)
                        .data()
                        .iter()
                        .zip(&gy)
                        .map(|(&v, &g)| if v > T::zero() && v < T::one() { g } else { T::zero() })
                        .collect(),
                };
                send(*x, dx);
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = val(*a).dims4()?;
                let cb = val(*b).dims4()?[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for bi in 0..n {
                    let base = bi * (ca + cb) * plane;
                    da.extend_from_slice(&gy[base..base + ca * plane]);
                    db.extend_from_slice(&gy[base + ca * plane..base + (ca + cb) * plane]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Add { a, b } => {
                send(*a, gy.clone());
                send(*b, gy);
            }
            Op::Sub { a, b } => {
                send(*b, gy.iter().map(|&g| -g).collect());
                send(*a, gy);
            }
            Op::Mul { a, b } => {
                let (da, db) = (val(*a).data(), val(*b).data());
                send(*a, gy.iter().zip(db).map(|(&g, &y)| g * y).collect());
                send(*b, gy.iter().zip(da).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale { x, factor } => {
                send(*x, gy.iter().map(|g| T::from_f64(g.as_f64() * factor)).collect());
            }
            Op::ChannelAffine { x, scale } => {
                let [n, c, h, w] = val(*x).dims4()?;
                let plane = h * w;
                let mut dx = gy;
                for b in 0..n {
                    for (ch, s) in scale.iter().enumerate().take(c) {
                        let base = (b * c + ch) * plane;
                        for v in &mut dx[base..base + plane] {
                            *v = T::from_f64(v.as_f64() * s);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Sum { x } => {
                let g = gy[0];
                send(*x, vec![g; val(*x).numel()]);
            }
            Op::SumSquares { x } => {
                let g = gy[0].as_f64();
                send(*x, val(*x).data().iter().map(|v| T::from_f64(2.0 * g * v.as_f64())).collect());
            }
            Op::Abs { x } => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(&gy)
                    .map(|(&v, &g)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                send(*x, dx);
            }
            Op::PixelNorm { x } => {
                let [n, c, h, w] = val(*x).dims4()?;
                let plane = h * w;
                let xin = val(*x).data();
                let norms = &self.values[i];
                let mut dx = vec![T::zero(); xin.len()];
                for b in 0..n {
                    for p in 0..plane {
                        let r = norms.data()[b * plane + p].as_f64();
                        if r == 0.0 {
                            continue;
                        }
                        let g = gy[b * plane + p].as_f64() / r;
                        for ch in 0..c {
                            let idx = (b * c + ch) * plane + p;
                            dx[idx] = T::from_f64(g * xin[idx].as_f64());
                        }
                    }
                }
                send(*x, dx);
            }
            Op::UnitNormalize { x, norms, eps } => {
                let [n, c, h, w] = val(*x).dims4()?;
                let plane = h * w;
                let xin = val(*x).data();
                let mut dx = vec![T::zero(); xin.len()];
                for b in 0..n {
                    for p in 0..plane {
                        let r = norms[b * plane + p];
                        let d = r + eps;
                        let dot: f64 = (0..c)
                            .map(|ch| {
                                let idx = (b * c + ch) * plane + p;
                                gy[idx].as_f64() * xin[idx].as_f64()
                            })
                            .sum();
                        let coef = if r > 0.0 { dot / (d * d * r) } else { 0.0 };
                        for ch in 0..c {
                            let idx = (b * c + ch) * plane + p;
                            dx[idx] = T::from_f64(gy[idx].as_f64() / d - xin[idx].as_f64() * coef);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let [n, c, h, w] = val(*x).dims4()?;
                let plane = h * w;
                let mut dx = Vec::with_capacity(n * c * plane);
                for g in gy.iter().take(n * c) {
                    let v = T::from_f64(g.as_f64() / plane as f64);
                    dx.extend(std::iter::repeat_n(v, plane));
                }
                send(*x, dx);
            }
            Op::PixelMap3 { x, jacobians } => {
                let [n, _, h, w] = val(*x).dims4()?;
                let plane = h * w;
                let mut dx = vec![T::zero(); gy.len()];
                for b in 0..n {
                    let base = b * 3 * plane;
                    for p in 0..plane {
                        let jac = &jacobians[b * plane + p];
                        let idx = [base + p, base + plane + p, base + 2 * plane + p];
                        let g = idx.map(|i| gy[i].as_f64());
                        for (j, &di) in idx.iter().enumerate() {
                            let v = jac[0][j] * g[0] + jac[1][j] * g[1] + jac[2][j] * g[2];
                            dx[di] = T::from_f64(v);
                        }
                    }
                }
                send(*x, dx);
            }
        }
        Ok(())
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], n: usize, c: usize, plane: usize) {
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            let base = (b * c + ch) * plane;
            out[base..base + plane].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn channel_sums<T: Real>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    (0..c)
        .map(|ch| {
            let s: f64 = (0..n)
                .map(|b| {
                    let base = (b * c + ch) * plane;
                    g[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>()
                })
                .sum();
            T::from_f64(s)
        })
        .collect()
}

fn channel_norms<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut norms = vec![0.0f64; n * plane];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for p in 0..plane {
                let v = x[base + p].as_f64();
                norms[b * plane + p] += v * v;
            }
        }
    }
    norms.iter_mut().for_each(|v| *v = v.sqrt());
    norms
}
