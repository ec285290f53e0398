use super::fault::{self, Fault};
use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, kernel: Var, geom: ConvGeom, cols: Vec<f64> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Shift { a: Var },
    Relu { a: Var },
    Softplus { a: Var },
    Exp { a: Var },
    Log { a: Var },
    AvgPool { x: Var, k: usize },
    Reshape { a: Var },
    Softmax { a: Var },
    Sum { a: Var },
    SumLastAxis { a: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Normalize { a: Var, chunk: usize, eps: f64, norms: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Shift { .. } => "shift",
            Op::Relu { .. } => "relu",
            Op::Softplus { .. } => "softplus",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::AvgPool { .. } => "avg_pool",
            Op::Reshape { .. } => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::Sum { .. } => "sum",
            Op::SumLastAxis { .. } => "sum_last_axis",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Normalize { .. } => "normalize",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over batch and spatial positions.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Define-by-run recording of one forward computation.
///
/// Nodes are appended in execution order, so parents always precede children
/// and a single reverse sweep visits every node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_passes: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `∂loss/∂v`; an all-zero tensor when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone())
                .expect("gradient buffers match node shapes"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Borrowed view of the raw gradient buffer, if any flowed into `v`.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
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

    /// Number of completed backward sweeps on this tape.
    pub fn backward_passes(&self) -> usize {
        self.backward_passes
    }

    /// Whether each `relu` input on the tape is positive, in recording order.
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu { a } = n.op {
                out.extend(self.value(a).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.clone(), Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a · b` (or `a · bᵀ` when `trans_b`) for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}: rank-2 required")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim(
                "matmul",
                format!("{sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg)
    }

    /// Stride-1 2-D convolution (cross-correlation) of `x: [B, Ci, H, W]`
    /// with `kernel: [Co, Ci, k, k]` and zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sk[1] != sx[1] || sk[2] != sk[3] {
            return Err(Error::dim("conv2d", format!("input {sx:?}, kernel {sk:?}")));
        }
        let (b, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sk[0], sk[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim("conv2d", format!("kernel {k} larger than padded input {h}x{w}")));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            pad,
            ho: h + 2 * pad - k + 1,
            wo: w + 2 * pad - k + 1,
        };
        let (rows, p) = (geom.col_rows(), geom.out_pixels());
        let mut cols = vec![0.0; b * rows * p];
        let mut out = vec![0.0; b * cout * p];
        {
            let xv = self.value(x).data();
            let kv = self.value(kernel).data();
            for bi in 0..b {
                let col = &mut cols[bi * rows * p..(bi + 1) * rows * p];
                kernels::im2col(&xv[bi * cin * h * w..(bi + 1) * cin * h * w], geom, col);
                kernels::gemm(
                    cout,
                    rows,
                    p,
                    kv,
                    false,
                    col,
                    false,
                    0.0,
                    &mut out[bi * cout * p..(bi + 1) * cout * p],
                );
            }
        }
        let rg = self.rg(&[x, kernel]);
        let value = Tensor::new(vec![b, cout, geom.ho, geom.wo], out)?;
        self.push(value, Op::Conv2d { x, kernel, geom, cols }, rg)
    }

    /// Element-wise `a + b`; `b` may also be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    /// Element-wise `a ⊙ b`; `b` may also be a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul { a, b }, rg)
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            Ok(ta.map(|x| f(x, y)))
        } else {
            Err(Error::dim(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())))
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, c }, rg)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Shift { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu { a }, rg)
    }

    /// `ln(1 + eˣ)`, the smooth counterpart of `relu`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let rg = self.rg(&[a]);
        self.push(out, Op::Softplus { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp { a }, rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Log { a }, rg)
    }

    /// Non-overlapping `k × k` mean pooling of `[B, C, H, W]`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(Error::dim("avg_pool", format!("{s:?} with window {k}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; planes * (h / k) * (w / k)];
        kernels::avg_pool(self.value(x).data(), planes, h, w, k, &mut out);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![s[0], s[1], h / k, w / k], out)?,
            Op::AvgPool { x, k },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape { a }, rg)
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let outer = s.first().copied().unwrap_or(1);
        let inner = s.iter().skip(1).product();
        self.reshape(a, vec![outer, inner])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().ok_or_else(|| Error::dim("softmax", "rank-0 input"))?;
        let mut out = t.data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
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
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Softmax { a }, rg)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if shape.len() < 2 {
            return Err(Error::dim("sum_last_axis", format!("{shape:?}: rank >= 2 required")));
        }
        let n = shape[shape.len() - 1];
        let out: Vec<f64> = if n == 0 {
            vec![0.0; t.len()]
        } else {
            t.data().chunks(n).map(|r| r.iter().sum()).collect()
        };
        let new_shape = shape[..shape.len() - 1].to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(new_shape, out)?, Op::SumLastAxis { a }, rg)
    }

    /// Per-channel normalization of `[B, C, H, W]` followed by the affine
    /// map `γ_c · x̂ + β_c`.
    ///
    /// With `running = None` the batch statistics are used (training mode)
    /// and returned; with `Some((mean, var))` the supplied statistics are
    /// treated as constants (evaluation mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("batch_norm", format!("{s:?}: [B, C, H, W] required")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("batch_norm", format!("{c} channels vs affine params")));
        }
        let count = b * hw;
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::dim("batch_norm", "running statistics length"));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if count == 0 {
                    return Err(Error::dim("batch_norm", "empty batch"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for bi in 0..b {
                        let o = (bi * c + ch) * hw;
                        sum += xv[o..o + hw].iter().sum::<f64>();
                    }
                    let mu = sum / count as f64;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        let o = (bi * c + ch) * hw;
                        sq += xv[o..o + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / count as f64;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let o = (bi * c + ch) * hw;
                for i in o..o + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let stats = batch_stats.then_some(BatchStats {
            mean,
            var,
            count,
        });
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(s, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )?;
        Ok((v, stats))
    }

    /// Divides each contiguous chunk of `chunk` trailing elements by its
    /// Euclidean norm plus `eps`. With `chunk = H·W` on `[B, C, H, W]` this
    /// normalizes every feature map by its Frobenius norm; with `chunk = d`
    /// on `[B, d]` it L2-normalizes rows.
    pub fn normalize(&mut self, a: Var, chunk: usize, eps: f64) -> Result<Var> {
        let t = self.value(a);
        if chunk == 0 || !t.len().is_multiple_of(chunk) {
            return Err(Error::dim("normalize", format!("chunk {chunk} of {:?}", t.shape())));
        }
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / chunk);
        for c in out.chunks_mut(chunk) {
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = 1.0 / (n + eps);
            c.iter_mut().for_each(|v| *v *= inv);
            norms.push(n);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Normalize { a, chunk, eps, norms }, rg)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(id);
            let Some(g) = hi[0].as_deref() else { continue };
            self.backprop_node(id, g, lo);
        }
        self.backward_passes += 1;
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Gradients of `loss` with respect to each of `wrt`, in order.
    pub fn backward_wrt(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        for &v in wrt {
            if !self.requires_grad(v) {
                log::warn!("gradient requested for detached value #{}; returning zeros", v.0);
            }
        }
        let grads = self.backward(loss)?;
        Ok(wrt.iter().map(|&v| grads.get(v)).collect())
    }

    fn backprop_node(&self, id: usize, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = node.value.shape()[1];
                if wants(*a) {
                    // dA = G · op(B)ᵀ
                    let buf = slot(lo, *a, m * k);
                    kernels::gemm(m, n, k, g, false, val(*b), !*trans_b, 1.0, buf);
                }
                if wants(*b) {
                    let buf = slot(lo, *b, sb[0] * sb[1]);
                    if *trans_b {
                        // B is n×k: dB = Gᵀ · A
                        kernels::gemm(n, m, k, g, true, val(*a), false, 1.0, buf);
                    } else {
                        // B is k×n: dB = Aᵀ · G
                        kernels::gemm(k, m, n, val(*a), true, g, false, 1.0, buf);
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                geom,
                cols,
            } => {
                let b = self.shape(*x)[0];
                let cout = self.shape(*kernel)[0];
                let (rows, p) = (geom.col_rows(), geom.out_pixels());
                if wants(*kernel) {
                    let dk = slot(lo, *kernel, cout * rows);
                    for bi in 0..b {
                        kernels::gemm(
                            cout,
                            p,
                            rows,
                            &g[bi * cout * p..(bi + 1) * cout * p],
                            false,
                            &cols[bi * rows * p..(bi + 1) * rows * p],
                            true,
                            1.0,
                            dk,
                        );
                    }
                }
                if wants(*x) {
                    let kv = val(*kernel);
                    let img = geom.cin * geom.h * geom.w;
                    let mut dcol = vec![0.0; rows * p];
                    let dx = slot(lo, *x, b * img);
                    for bi in 0..b {
                        kernels::gemm(
                            rows,
                            cout,
                            p,
                            kv,
                            true,
                            &g[bi * cout * p..(bi + 1) * cout * p],
                            false,
                            0.0,
                            &mut dcol,
                        );
                        kernels::col2im(&dcol, *geom, &mut dx[bi * img..(bi + 1) * img]);
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    add_into(slot(lo, *a, g.len()), g);
                }
                if wants(*b) {
                    let nb = self.value(*b).len();
                    let buf = slot(lo, *b, nb);
                    if nb == g.len() {
                        add_into(buf, g);
                    } else {
                        buf[0] += g.iter().sum::<f64>();
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let scalar_b = bv.len() != av.len();
                if wants(*a) {
                    let buf = slot(lo, *a, g.len());
                    if scalar_b {
                        buf.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * bv[0]);
                    } else {
                        for i in 0..g.len() {
                            buf[i] += g[i] * bv[i];
                        }
                    }
                }
                if wants(*b) {
                    let buf = slot(lo, *b, bv.len());
                    if scalar_b {
                        buf[0] += g.iter().zip(av).map(|(gi, x)| gi * x).sum::<f64>();
                    } else {
                        for i in 0..g.len() {
                            buf[i] += g[i] * av[i];
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                let buf = slot(lo, *a, g.len());
                buf.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c);
            }
            Op::Shift { a } | Op::Reshape { a } => add_into(slot(lo, *a, g.len()), g),
            Op::Relu { a } => {
                let sign = if fault::active(Fault::ReluSignFlip) { -1.0 } else { 1.0 };
                let av = val(*a);
                let buf = slot(lo, *a, g.len());
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        buf[i] += sign * g[i];
                    }
                }
            }
            Op::Softplus { a } => {
                let av = val(*a);
                let buf = slot(lo, *a, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * sigmoid(av[i]);
                }
            }
            Op::Exp { a } => {
                let y = node.value.data();
                let buf = slot(lo, *a, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * y[i];
                }
            }
            Op::Log { a } => {
                let av = val(*a);
                let buf = slot(lo, *a, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] / av[i];
                }
            }
            Op::AvgPool { x, k } => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let buf = slot(lo, *x, planes * h * w);
                kernels::avg_pool_backward(g, planes, h, w, *k, buf);
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                let buf = slot(lo, *a, g.len());
                if n > 0 {
                    for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dotp: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            buf[r * n + j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                let buf = slot(lo, *a, self.value(*a).len());
                buf.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumLastAxis { a } => {
                let sa = self.shape(*a);
                let n = sa[sa.len() - 1];
                let buf = slot(lo, *a, self.value(*a).len());
                if n > 0 {
                    for (row, gi) in buf.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|d| *d += gi);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gv = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let o = (bi * c + ch) * hw;
                        for i in o..o + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if wants(*gamma) {
                    add_into(slot(lo, *gamma, c), &sum_gx);
                }
                if wants(*beta) {
                    add_into(slot(lo, *beta, c), &sum_g);
                }
                if wants(*x) {
                    let count = (b * hw) as f64;
                    let buf = slot(lo, *x, g.len());
                    for bi in 0..b {
                        for ch in 0..c {
                            let o = (bi * c + ch) * hw;
                            let scale = gv[ch] * inv_std[ch];
                            for i in o..o + hw {
                                buf[i] += if *batch_stats {
                                    scale / count * (count * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::Normalize { a, chunk, eps, norms } => {
                let av = val(*a);
                let buf = slot(lo, *a, g.len());
                for (ci, &n) in norms.iter().enumerate() {
                    let r = ci * chunk..(ci + 1) * chunk;
                    let (z, gz) = (&av[r.clone()], &g[r.clone()]);
                    let d = n + eps;
                    let coef = if n > 0.0 {
                        z.iter().zip(gz).map(|(p, q)| p * q).sum::<f64>() / (n * d * d)
                    } else {
                        0.0
                    };
                    for (j, i) in r.enumerate() {
                        buf[i] += gz[j] / d - z[j] * coef;
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slot(lo: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    lo[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::frobenius_inner;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap().get(x);
        assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn linear_form_gradient_is_the_coefficient() {
        let coeff = t(&[2, 2], &[0.5, -1.0, 2.0, 3.0]);
        let xv = t(&[2, 2], &[4.0, 1.0, -2.0, 0.25]);
        let mut tape = Tape::new();
        let g = tape.constant(&coeff).unwrap();
        let x = tape.param(&xv).unwrap();
        let p = tape.mul(g, x).unwrap();
        let loss = tape.sum(p).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), frobenius_inner(&coeff, &xv).unwrap());
        let grads = tape.backward_wrt(loss, &[x, g]).unwrap();
        assert_eq!(grads[0], coeff);
        assert_eq!(grads[1], Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_handle_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0])).unwrap();
        let y = tape.param(&t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(y), Tensor::zeros(&[3]));
        assert!(g.raw(y).is_none());
    }

    #[test]
    fn identity_1x1_convolution() {
        let mut tape = Tape::new();
        let xv = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let x = tape.constant(&xv).unwrap();
        let k = tape
            .param(&t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]))
            .unwrap();
        let y = tape.conv2d(x, k, 0).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2], &[-1.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[2, 5], 0.7)).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(&Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b, false), Err(Error::Dimension { .. })));
        let c = tape.constant(&Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(tape.add(a, c), Err(Error::Dimension { .. })));
        let img = tape.constant(&Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        assert!(tape.avg_pool(img, 2).is_err());
    }

    #[test]
    fn zero_map_normalizes_to_zero() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let y = tape.normalize(x, 4, 1e-8).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().get(x);
        assert!(g.is_finite());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape
                .param(&t(&[1, 1, 3, 3], &[0.1, -0.4, 0.3, 0.9, -0.2, 0.5, 0.7, -0.8, 0.6]))
                .unwrap();
            let k = tape.param(&t(&[2, 1, 3, 3], &[0.3; 18])).unwrap();
            let y = tape.conv2d(x, k, 1).unwrap();
            let y = tape.relu(y).unwrap();
            let y = tape.mul(y, y).unwrap();
            let l = tape.sum(y).unwrap();
            let g = tape.backward(l).unwrap();
            (g.get(x), g.get(k))
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
    }

    #[test]
    fn counts_backward_passes() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(2.0)).unwrap();
        let l = tape.mul(x, x).unwrap();
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.backward_passes(), 2);
    }
}
