//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; ids
//! only ever point backwards, so a single reverse sweep propagates
//! gradients. Heavy kernels live in [`crate::tensor`]; everything here is
//! bookkeeping plus the pointwise backward rules.

use crate::tensor::{
    avgpool2d, conv2d, conv2d_grad_input, conv2d_grad_weight, convt2d, convt2d_grad_input,
    convt2d_grad_weight, matmul, matmul_a_bt, matmul_at_b, maxpool2d, ConvMeta, PoolMeta, Tensor,
};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf { requires_grad: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    PowScalar(usize, f64),
    ClampMin(usize, f64),
    Exp(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Abs(usize),
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    AddRowBias { x: usize, b: usize, rows: usize, cols: usize },
    AddChanBias { x: usize, b: usize, chans: usize, spatial: usize },
    Conv2d { x: usize, w: usize, meta: ConvMeta },
    ConvT2d { x: usize, w: usize, meta: ConvMeta },
    MaxPool { x: usize, arg: Vec<usize> },
    AvgPool { x: usize, meta: PoolMeta },
    MeanHw { x: usize, n: usize, c: usize, h: usize, w: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, c: usize, spatial: usize },
    ChanAffine { x: usize, scale: Vec<f64>, c: usize, spatial: usize },
    Concat2 { parts: Vec<usize>, cols: Vec<usize>, rows: usize },
    Narrow2 { x: usize, start: usize, len: usize, cols: usize },
    SumAll(usize),
    MeanAll(usize),
    Softmax { x: usize, rows: usize, cols: usize },
    RowDot { a: usize, b: usize, rows: usize, cols: usize },
    ScaleByScalar { x: usize, s: usize },
    MulColBroadcast { col: usize, x: usize, rows: usize, cols: usize },
    CrossEntropyChannels { x: usize, probs: Vec<f64>, targets: Vec<u32>, n: usize, k: usize, spatial: usize },
    BceWithLogits { x: usize, targets: Vec<f64> },
    Reshape { x: usize, from: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward pass and computes gradients on demand.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by node id; `None` where no gradient was required.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a node that was expected to receive one; zero tensor of
    /// the given shape when the node is disconnected from the loss.
    pub fn get_or_zero(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            op => self.parents(op).iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Matmul { a, b, .. }
            | Op::RowDot { a, b, .. } => vec![*a, *b],
            Op::ScaleByScalar { x, s } => vec![*x, *s],
            Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::ClampMin(a, _)
            | Op::Exp(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![*a],
            Op::AddRowBias { x, b, .. } | Op::AddChanBias { x, b, .. } => vec![*x, *b],
            Op::Conv2d { x, w, .. } | Op::ConvT2d { x, w, .. } => vec![*x, *w],
            Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::MeanHw { x, .. }
            | Op::ChanAffine { x, .. }
            | Op::Narrow2 { x, .. }
            | Op::Softmax { x, .. }
            | Op::CrossEntropyChannels { x, .. }
            | Op::BceWithLogits { x, .. }
            | Op::Reshape { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat2 { parts, .. } => parts.clone(),
            Op::MulColBroadcast { col, x, .. } => vec![*col, *x],
        }
    }

    // -- graph construction -------------------------------------------------

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    /// Trainable input; `backward` will produce a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a.0))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulScalar(a.0, c))
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::PowScalar(a.0, p))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let v = self.value(a).map(|x| x.max(lo));
        self.push(v, Op::ClampMin(a.0, lo))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a.0))
    }

    /// (m,k)·(k,n) matrix product of 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-D");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-D");
        assert_eq!(sa[1], sb[0], "matmul inner dims {:?} x {:?}", sa, sb);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(&[m, n], v), Op::Matmul { a: a.0, b: b.0, m, k, n })
    }

    /// (rows,cols) + (cols) broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (rows, cols) = (s[0], s[1]);
        assert_eq!(self.value(b).len(), cols);
        let mut v = self.value(x).data().to_vec();
        let bd = self.value(b).data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                v[r * cols + c] += bd[c];
            }
        }
        self.push(Tensor::new(&s, v), Op::AddRowBias { x: x.0, b: b.0, rows, cols })
    }

    /// (n,c,h,w) + (c) broadcast over batch and spatial dims.
    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4);
        let (chans, spatial) = (s[1], s[2] * s[3]);
        assert_eq!(self.value(b).len(), chans);
        let mut v = self.value(x).data().to_vec();
        let bd = self.value(b).data().to_vec();
        for (i, val) in v.iter_mut().enumerate() {
            *val += bd[(i / spatial) % chans];
        }
        self.push(Tensor::new(&s, v), Op::AddChanBias { x: x.0, b: b.0, chans, spatial })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {:?} vs {:?}", xs, ws);
        let meta = ConvMeta {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            out_pad: 0,
        };
        let v = conv2d(self.value(x).data(), self.value(w).data(), &meta);
        let shape = [meta.batch, meta.c_out, meta.out_h(), meta.out_w()];
        self.push(Tensor::new(&shape, v), Op::Conv2d { x: x.0, w: w.0, meta })
    }

    /// Transposed convolution; weights laid out (c_in, c_out, kh, kw).
    pub fn convt2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, out_pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[1], ws[0], "convt2d channel mismatch {:?} vs {:?}", xs, ws);
        let meta = ConvMeta {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[1],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            out_pad,
        };
        let v = convt2d(self.value(x).data(), self.value(w).data(), &meta);
        let shape = [meta.batch, meta.c_out, meta.tout_h(), meta.tout_w()];
        self.push(Tensor::new(&shape, v), Op::ConvT2d { x: x.0, w: w.0, meta })
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        let meta = PoolMeta { batch: s[0], channels: s[1], h: s[2], w: s[3], k, stride, pad };
        let (v, arg) = maxpool2d(self.value(x).data(), &meta);
        let shape = [s[0], s[1], meta.out_h(), meta.out_w()];
        self.push(Tensor::new(&shape, v), Op::MaxPool { x: x.0, arg })
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        let meta = PoolMeta { batch: s[0], channels: s[1], h: s[2], w: s[3], k, stride: k, pad: 0 };
        let v = avgpool2d(self.value(x).data(), &meta);
        let shape = [s[0], s[1], meta.out_h(), meta.out_w()];
        self.push(Tensor::new(&shape, v), Op::AvgPool { x: x.0, meta })
    }

    /// Spatial mean of (n,c,h,w) -> (n,c). Also serves as adaptive average
    /// pooling to 1x1.
    pub fn mean_hw(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let inv = 1.0 / (h * w) as f64;
        let d = self.value(x).data();
        let mut v = vec![0.0; n * c];
        for i in 0..n * c {
            v[i] = d[i * h * w..(i + 1) * h * w].iter().sum::<f64>() * inv;
        }
        self.push(Tensor::new(&[n, c], v), Op::MeanHw { x: x.0, n, c, h, w })
    }

    /// Batch normalization over (n,h,w) per channel, training mode (batch
    /// statistics, biased variance). Returns the output plus the batch mean
    /// and variance so callers can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let spatial = h * w;
        let m = (n * spatial) as f64;
        let d = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let map = &d[(ni * c + ci) * spatial..(ni * c + ci + 1) * spatial];
                mean[ci] += map.iter().sum::<f64>();
            }
        }
        for mu in mean.iter_mut() {
            *mu /= m;
        }
        for ni in 0..n {
            for ci in 0..c {
                let map = &d[(ni * c + ci) * spatial..(ni * c + ci + 1) * spatial];
                var[ci] += map.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        for v in var.iter_mut() {
            *v /= m;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for (i, &xv) in d.iter().enumerate() {
            let ci = (i / spatial) % c;
            let xh = (xv - mean[ci]) * inv_std[ci];
            xhat[i] = xh;
            out[i] = g[ci] * xh + b[ci];
        }
        let node = self.push(
            Tensor::new(&s, out),
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, c, spatial },
        );
        (node, mean, var)
    }

    /// Batch normalization in evaluation mode: per-channel affine with
    /// frozen statistics folded into scale/shift.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: &[f64],
        beta: &[f64],
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4);
        let (c, spatial) = (s[1], s[2] * s[3]);
        let scale: Vec<f64> =
            (0..c).map(|i| gamma[i] / (running_var[i] + eps).sqrt()).collect();
        let shift: Vec<f64> = (0..c).map(|i| beta[i] - scale[i] * running_mean[i]).collect();
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for (i, &xv) in d.iter().enumerate() {
            let ci = (i / spatial) % c;
            out[i] = scale[ci] * xv + shift[ci];
        }
        self.push(Tensor::new(&s, out), Op::ChanAffine { x: x.0, scale, c, spatial })
    }

    /// Concatenate 2-D tensors along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).shape()[0];
        let cols: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.value(p).shape();
                assert_eq!(s.len(), 2);
                assert_eq!(s[0], rows, "concat_cols row mismatch");
                s[1]
            })
            .collect();
        let total: usize = cols.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&cols) {
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::new(&[rows, total], out), Op::Concat2 { parts: ids, cols, rows })
    }

    /// Column slice of a 2-D tensor.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        assert!(start + len <= cols);
        let d = self.value(x).data();
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&d[r * cols + start..r * cols + start + len]);
        }
        self.push(Tensor::new(&[rows, len], out), Op::Narrow2 { x: x.0, start, len, cols })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(v), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let v = self.value(a).data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(v), Op::MeanAll(a.0))
    }

    /// Softmax along the last axis of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..cols {
                let e = (row[c] - mx).exp();
                out[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= z;
            }
        }
        self.push(Tensor::new(&s, out), Op::Softmax { x: x.0, rows, cols })
    }

    /// Row-wise dot product of two (rows,cols) tensors -> (rows,1).
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s, self.value(b).shape());
        let (rows, cols) = (s[0], s[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let v: Vec<f64> = (0..rows)
            .map(|r| {
                da[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&db[r * cols..(r + 1) * cols])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        self.push(Tensor::new(&[rows, 1], v), Op::RowDot { a: a.0, b: b.0, rows, cols })
    }

    /// Multiply a tensor by a one-element tensor (learnable scalar).
    pub fn scale_by_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale factor must be a single element");
        let k = self.value(s).item();
        let v = self.value(x).map(|v| v * k);
        self.push(v, Op::ScaleByScalar { x: x.0, s: s.0 })
    }

    /// Multiply each row of `x` (rows,cols) by the scalar in `col` (rows,1).
    pub fn mul_col_broadcast(&mut self, col: Var, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (rows, cols) = (s[0], s[1]);
        assert_eq!(self.value(col).shape(), &[rows, 1]);
        let dc = self.value(col).data();
        let dx = self.value(x).data();
        let mut out = vec![0.0; dx.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = dc[r] * dx[r * cols + c];
            }
        }
        self.push(Tensor::new(&s, out), Op::MulColBroadcast { col: col.0, x: x.0, rows, cols })
    }

    /// Mean cross-entropy of logits laid out (n, k, spatial) against class
    /// indices (n, spatial). `spatial` may be 1 for plain classification.
    pub fn cross_entropy_channels(&mut self, x: Var, targets: &[u32], k: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        let (n, spatial) = match s.len() {
            2 => {
                assert_eq!(s[1], k);
                (s[0], 1)
            }
            4 => {
                assert_eq!(s[1], k);
                (s[0], s[2] * s[3])
            }
            _ => panic!("cross_entropy_channels expects 2-D or 4-D logits"),
        };
        assert_eq!(targets.len(), n * spatial);
        let d = self.value(x).data();
        let mut probs = vec![0.0; d.len()];
        let mut loss = 0.0;
        for i in 0..n {
            for sp in 0..spatial {
                let mut mx = f64::NEG_INFINITY;
                for c in 0..k {
                    mx = mx.max(d[(i * k + c) * spatial + sp]);
                }
                let mut z = 0.0;
                for c in 0..k {
                    let e = (d[(i * k + c) * spatial + sp] - mx).exp();
                    probs[(i * k + c) * spatial + sp] = e;
                    z += e;
                }
                for c in 0..k {
                    probs[(i * k + c) * spatial + sp] /= z;
                }
                let t = targets[i * spatial + sp] as usize;
                assert!(t < k, "target class {} out of range {}", t, k);
                loss -= probs[(i * k + t) * spatial + sp].max(1e-300).ln();
            }
        }
        loss /= (n * spatial) as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyChannels { x: x.0, probs, targets: targets.to_vec(), n, k, spatial },
        )
    }

    /// Mean binary cross-entropy of logits against {0,1} targets.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Var {
        let d = self.value(x).data();
        assert_eq!(d.len(), targets.len());
        let mut loss = 0.0;
        for (&z, &t) in d.iter().zip(targets) {
            loss += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
        }
        loss /= d.len() as f64;
        self.push(Tensor::scalar(loss), Op::BceWithLogits { x: x.0, targets: targets.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let from = self.value(x).shape().to_vec();
        let v = self.value(x).clone().reshape(shape);
        self.push(v, Op::Reshape { x: x.0, from })
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.accumulate_parents(id, &g, &mut grads);
            // Keep leaf gradients for the caller.
            if matches!(node.op, Op::Leaf { .. }) {
                grads[id] = Some(g);
            }
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate_parents(&self, id: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g.zip(&self.nodes[*b].value, |gv, bv| gv * bv));
                self.acc(grads, *b, g.zip(&self.nodes[*a].value, |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                self.acc(grads, *a, g.zip(bv, |gv, b| gv / b));
                let av = &self.nodes[*a].value;
                let mut d = g.zip(av, |gv, a| gv * a);
                d = d.zip(bv, |v, b| -v / (b * b));
                self.acc(grads, *b, d);
            }
            Op::Neg(a) => self.acc(grads, *a, g.map(|v| -v)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|v| v * c));
            }
            Op::PowScalar(a, p) => {
                let p = *p;
                let x = &self.nodes[*a].value;
                self.acc(grads, *a, g.zip(x, |gv, xv| gv * p * xv.powf(p - 1.0)));
            }
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                let x = &self.nodes[*a].value;
                self.acc(grads, *a, g.zip(x, |gv, xv| if xv > lo { gv } else { 0.0 }));
            }
            Op::Exp(a) => self.acc(grads, *a, g.zip(&node.value, |gv, yv| gv * yv)),
            Op::Tanh(a) => self.acc(grads, *a, g.zip(&node.value, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Sigmoid(a) => {
                self.acc(grads, *a, g.zip(&node.value, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                self.acc(grads, *a, g.zip(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Abs(a) => {
                let x = &self.nodes[*a].value;
                self.acc(grads, *a, g.zip(x, |gv, xv| gv * xv.signum()));
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let da = matmul_a_bt(g.data(), self.nodes[*b].value.data(), m, n, k);
                self.acc(grads, *a, Tensor::new(&[m, k], da));
                let db = matmul_at_b(self.nodes[*a].value.data(), g.data(), m, k, n);
                self.acc(grads, *b, Tensor::new(&[k, n], db));
            }
            Op::AddRowBias { x, b, rows, cols } => {
                self.acc(grads, *x, g.clone());
                let mut db = vec![0.0; *cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        db[c] += g.data()[r * cols + c];
                    }
                }
                self.acc(grads, *b, Tensor::new(&[*cols], db));
            }
            Op::AddChanBias { x, b, chans, spatial } => {
                self.acc(grads, *x, g.clone());
                let mut db = vec![0.0; *chans];
                for (i, gv) in g.data().iter().enumerate() {
                    db[(i / spatial) % chans] += gv;
                }
                self.acc(grads, *b, Tensor::new(&[*chans], db));
            }
            Op::Conv2d { x, w, meta } => {
                if self.nodes[*x].needs_grad {
                    let dx = conv2d_grad_input(g.data(), self.nodes[*w].value.data(), meta);
                    self.acc(grads, *x, Tensor::new(&[meta.batch, meta.c_in, meta.h, meta.w], dx));
                }
                if self.nodes[*w].needs_grad {
                    let dw = conv2d_grad_weight(g.data(), self.nodes[*x].value.data(), meta);
                    self.acc(
                        grads,
                        *w,
                        Tensor::new(&[meta.c_out, meta.c_in, meta.kh, meta.kw], dw),
                    );
                }
            }
            Op::ConvT2d { x, w, meta } => {
                if self.nodes[*x].needs_grad {
                    let dx = convt2d_grad_input(g.data(), self.nodes[*w].value.data(), meta);
                    self.acc(grads, *x, Tensor::new(&[meta.batch, meta.c_in, meta.h, meta.w], dx));
                }
                if self.nodes[*w].needs_grad {
                    let dw = convt2d_grad_weight(g.data(), self.nodes[*x].value.data(), meta);
                    self.acc(
                        grads,
                        *w,
                        Tensor::new(&[meta.c_in, meta.c_out, meta.kh, meta.kw], dw),
                    );
                }
            }
            Op::MaxPool { x, arg } => {
                let xs = self.nodes[*x].value.shape();
                let mut dx = Tensor::zeros(xs);
                for (gi, &src) in g.data().iter().zip(arg) {
                    dx.data_mut()[src] += gi;
                }
                self.acc(grads, *x, dx);
            }
            Op::AvgPool { x, meta } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let mut dx = Tensor::zeros(&xs);
                let (oh, ow) = (meta.out_h(), meta.out_w());
                let inv = 1.0 / (meta.k * meta.k) as f64;
                let maps = meta.batch * meta.channels;
                for i in 0..maps {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[(i * oh + oy) * ow + ox] * inv;
                            for ky in 0..meta.k {
                                for kx in 0..meta.k {
                                    let iy = oy * meta.stride + ky;
                                    let ix = ox * meta.stride + kx;
                                    dx.data_mut()[i * meta.h * meta.w + iy * meta.w + ix] += gv;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::MeanHw { x, n, c, h, w } => {
                let inv = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for i in 0..n * c {
                    let gv = g.data()[i] * inv;
                    for v in dx[i * h * w..(i + 1) * h * w].iter_mut() {
                        *v = gv;
                    }
                }
                self.acc(grads, *x, Tensor::new(&[*n, *c, *h, *w], dx));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, c, spatial } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                let n = shape[0];
                let m = (n * spatial) as f64;
                let gm = self.nodes[*gamma].value.data();
                // Per-channel sums of g and g*xhat.
                let mut sum_g = vec![0.0; *c];
                let mut sum_gx = vec![0.0; *c];
                for (i, gv) in g.data().iter().enumerate() {
                    let ci = (i / spatial) % c;
                    sum_g[ci] += gv;
                    sum_gx[ci] += gv * xhat[i];
                }
                if self.nodes[*x].needs_grad {
                    let mut dx = vec![0.0; g.len()];
                    for (i, gv) in g.data().iter().enumerate() {
                        let ci = (i / spatial) % c;
                        dx[i] = gm[ci] * inv_std[ci]
                            * (gv - sum_g[ci] / m - xhat[i] * sum_gx[ci] / m);
                    }
                    self.acc(grads, *x, Tensor::new(&shape, dx));
                }
                self.acc(grads, *gamma, Tensor::new(&[*c], sum_gx));
                self.acc(grads, *beta, Tensor::new(&[*c], sum_g));
            }
            Op::ChanAffine { x, scale, c, spatial } => {
                let dx = Tensor::new(
                    self.nodes[*x].value.shape(),
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * scale[(i / spatial) % c])
                        .collect(),
                );
                self.acc(grads, *x, dx);
            }
            Op::Concat2 { parts, cols, rows } => {
                let total: usize = cols.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(cols) {
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..*rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    self.acc(grads, p, Tensor::new(&[*rows, w], dp));
                    offset += w;
                }
            }
            Op::Narrow2 { x, start, len, cols } => {
                let rows = self.nodes[*x].value.shape()[0];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, Tensor::new(&[rows, *cols], dx));
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.acc(grads, *a, Tensor::full(self.nodes[*a].value.shape(), gv));
            }
            Op::MeanAll(a) => {
                let gv = g.item() / self.nodes[*a].value.len() as f64;
                self.acc(grads, *a, Tensor::full(self.nodes[*a].value.shape(), gv));
            }
            Op::Softmax { x, rows, cols } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..*rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ci in 0..*cols {
                        dx[r * cols + ci] = yr[ci] * (gr[ci] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(&[*rows, *cols], dx));
            }
            Op::ScaleByScalar { x, s } => {
                let k = self.nodes[*s].value.item();
                self.acc(grads, *x, g.map(|v| v * k));
                let xv = &self.nodes[*x].value;
                let ds: f64 = g.data().iter().zip(xv.data()).map(|(gv, xvv)| gv * xvv).sum();
                self.acc(grads, *s, Tensor::scalar(ds));
            }
            Op::RowDot { a, b, rows, cols } => {
                let (da_src, db_src) = (&self.nodes[*b].value, &self.nodes[*a].value);
                let mut da = vec![0.0; rows * cols];
                let mut db = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let gv = g.data()[r];
                    for ci in 0..*cols {
                        da[r * cols + ci] = gv * da_src.data()[r * cols + ci];
                        db[r * cols + ci] = gv * db_src.data()[r * cols + ci];
                    }
                }
                self.acc(grads, *a, Tensor::new(&[*rows, *cols], da));
                self.acc(grads, *b, Tensor::new(&[*rows, *cols], db));
            }
            Op::MulColBroadcast { col, x, rows, cols } => {
                let xv = self.nodes[*x].value.data();
                let cv = self.nodes[*col].value.data();
                let mut dcol = vec![0.0; *rows];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for ci in 0..*cols {
                        dcol[r] += g.data()[r * cols + ci] * xv[r * cols + ci];
                        dx[r * cols + ci] = g.data()[r * cols + ci] * cv[r];
                    }
                }
                self.acc(grads, *col, Tensor::new(&[*rows, 1], dcol));
                self.acc(grads, *x, Tensor::new(&[*rows, *cols], dx));
            }
            Op::CrossEntropyChannels { x, probs, targets, n, k, spatial } => {
                let gv = g.item() / (n * spatial) as f64;
                let mut dx = probs.clone();
                for i in 0..*n {
                    for sp in 0..*spatial {
                        let t = targets[i * spatial + sp] as usize;
                        dx[(i * k + t) * spatial + sp] -= 1.0;
                    }
                }
                for v in dx.iter_mut() {
                    *v *= gv;
                }
                self.acc(grads, *x, Tensor::new(self.nodes[*x].value.shape(), dx));
            }
            Op::BceWithLogits { x, targets } => {
                let d = self.nodes[*x].value.data();
                let gv = g.item() / d.len() as f64;
                let dx: Vec<f64> = d
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (1.0 / (1.0 + (-z).exp()) - t) * gv)
                    .collect();
                self.acc(grads, *x, Tensor::new(self.nodes[*x].value.shape(), dx));
            }
            Op::Reshape { x, from } => {
                self.acc(grads, *x, g.clone().reshape(from));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite-difference check of a scalar function of one tensor.
    fn finite_diff_check(
        build: impl Fn(&mut Tape, Var) -> Var,
        x0: Tensor,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).expect("gradient missing").clone();

        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= eps;
            let mut tp = Tape::new();
            let xp = tp.param(plus);
            let lp = build(&mut tp, xp);
            let mut tm = Tape::new();
            let xm = tm.param(minus);
            let lm = build(&mut tm, xm);
            let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * eps);
            let a = analytic.data()[i];
            // Near-zero gradients drown in finite-difference noise; accept
            // them on absolute error.
            if (a - numeric).abs() < 1e-6 {
                continue;
            }
            let denom = numeric.abs().max(a.abs()).max(1e-8);
            assert!(
                ((a - numeric) / denom).abs() < tol,
                "grad mismatch at {}: analytic {} vs numeric {}",
                i,
                a,
                numeric
            );
        }
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.7).sin() * scale).collect())
    }

    #[test]
    fn grad_elementwise_chain() {
        finite_diff_check(
            |t, x| {
                let y = t.tanh(x);
                let z = t.mul(y, y);
                let w = t.add_scalar(z, 0.3);
                let q = t.pow_scalar(w, 1.7);
                t.mean_all(q)
            },
            ramp(&[3, 4], 0.8),
            1e-5,
        );
    }

    #[test]
    fn grad_matmul_bias_softmax() {
        finite_diff_check(
            |t, x| {
                let w = t.constant(ramp(&[4, 3], 0.5));
                let y = t.matmul(x, w);
                let s = t.softmax(y);
                let sq = t.mul(s, s);
                t.sum_all(sq)
            },
            ramp(&[2, 4], 1.0),
            1e-4,
        );
    }

    #[test]
    fn grad_conv2d_both_sides() {
        // Check input gradient.
        finite_diff_check(
            |t, x| {
                let w = t.constant(ramp(&[2, 1, 3, 3], 0.4));
                let y = t.conv2d(x, w, 2, 1);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            },
            ramp(&[1, 1, 6, 6], 0.9),
            1e-4,
        );
        // Check weight gradient.
        finite_diff_check(
            |t, w| {
                let x = t.constant(ramp(&[2, 1, 5, 5], 0.7));
                let y = t.conv2d(x, w, 1, 0);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            },
            ramp(&[2, 1, 3, 3], 0.6),
            1e-4,
        );
    }

    #[test]
    fn grad_convt2d_both_sides() {
        finite_diff_check(
            |t, x| {
                let w = t.constant(ramp(&[2, 3, 3, 3], 0.4));
                let y = t.convt2d(x, w, 2, 1, 1);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            },
            ramp(&[1, 2, 4, 4], 0.9),
            1e-4,
        );
        finite_diff_check(
            |t, w| {
                let x = t.constant(ramp(&[1, 2, 4, 4], 0.7));
                let y = t.convt2d(x, w, 2, 1, 1);
                let abs = t.abs(y);
                t.sum_all(abs)
            },
            ramp(&[2, 2, 3, 3], 0.5),
            1e-4,
        );
    }

    #[test]
    fn grad_pools() {
        finite_diff_check(
            |t, x| {
                let y = t.avgpool2d(x, 2);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            },
            ramp(&[1, 2, 4, 4], 1.1),
            1e-5,
        );
        finite_diff_check(
            |t, x| {
                let y = t.mean_hw(x);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            },
            ramp(&[2, 3, 4, 4], 1.0),
            1e-5,
        );
    }

    #[test]
    fn grad_batch_norm() {
        finite_diff_check(
            |t, x| {
                let gamma = t.constant(Tensor::new(&[2], vec![1.3, 0.7]));
                let beta = t.constant(Tensor::new(&[2], vec![0.1, -0.2]));
                let (y, _, _) = t.batch_norm_train(x, gamma, beta, 1e-5);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            },
            ramp(&[2, 2, 3, 3], 1.0),
            1e-3,
        );
        // Gamma and beta gradients.
        let x0 = ramp(&[2, 2, 3, 3], 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(x0);
        let gamma = tape.param(Tensor::new(&[2], vec![1.3, 0.7]));
        let beta = tape.param(Tensor::new(&[2], vec![0.1, -0.2]));
        let (y, _, _) = tape.batch_norm_train(x, gamma, beta, 1e-5);
        let y2 = tape.mul(y, y);
        let loss = tape.sum_all(y2);
        let grads = tape.backward(loss);
        assert!(grads.get(gamma).is_some());
        assert!(grads.get(beta).is_some());
    }

    #[test]
    fn grad_concat_narrow() {
        finite_diff_check(
            |t, x| {
                let a = t.narrow_cols(x, 0, 2);
                let b = t.narrow_cols(x, 2, 3);
                let ab = t.concat_cols(&[b, a]);
                let s = t.sigmoid(ab);
                let sq = t.mul(s, s);
                t.mean_all(sq)
            },
            ramp(&[3, 5], 0.9),
            1e-5,
        );
    }

    #[test]
    fn grad_cross_entropy() {
        finite_diff_check(
            |t, x| t.cross_entropy_channels(x, &[2, 0], 4),
            ramp(&[2, 4], 1.5),
            1e-4,
        );
        finite_diff_check(
            |t, x| t.cross_entropy_channels(x, &[0, 1, 2, 1], 3),
            ramp(&[1, 3, 2, 2], 1.2),
            1e-4,
        );
    }

    #[test]
    fn grad_bce() {
        finite_diff_check(
            |t, x| t.bce_with_logits(x, &[1.0, 0.0, 1.0]),
            ramp(&[3, 1], 1.4),
            1e-4,
        );
    }

    #[test]
    fn grad_attention_pieces() {
        finite_diff_check(
            |t, x| {
                let other = t.constant(ramp(&[3, 4], 0.8));
                let d = t.row_dot(x, other);
                let soft_in = t.concat_cols(&[d, d]);
                let a = t.softmax(soft_in);
                let col = t.narrow_cols(a, 0, 1);
                let y = t.mul_col_broadcast(col, x);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            },
            ramp(&[3, 4], 0.9),
            1e-4,
        );
    }

    #[test]
    fn disconnected_input_gets_no_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[2], vec![1.0, 2.0]));
        let y = tape.param(Tensor::new(&[2], vec![3.0, 4.0]));
        let s = tape.sum_all(x);
        let grads = tape.backward(s);
        assert!(grads.get(x).is_some());
        assert!(grads.get(y).is_none());
    }
}
