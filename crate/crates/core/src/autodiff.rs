//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation appends a node to a [`Tape`]. [`Tape::backward`] walks the
//! nodes in exact reverse order, so a leaf that feeds several paths (the
//! shared weights of the three triplet branches) sums every contribution.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::kernels::{self, ConvGeom, Padding, PoolGeom};
use crate::tensor::{dims4, expect_rank, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Batchnorm behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Per-channel running mean and (unbiased) variance of a batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    MaxPool { x: usize, argmax: Vec<usize> },
    AvgPool { x: usize, geom: PoolGeom },
    Relu { x: usize },
    Tanh { x: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Dense { x: usize, w: usize, b: usize },
    MulBroadcast { a: usize, m: usize },
    Add { a: usize, b: usize },
    ChannelMax { x: usize, argmax: Vec<usize> },
    ChannelMean { x: usize },
    Concat { parts: Vec<usize> },
    Reshape { x: usize },
    Sum { x: usize },
    Custom { inputs: Vec<usize>, local: Vec<Vec<f64>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The operation record for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter. `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "var belongs to another tape");
        &self.nodes[v.idx].value
    }

    /// Gradient of the last backward pass for a leaf that requires it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.nodes[v.idx].value.grad()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn shape(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn data(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> Var {
        let requires = inputs.iter().any(|&i| self.nodes[i].value.requires_grad());
        let mut value = Tensor::new(shape, data).expect("kernel produced a consistent shape");
        value.set_requires_grad(requires);
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(kernel)?, self.idx(bias)?);
        let geom = ConvGeom::new(self.shape(xi), self.shape(wi), self.shape(bi), stride, padding)?;
        let out = kernels::conv2d_forward(self.data(xi), self.data(wi), self.data(bi), &geom);
        Ok(self.push(geom.out_shape(), out, Op::Conv2d { x: xi, w: wi, b: bi, geom }, &[xi, wi, bi]))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize, padding: Padding) -> Result<Var> {
        let xi = self.idx(x)?;
        let geom = PoolGeom::new("maxpool2d", self.shape(xi), window, stride, padding)?;
        let (out, argmax) = kernels::maxpool_forward(self.data(xi), &geom);
        Ok(self.push(geom.out_shape(), out, Op::MaxPool { x: xi, argmax }, &[xi]))
    }

    pub fn avgpool2d(&mut self, x: Var, window: usize, stride: usize, padding: Padding) -> Result<Var> {
        let xi = self.idx(x)?;
        let geom = PoolGeom::new("avgpool2d", self.shape(xi), window, stride, padding)?;
        let out = kernels::avgpool_forward(self.data(xi), &geom);
        Ok(self.push(geom.out_shape(), out, Op::AvgPool { x: xi, geom }, &[xi]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.data(xi).iter().map(|&v| v.max(0.0)).collect();
        Ok(self.push(self.shape(xi).to_vec(), out, Op::Relu { x: xi }, &[xi]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.data(xi).iter().map(|&v| v.tanh()).collect();
        Ok(self.push(self.shape(xi).to_vec(), out, Op::Tanh { x: xi }, &[xi]))
    }

    /// Per-channel batch normalization of an `(N, C, H, W)` tensor.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut RunningStats, mode: Mode) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        expect_rank("batchnorm", self.shape(xi), 4)?;
        let [n, c, h, w] = dims4(self.shape(xi));
        for (axis, t) in [("gamma", gi), ("beta", bi)] {
            if self.shape(t) != [c] {
                return Err(TensorError::Dimension {
                    op: "batchnorm",
                    axis,
                    expected: c,
                    found: self.nodes[t].value.len(),
                });
            }
        }
        if stats.mean.len() != c {
            return Err(TensorError::Dimension {
                op: "batchnorm",
                axis: "running stats",
                expected: c,
                found: stats.mean.len(),
            });
        }
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(TensorError::BatchTooSmall(n));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let data = self.data(xi);
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; data.len()];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0;
                for b in 0..n {
                    s += data[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
                }
                let mean = s / count;
                let mut q = 0.0;
                for b in 0..n {
                    q += data[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = q / count;
                let m = stats.momentum;
                stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean;
                stats.var[ch] = (1.0 - m) * stats.var[ch] + m * var * count / (count - 1.0);
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            for b in 0..n {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for (o, v) in xhat[r.clone()].iter_mut().zip(&data[r]) {
                    *o = (v - mean) * is;
                }
            }
        }
        let (g, be) = (self.data(gi), self.data(bi));
        let mut out = xhat.clone();
        for b in 0..n {
            for ch in 0..c {
                for v in &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    *v = *v * g[ch] + be[ch];
                }
            }
        }
        let shape = self.shape(xi).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                train,
            },
            &[xi, gi, bi],
        ))
    }

    /// Fully connected layer: `x (N, in)`, `w (out, in)`, `b (out)` to `(N, out)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        expect_rank("dense", self.shape(xi), 2)?;
        expect_rank("dense", self.shape(wi), 2)?;
        let (n, fin) = (self.shape(xi)[0], self.shape(xi)[1]);
        let (fout, win) = (self.shape(wi)[0], self.shape(wi)[1]);
        if win != fin {
            return Err(TensorError::Dimension {
                op: "dense",
                axis: "input features",
                expected: win,
                found: fin,
            });
        }
        if self.shape(bi) != [fout] {
            return Err(TensorError::Dimension {
                op: "dense",
                axis: "bias",
                expected: fout,
                found: self.nodes[bi].value.len(),
            });
        }
        let (xd, wd, bd) = (self.data(xi), self.data(wi), self.data(bi));
        let mut out = Vec::with_capacity(n * fout);
        for r in 0..n {
            let row = &xd[r * fin..(r + 1) * fin];
            for o in 0..fout {
                out.push(bd[o] + kernels::dot(&wd[o * fin..(o + 1) * fin], row));
            }
        }
        Ok(self.push(vec![n, fout], out, Op::Dense { x: xi, w: wi, b: bi }, &[xi, wi, bi]))
    }

    /// Elementwise product; `m` is either the same shape as `a` or broadcast
    /// over channels with shape `(N, 1, H, W)`.
    pub fn mul_broadcast(&mut self, a: Var, m: Var) -> Result<Var> {
        let (ai, mi) = (self.idx(a)?, self.idx(m)?);
        let (sa, sm) = (self.shape(ai).to_vec(), self.shape(mi).to_vec());
        let out: Vec<f64> = if sa == sm {
            self.data(ai).iter().zip(self.data(mi)).map(|(x, y)| x * y).collect()
        } else {
            expect_rank("mul_broadcast", &sa, 4)?;
            expect_rank("mul_broadcast", &sm, 4)?;
            let [n, c, h, w] = dims4(&sa);
            for (axis, e, f) in [("batch", n, sm[0]), ("channel", 1, sm[1]), ("height", h, sm[2]), ("width", w, sm[3])] {
                if e != f {
                    return Err(TensorError::Dimension {
                        op: "mul_broadcast",
                        axis,
                        expected: e,
                        found: f,
                    });
                }
            }
            let plane = h * w;
            let (ad, md) = (self.data(ai), self.data(mi));
            let mut out = Vec::with_capacity(ad.len());
            for b in 0..n {
                let mp = &md[b * plane..(b + 1) * plane];
                for ch in 0..c {
                    let ap = &ad[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    out.extend(ap.iter().zip(mp).map(|(x, y)| x * y));
                }
            }
            out
        };
        Ok(self.push(sa, out, Op::MulBroadcast { a: ai, m: mi }, &[ai, mi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.shape(ai) != self.shape(bi) {
            return Err(shape_mismatch("add", self.shape(ai), self.shape(bi)));
        }
        let out = self.data(ai).iter().zip(self.data(bi)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(ai).to_vec(), out, Op::Add { a: ai, b: bi }, &[ai, bi]))
    }

    /// Maximum over the channel axis: `(N, C, H, W)` to `(N, 1, H, W)`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        expect_rank("channel_max", self.shape(xi), 4)?;
        let [n, c, h, w] = dims4(self.shape(xi));
        let plane = h * w;
        let d = self.data(xi);
        let mut out = Vec::with_capacity(n * plane);
        let mut argmax = Vec::with_capacity(n * plane);
        for b in 0..n {
            for p in 0..plane {
                let mut best_i = b * c * plane + p;
                for ch in 1..c {
                    let i = (b * c + ch) * plane + p;
                    if d[i] > d[best_i] {
                        best_i = i;
                    }
                }
                out.push(d[best_i]);
                argmax.push(best_i);
            }
        }
        Ok(self.push(vec![n, 1, h, w], out, Op::ChannelMax { x: xi, argmax }, &[xi]))
    }

    /// Mean over the channel axis: `(N, C, H, W)` to `(N, 1, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        expect_rank("channel_mean", self.shape(xi), 4)?;
        let [n, c, h, w] = dims4(self.shape(xi));
        let plane = h * w;
        let d = self.data(xi);
        let mut out = vec![0.0; n * plane];
        for b in 0..n {
            let o = &mut out[b * plane..(b + 1) * plane];
            for ch in 0..c {
                for (acc, v) in o.iter_mut().zip(&d[(b * c + ch) * plane..(b * c + ch + 1) * plane]) {
                    *acc += v;
                }
            }
            for v in o.iter_mut() {
                *v /= c as f64;
            }
        }
        Ok(self.push(vec![n, 1, h, w], out, Op::ChannelMean { x: xi }, &[xi]))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = idx.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        expect_rank("concat_channels", self.shape(*first), 4)?;
        let [n, _, h, w] = dims4(self.shape(*first));
        let mut total_c = 0;
        for &i in &idx {
            let s = self.shape(i);
            expect_rank("concat_channels", s, 4)?;
            for (axis, e, f) in [("batch", n, s[0]), ("height", h, s[2]), ("width", w, s[3])] {
                if e != f {
                    return Err(TensorError::Dimension {
                        op: "concat_channels",
                        axis,
                        expected: e,
                        found: f,
                    });
                }
            }
            total_c += s[1];
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &i in &idx {
                let c = self.shape(i)[1];
                out.extend_from_slice(&self.data(i)[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Ok(self.push(vec![n, total_c, h, w], out, Op::Concat { parts: idx.clone() }, &idx))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        if shape.iter().product::<usize>() != self.nodes[xi].value.len() {
            return Err(TensorError::Length {
                shape: shape.to_vec(),
                data: self.nodes[xi].value.len(),
            });
        }
        let data = self.data(xi).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x: xi }, &[xi]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.data(xi).iter().sum();
        Ok(self.push(vec![1], vec![s], Op::Sum { x: xi }, &[xi]))
    }

    /// Records a scalar computed outside the tape together with its partial
    /// derivatives with respect to each input.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: f64, local: Vec<Vec<f64>>) -> Result<Var> {
        let idx = inputs.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        if local.len() != idx.len() {
            return Err(TensorError::Invalid("one local gradient per input is required".into()));
        }
        for (&i, g) in idx.iter().zip(&local) {
            if g.len() != self.nodes[i].value.len() {
                return Err(TensorError::Length {
                    shape: self.shape(i).to_vec(),
                    data: g.len(),
                });
            }
        }
        Ok(self.push(vec![1], vec![value], Op::Custom { inputs: idx.clone(), local }, &idx))
    }

    /// Back-propagates from a scalar loss. Afterwards every leaf that requires
    /// a gradient carries it (zeros when it did not influence the loss).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::NotScalar(self.shape(li).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dout) = grads[i].take() else { continue };
            self.backward_node(i, &dout, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let len = node.value.len();
                node.value
                    .set_grad(g.unwrap_or_else(|| vec![0.0; len]))
                    .expect("gradient length matches value");
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, dout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].value.requires_grad();
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], j: usize) -> &'a mut Vec<f64> {
            grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()])
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let mut dx = wants(x).then(|| grads[x].take().unwrap_or_else(|| vec![0.0; nodes[x].value.len()]));
                let mut dw = wants(w).then(|| grads[w].take().unwrap_or_else(|| vec![0.0; nodes[w].value.len()]));
                let mut db = wants(b).then(|| grads[b].take().unwrap_or_else(|| vec![0.0; nodes[b].value.len()]));
                kernels::conv2d_backward(
                    nodes[x].value.data(),
                    nodes[w].value.data(),
                    dout,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(v) = dx {
                    grads[x] = Some(v);
                }
                if let Some(v) = dw {
                    grads[w] = Some(v);
                }
                if let Some(v) = db {
                    grads[b] = Some(v);
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let g = acc(grads, nodes, *x);
                    for (d, &a) in dout.iter().zip(argmax) {
                        g[a] += d;
                    }
                }
            }
            Op::AvgPool { x, geom } => {
                if wants(*x) {
                    kernels::avgpool_backward(dout, geom, acc(grads, nodes, *x));
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xd = nodes[*x].value.data();
                    let g = acc(grads, nodes, *x);
                    for ((gi, d), v) in g.iter_mut().zip(dout).zip(xd) {
                        if *v > 0.0 {
                            *gi += d;
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let g = acc(grads, nodes, *x);
                    for ((gi, d), t) in g.iter_mut().zip(dout).zip(y) {
                        *gi += d * (1.0 - t * t);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = dims4(nodes[*x].value.shape());
                let plane = h * w;
                let count = (n * plane) as f64;
                let gd = nodes[*gamma].value.data();
                let mut sum_d = vec![0.0; c];
                let mut sum_dx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        for (d, xh) in dout[r.clone()].iter().zip(&xhat[r]) {
                            sum_d[ch] += d;
                            sum_dx[ch] += d * xh;
                        }
                    }
                }
                if wants(*gamma) {
                    let g = acc(grads, nodes, *gamma);
                    for ch in 0..c {
                        g[ch] += sum_dx[ch];
                    }
                }
                if wants(*beta) {
                    let g = acc(grads, nodes, *beta);
                    for ch in 0..c {
                        g[ch] += sum_d[ch];
                    }
                }
                if wants(*x) {
                    let g = acc(grads, nodes, *x);
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                            let scale = gd[ch] * inv_std[ch];
                            if *train {
                                let md = sum_d[ch] / count;
                                let mdx = sum_dx[ch] / count;
                                for ((gi, d), xh) in g[r.clone()].iter_mut().zip(&dout[r.clone()]).zip(&xhat[r]) {
                                    *gi += scale * (d - md - xh * mdx);
                                }
                            } else {
                                for (gi, d) in g[r.clone()].iter_mut().zip(&dout[r]) {
                                    *gi += scale * d;
                                }
                            }
                        }
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let (n, fin) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
                let fout = nodes[*w].value.shape()[0];
                if wants(*b) {
                    let g = acc(grads, nodes, *b);
                    for r in 0..n {
                        for o in 0..fout {
                            g[o] += dout[r * fout + o];
                        }
                    }
                }
                if wants(*w) {
                    let xd = nodes[*x].value.data();
                    let g = acc(grads, nodes, *w);
                    for r in 0..n {
                        let row = &xd[r * fin..(r + 1) * fin];
                        for o in 0..fout {
                            let d = dout[r * fout + o];
                            for (gi, xv) in g[o * fin..(o + 1) * fin].iter_mut().zip(row) {
                                *gi += d * xv;
                            }
                        }
                    }
                }
                if wants(*x) {
                    let wd = nodes[*w].value.data();
                    let g = acc(grads, nodes, *x);
                    for r in 0..n {
                        for o in 0..fout {
                            let d = dout[r * fout + o];
                            for (gi, wv) in g[r * fin..(r + 1) * fin].iter_mut().zip(&wd[o * fin..(o + 1) * fin]) {
                                *gi += d * wv;
                            }
                        }
                    }
                }
            }
            Op::MulBroadcast { a, m } => {
                let (ad, md) = (nodes[*a].value.data(), nodes[*m].value.data());
                if nodes[*a].value.shape() == nodes[*m].value.shape() {
                    if wants(*a) {
                        let g = acc(grads, nodes, *a);
                        for ((gi, d), mv) in g.iter_mut().zip(dout).zip(md) {
                            *gi += d * mv;
                        }
                    }
                    if wants(*m) {
                        let g = acc(grads, nodes, *m);
                        for ((gi, d), av) in g.iter_mut().zip(dout).zip(ad) {
                            *gi += d * av;
                        }
                    }
                } else {
                    let [n, c, h, w] = dims4(nodes[*a].value.shape());
                    let plane = h * w;
                    if wants(*a) {
                        let g = acc(grads, nodes, *a);
                        for b in 0..n {
                            let mp = &md[b * plane..(b + 1) * plane];
                            for ch in 0..c {
                                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                                for ((gi, d), mv) in g[r.clone()].iter_mut().zip(&dout[r]).zip(mp) {
                                    *gi += d * mv;
                                }
                            }
                        }
                    }
                    if wants(*m) {
                        let g = acc(grads, nodes, *m);
                        for b in 0..n {
                            let gp = &mut g[b * plane..(b + 1) * plane];
                            for ch in 0..c {
                                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                                for ((gi, d), av) in gp.iter_mut().zip(&dout[r.clone()]).zip(&ad[r]) {
                                    *gi += d * av;
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for j in [*a, *b] {
                    if wants(j) {
                        let g = acc(grads, nodes, j);
                        for (gi, d) in g.iter_mut().zip(dout) {
                            *gi += d;
                        }
                    }
                }
            }
            Op::ChannelMax { x, argmax } => {
                if wants(*x) {
                    let g = acc(grads, nodes, *x);
                    for (d, &a) in dout.iter().zip(argmax) {
                        g[a] += d;
                    }
                }
            }
            Op::ChannelMean { x } => {
                if wants(*x) {
                    let [n, c, h, w] = dims4(nodes[*x].value.shape());
                    let plane = h * w;
                    let g = acc(grads, nodes, *x);
                    for b in 0..n {
                        let dp = &dout[b * plane..(b + 1) * plane];
                        for ch in 0..c {
                            for (gi, d) in g[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter_mut().zip(dp) {
                                *gi += d / c as f64;
                            }
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let [n, total_c, h, w] = dims4(nodes[i].value.shape());
                let plane = h * w;
                let mut offset = 0;
                for &j in parts {
                    let c = nodes[j].value.shape()[1];
                    if wants(j) {
                        let g = acc(grads, nodes, j);
                        for b in 0..n {
                            let src = &dout[(b * total_c + offset) * plane..(b * total_c + offset + c) * plane];
                            for (gi, d) in g[b * c * plane..(b + 1) * c * plane].iter_mut().zip(src) {
                                *gi += d;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    let g = acc(grads, nodes, *x);
                    for (gi, d) in g.iter_mut().zip(dout) {
                        *gi += d;
                    }
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let g = acc(grads, nodes, *x);
                    for gi in g.iter_mut() {
                        *gi += dout[0];
                    }
                }
            }
            Op::Custom { inputs, local } => {
                for (&j, l) in inputs.iter().zip(local) {
                    if wants(j) {
                        let g = acc(grads, nodes, j);
                        for (gi, lv) in g.iter_mut().zip(l) {
                            *gi += dout[0] * lv;
                        }
                    }
                }
            }
        }
    }
}

fn shape_mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    if a.len() != b.len() {
        return TensorError::Rank {
            op,
            expected: a.len(),
            found: b.len(),
        };
    }
    let axis = a.iter().zip(b).position(|(x, y)| x != y).unwrap_or(0);
    const AXES: [&str; 4] = ["batch", "channel", "height", "width"];
    TensorError::Dimension {
        op,
        axis: AXES.get(axis).copied().unwrap_or("trailing"),
        expected: a[axis],
        found: b[axis],
    }
}
