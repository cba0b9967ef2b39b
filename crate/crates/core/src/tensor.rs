//! Dense f64 tensors and a reverse-mode tape.
//!
//! Forward ops are recorded on a [`Graph`] in execution order, so the node
//! vector is already topologically sorted and the backward pass is a single
//! reverse sweep. `backward` consumes the graph.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at {i}",
                data[i]
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn into_param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of {}",
                g.len(),
                self.data.len()
            )));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    /// Element access for 2-D tensors.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Numeric(format!("{what}: non-finite value at {i}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        padding: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    OneMinus(Var),
    Neg(Var),
    Scale {
        x: Var,
        c: f64,
    },
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Upsample2(Var),
    AvgPool2(Var),
    ChannelScale {
        x: Var,
        m: Var,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by the recorded vars.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn conv_out(h: usize, k: usize, padding: usize) -> Option<usize> {
    (h + 2 * padding + 1).checked_sub(k)
}

/// Output positions `i < out` whose tap `i + u - padding` lands inside `0..input`.
fn tap_range(out: usize, input: usize, u: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(u);
    let hi = (input + padding).saturating_sub(u).min(out);
    (lo, hi.max(lo))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a leaf that always receives gradients.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(Error::Dimension(format!(
                "dense: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (b, i, o) = (xs[0], xs[1], ws[0]);
        let x = self.value(input);
        let w = self.value(weight);
        let bv = self.value(bias);
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            let xr = &x[r * i..(r + 1) * i];
            for c in 0..o {
                let wr = &w[c * i..(c + 1) * i];
                out[r * o + c] = bv[c] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            vec![b, o],
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, padding: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernels), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 || xs[1] != ks[1] || bs[0] != ks[0] {
            return Err(Error::Dimension(format!(
                "conv2d: input {xs:?}, kernels {ks:?}, bias {bs:?}"
            )));
        }
        if ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(Error::Dimension(format!(
                "conv2d: kernel must be square and odd, got {ks:?}"
            )));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ks[0], ks[2]);
        let (oh, ow) = match (conv_out(h, k, padding), conv_out(w, k, padding)) {
            (Some(a), Some(bw)) if a > 0 && bw > 0 => (a, bw),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d: kernel {k} larger than padded input {h}x{w} (padding {padding})"
                )))
            }
        };
        let x = self.value(input);
        let kv = self.value(kernels);
        let bv = self.value(bias);
        let mut out = vec![0.0; b * o * oh * ow];
        for n in 0..b {
            for oc in 0..o {
                let plane = &mut out[(n * o + oc) * oh * ow..(n * o + oc + 1) * oh * ow];
                plane.iter_mut().for_each(|v| *v = bv[oc]);
                for ic in 0..c {
                    let xp = &x[(n * c + ic) * h * w..(n * c + ic + 1) * h * w];
                    for u in 0..k {
                        let (i0, i1) = tap_range(oh, h, u, padding);
                        for v in 0..k {
                            let (j0, j1) = tap_range(ow, w, v, padding);
                            let kval = kv[((oc * c + ic) * k + u) * k + v];
                            for i in i0..i1 {
                                let xs = (i + u - padding) * w + j0 + v - padding;
                                let xrow = &xp[xs..xs + (j1 - j0)];
                                for (y, xv) in plane[i * ow + j0..i * ow + j1].iter_mut().zip(xrow)
                                {
                                    *y += kval * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernels) || self.rg(bias);
        Ok(self.push(
            vec![b, o, oh, ow],
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                padding,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, op, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu { x, slope }, |v| {
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(x, Op::OneMinus(x), |v| 1.0 - v)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale { x, c }, |v| c * v)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    /// Nearest-neighbour 2x upsampling of a B×C×H×W tensor.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::Dimension(format!("upsample2 on {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x);
        let mut out = vec![0.0; b * c * 4 * h * w];
        for p in 0..b * c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(p * 2 * h + i) * 2 * w + j] = xv[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![b, c, 2 * h, 2 * w], out, Op::Upsample2(x), rg))
    }

    /// 2x2 average pooling with stride 2; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Dimension(format!("avg_pool2 on {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = p * h * w;
                    let s = xv[base + 2 * i * w + 2 * j]
                        + xv[base + 2 * i * w + 2 * j + 1]
                        + xv[base + (2 * i + 1) * w + 2 * j]
                        + xv[base + (2 * i + 1) * w + 2 * j + 1];
                    out[(p * oh + i) * ow + j] = 0.25 * s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![b, c, oh, ow], out, Op::AvgPool2(x), rg))
    }

    /// Scales channel `c` (dim 1) of `x` by `1 + m[c]`.
    pub fn channel_scale(&mut self, x: Var, m: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m);
        if xs.len() < 2 || ms.len() != 1 || ms[0] != xs[1] {
            return Err(Error::Dimension(format!(
                "channel_scale: x {xs:?}, m {ms:?}"
            )));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let mv = self.value(m);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (1.0 + mv[(i / inner) % c]))
            .collect();
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(xs, value, Op::ChannelScale { x, m }, rg))
    }

    /// Side of every recorded kink (leaky-ReLU at 0, clamp bounds) each input
    /// element falls on. Two evaluations with equal signatures lie on the same
    /// smooth piece, which is what a finite-difference check needs.
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            match n.op {
                Op::LeakyRelu { x, .. } => {
                    sig.extend(self.value(x).iter().map(|&v| (v > 0.0) as i8))
                }
                Op::Clamp { x, lo, hi } => sig.extend(self.value(x).iter().map(|&v| {
                    if v < lo {
                        -1
                    } else if v > hi {
                        1
                    } else {
                        0
                    }
                })),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar loss. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: Vec<f64>) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => grads[v.0] = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &nodes[input.0];
                    let w = &nodes[weight.0];
                    let (b, i) = (x.shape[0], x.shape[1]);
                    let o = w.shape[0];
                    if x.requires_grad {
                        let mut dx = vec![0.0; b * i];
                        for r in 0..b {
                            for c in 0..o {
                                let g = dy[r * o + c];
                                let wr = &w.value[c * i..(c + 1) * i];
                                for (d, wv) in dx[r * i..(r + 1) * i].iter_mut().zip(wr) {
                                    *d += g * wv;
                                }
                            }
                        }
                        add_into(&mut grads, &nodes, input, dx);
                    }
                    if w.requires_grad {
                        let mut dw = vec![0.0; o * i];
                        for r in 0..b {
                            let xr = &x.value[r * i..(r + 1) * i];
                            for c in 0..o {
                                let g = dy[r * o + c];
                                for (d, xv) in dw[c * i..(c + 1) * i].iter_mut().zip(xr) {
                                    *d += g * xv;
                                }
                            }
                        }
                        add_into(&mut grads, &nodes, weight, dw);
                    }
                    if nodes[bias.0].requires_grad {
                        let mut db = vec![0.0; o];
                        for r in 0..b {
                            for c in 0..o {
                                db[c] += dy[r * o + c];
                            }
                        }
                        add_into(&mut grads, &nodes, bias, db);
                    }
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    padding,
                } => {
                    let x = &nodes[input.0];
                    let kn = &nodes[kernels.0];
                    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                    let (o, k) = (kn.shape[0], kn.shape[2]);
                    let (oh, ow) = (node.shape[2], node.shape[3]);
                    let mut dx = vec![0.0; if x.requires_grad { x.value.len() } else { 0 }];
                    let mut dk = vec![0.0; if kn.requires_grad { kn.value.len() } else { 0 }];
                    let mut db = vec![0.0; o];
                    for n in 0..b {
                        for oc in 0..o {
                            let dyp = &dy[(n * o + oc) * oh * ow..(n * o + oc + 1) * oh * ow];
                            db[oc] += dyp.iter().sum::<f64>();
                            for ic in 0..c {
                                let xoff = (n * c + ic) * h * w;
                                for u in 0..k {
                                    let (i0, i1) = tap_range(oh, h, u, padding);
                                    for v in 0..k {
                                        let (j0, j1) = tap_range(ow, w, v, padding);
                                        let ki = ((oc * c + ic) * k + u) * k + v;
                                        let mut dkv = 0.0;
                                        for i in i0..i1 {
                                            let xs =
                                                xoff + (i + u - padding) * w + j0 + v - padding;
                                            let g = &dyp[i * ow + j0..i * ow + j1];
                                            if !dk.is_empty() {
                                                dkv += g
                                                    .iter()
                                                    .zip(&x.value[xs..])
                                                    .map(|(a, b)| a * b)
                                                    .sum::<f64>();
                                            }
                                            if !dx.is_empty() {
                                                let kval = kn.value[ki];
                                                for (d, gv) in
                                                    dx[xs..xs + g.len()].iter_mut().zip(g)
                                                {
                                                    *d += gv * kval;
                                                }
                                            }
                                        }
                                        if !dk.is_empty() {
                                            dk[ki] += dkv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if !dx.is_empty() {
                        add_into(&mut grads, &nodes, input, dx);
                    }
                    if !dk.is_empty() {
                        add_into(&mut grads, &nodes, kernels, dk);
                    }
                    add_into(&mut grads, &nodes, bias, db);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = &nodes[x.0].value;
                    let dx = dy
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                        .collect();
                    add_into(&mut grads, &nodes, x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = dy
                        .iter()
                        .zip(&node.value)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    add_into(&mut grads, &nodes, x, dx);
                }
                Op::Tanh(x) => {
                    let dx = dy
                        .iter()
                        .zip(&node.value)
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    add_into(&mut grads, &nodes, x, dx);
                }
                Op::Ln(x) => {
                    let dx = dy
                        .iter()
                        .zip(&nodes[x.0].value)
                        .map(|(g, v)| g / v)
                        .collect();
                    add_into(&mut grads, &nodes, x, dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let dx = dy
                        .iter()
                        .zip(&nodes[x.0].value)
                        .map(|(g, &v)| if v >= lo && v <= hi { *g } else { 0.0 })
                        .collect();
                    add_into(&mut grads, &nodes, x, dx);
                }
                Op::OneMinus(x) | Op::Neg(x) => {
                    let dx = dy.iter().map(|g| -g).collect();
                    add_into(&mut grads, &nodes, x, dx);
                }
                Op::Scale { x, c } => {
                    let dx = dy.iter().map(|g| c * g).collect();
                    add_into(&mut grads, &nodes, x, dx);
                }
                Op::Square(x) => {
                    let dx = dy
                        .iter()
                        .zip(&nodes[x.0].value)
                        .map(|(g, v)| 2.0 * v * g)
                        .collect();
                    add_into(&mut grads, &nodes, x, dx);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, &nodes, a, dy.clone());
                    add_into(&mut grads, &nodes, b, dy);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, &nodes, a, dy.clone());
                    add_into(&mut grads, &nodes, b, dy.iter().map(|g| -g).collect());
                }
                Op::Mul(a, b) => {
                    let da = dy
                        .iter()
                        .zip(&nodes[b.0].value)
                        .map(|(g, v)| g * v)
                        .collect();
                    let db = dy
                        .iter()
                        .zip(&nodes[a.0].value)
                        .map(|(g, v)| g * v)
                        .collect();
                    add_into(&mut grads, &nodes, a, da);
                    add_into(&mut grads, &nodes, b, db);
                }
                Op::Sum(x) => {
                    let n = nodes[x.0].value.len();
                    add_into(&mut grads, &nodes, x, vec![dy[0]; n]);
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.len();
                    add_into(&mut grads, &nodes, x, vec![dy[0] / n as f64; n]);
                }
                Op::Reshape(x) => add_into(&mut grads, &nodes, x, dy),
                Op::Upsample2(x) => {
                    let s = &nodes[x.0].shape;
                    let (h, w) = (s[2], s[3]);
                    let mut dx = vec![0.0; nodes[x.0].value.len()];
                    for p in 0..s[0] * s[1] {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dx[(p * h + i / 2) * w + j / 2] += dy[(p * 2 * h + i) * 2 * w + j];
                            }
                        }
                    }
                    add_into(&mut grads, &nodes, x, dx);
                }
                Op::AvgPool2(x) => {
                    let s = &nodes[x.0].shape;
                    let (h, w) = (s[2], s[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = vec![0.0; nodes[x.0].value.len()];
                    for p in 0..s[0] * s[1] {
                        for i in 0..h {
                            for j in 0..w {
                                dx[(p * h + i) * w + j] = 0.25 * dy[(p * oh + i / 2) * ow + j / 2];
                            }
                        }
                    }
                    add_into(&mut grads, &nodes, x, dx);
                }
                Op::ChannelScale { x, m } => {
                    let xs = &nodes[x.0].shape;
                    let c = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let mv = &nodes[m.0].value;
                    let xv = &nodes[x.0].value;
                    if nodes[x.0].requires_grad {
                        let dx = dy
                            .iter()
                            .enumerate()
                            .map(|(i, g)| g * (1.0 + mv[(i / inner) % c]))
                            .collect();
                        add_into(&mut grads, &nodes, x, dx);
                    }
                    if nodes[m.0].requires_grad {
                        let mut dm = vec![0.0; c];
                        for (i, (g, v)) in dy.iter().zip(xv).enumerate() {
                            dm[(i / inner) % c] += g * v;
                        }
                        add_into(&mut grads, &nodes, m, dm);
                    }
                }
            }
            // intermediate grads are dropped once propagated; leaves keep theirs
        }
        for (i, n) in nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes_and_non_finite() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn dense_examples() {
        let mut g = Graph::new();
        let x = g.constant(&t(vec![1, 2], vec![1.0, 2.0]));
        let w = g.constant(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(&t(vec![2], vec![0.0, 0.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);

        let x = g.constant(&t(vec![1, 2], vec![0.0, 0.0]));
        let w = g.constant(&t(vec![2, 2], vec![5.0, -1.0, 7.0, 2.0]));
        let b = g.constant(&t(vec![2], vec![3.0, 4.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0]);

        let x = g.constant(&t(vec![1, 2], vec![1.0, 1.0]));
        let w = g.constant(&t(vec![1, 2], vec![2.0, 3.0]));
        let b = g.constant(&t(vec![1], vec![1.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y), &[6.0]);
    }

    #[test]
    fn dense_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(&t(vec![1, 3], vec![1.0; 3]));
        let w = g.constant(&t(vec![2, 2], vec![1.0; 4]));
        let b = g.constant(&t(vec![2], vec![0.0; 2]));
        assert!(matches!(g.dense(x, w, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(&t(vec![1, 1, 3, 3], vec![1.0; 9]));
        let k = g.constant(&t(vec![1, 1, 1, 1], vec![1.0]));
        let b = g.constant(&t(vec![1], vec![0.0]));
        let y = g.conv2d(x, k, b, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.value(y), &[1.0; 9]);

        let k = g.constant(&Tensor::zeros(vec![2, 1, 3, 3]));
        let b = g.constant(&t(vec![2], vec![0.5, -2.0]));
        let y = g.conv2d(x, k, b, 1).unwrap();
        assert_eq!(&g.value(y)[..9], &[0.5; 9]);
        assert_eq!(&g.value(y)[9..], &[-2.0; 9]);

        let x = g.constant(&t(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()));
        let k = g.constant(&t(vec![1, 1, 3, 3], vec![1.0 / 9.0; 9]));
        let b = g.constant(&t(vec![1], vec![0.0]));
        let y = g.conv2d(x, k, b, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert!((g.value(y)[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn conv_kernel_too_large() {
        let mut g = Graph::new();
        let x = g.constant(&t(vec![1, 1, 2, 2], vec![1.0; 4]));
        let k = g.constant(&Tensor::zeros(vec![1, 1, 5, 5]));
        let b = g.constant(&Tensor::zeros(vec![1]));
        assert!(matches!(g.conv2d(x, k, b, 0), Err(Error::Dimension(_))));
        // even kernels are rejected too
        let k = g.constant(&Tensor::zeros(vec![1, 1, 2, 2]));
        assert!(g.conv2d(x, k, b, 0).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::scalar(0.0));
        let a = g.leaky_relu(z, 0.2);
        assert_eq!(g.value(a), &[0.0]);
        let s = g.sigmoid(z);
        assert_eq!(g.value(s), &[0.5]);
        let p = g.constant(&Tensor::scalar(0.7));
        let n = g.constant(&Tensor::scalar(-0.7));
        let tp = g.tanh(p);
        let tn = g.tanh(n);
        assert_eq!(g.value(tn)[0], -g.value(tp)[0]);
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let w = t(vec![3], vec![0.3, -1.0, 2.0]).into_param();
        let mut g = Graph::new();
        let wv = g.leaf(&w);
        let s = g.sum(wv);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(wv).unwrap(), &[1.0, 1.0, 1.0]);

        let w = t(vec![2], vec![1.0, -2.0]).into_param();
        let mut g = Graph::new();
        let wv = g.leaf(&w);
        let sq = g.square(wv);
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(wv).unwrap(), &[1.0, -2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(&t(vec![2], vec![1.0, 2.0]).into_param());
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_leaf_accumulates() {
        // y = sum(w * w) through two uses of the same var
        let mut g = Graph::new();
        let w = g.leaf(&t(vec![2], vec![3.0, -1.0]).into_param());
        let p = g.mul(w, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(&t(vec![2], vec![1.0, 2.0]));
        let w = g.leaf(&t(vec![2], vec![1.0, 1.0]).into_param());
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0]);
    }
}
