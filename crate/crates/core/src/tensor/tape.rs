use super::kernels::{self, ConvGeometry};
use super::{ChannelLayout, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Tape::backward_with`] treats gradients left by an earlier pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    /// Clear every stored gradient, then fill.
    #[default]
    Reset,
    /// Add into gradients from previous passes (for sums of several losses).
    Accumulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ChannelKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    SpatialMean(Var),
    Reshape(Var),
    Channel {
        x: Var,
        c: Var,
        kind: ChannelKind,
    },
    ChannelMean(Var),
    ChannelStd {
        x: Var,
        mean: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

/// Per-channel batch moments observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Population variance.
    pub var: Vec<f64>,
    /// Elements reduced per channel.
    pub count: usize,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is always a valid evaluation order.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records a leaf that receives a gradient.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Copies a node out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Gradient of `v` as a tensor; zeros if nothing flowed into it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        let g = n.grad.clone().unwrap_or_else(|| vec![0.0; n.value.len()]);
        Tensor::new(n.shape.clone(), g).expect("tape nodes are well-formed")
    }

    /// Copies the gradient of `v` into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor, mode: GradMode) {
        let g = self.grad_tensor(v).into_values();
        match (mode, t.grad.as_mut()) {
            (GradMode::Accumulate, Some(existing)) => {
                existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b)
            }
            _ => t.grad = Some(g),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(op, a, b)?;
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), rg))
    }

    /// Elementwise division; a zero or non-finite denominator is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if let Some(i) = self.value(b).iter().position(|d| *d == 0.0 || !d.is_finite()) {
            return Err(Error::domain(format!("division by zero or non-finite denominator at {i}")));
        }
        let v = self.zip_with("div", a, b, |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let s = vals.iter().sum::<f64>() / vals.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Mean(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), v, Op::Relu(a), rg)
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), rg))
    }

    /// Collapses all axes after the first into one.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = s.first().copied().unwrap_or(1);
        let rest = self.value(a).len() / n;
        self.reshape(a, &[n, rest])
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// 2-D convolution of `[N,C,H,W]` with weights `[O,C,KH,KW]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(Error::Shape {
                op: "conv2d",
                left: si,
                right: sw,
            });
        }
        let geom = ConvGeometry::new(si[1], si[2], si[3], sw[2], sw[3], stride, pad).ok_or_else(|| {
            Error::Shape {
                op: "conv2d",
                left: si.clone(),
                right: sw.clone(),
            }
        })?;
        let (n, o) = (si[0], sw[0]);
        let (q, l) = (geom.patch_len(), geom.out_len());
        let x = self.value(input);
        let w = self.value(weight);
        let mut out = vec![0.0; n * o * l];
        par::for_each_chunk_sized(&mut out, o * l, n * o * q * l, |s, out_s| {
            let mut cols = vec![0.0; q * l];
            geom.im2col(&x[s * geom.in_len()..(s + 1) * geom.in_len()], &mut cols);
            kernels::matmul_seq(w, &cols, out_s, o, q, l);
        });
        let rg = self.rg(&[input, weight]);
        Ok(self.push(
            vec![n, o, geom.out_h, geom.out_w],
            out,
            Op::Conv2d { input, weight, geom },
            rg,
        ))
    }

    /// Mean over spatial axes: `[N,C,...] -> [N,C]`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let lay = ChannelLayout::of(self.shape(a))?;
        let vals = self.value(a);
        let out: Vec<f64> = vals
            .chunks(lay.spatial)
            .map(|c| c.iter().sum::<f64>() / lay.spatial as f64)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![lay.batch, lay.channels], out, Op::SpatialMean(a), rg))
    }

    fn channel_op(&mut self, x: Var, c: Var, kind: ChannelKind, name: &'static str) -> Result<Var> {
        let lay = ChannelLayout::of(self.shape(x))?;
        if self.shape(c) != [lay.channels] {
            return Err(Error::Shape {
                op: name,
                left: self.shape(x).to_vec(),
                right: self.shape(c).to_vec(),
            });
        }
        let cv = self.value(c);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let k = cv[lay.channel_of(i)];
                match kind {
                    ChannelKind::Add => v + k,
                    ChannelKind::Sub => v - k,
                    ChannelKind::Mul => v * k,
                }
            })
            .collect();
        let rg = self.rg(&[x, c]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Channel { x, c, kind }, rg))
    }

    /// Adds a per-channel vector `[C]` broadcast along axis 1.
    pub fn add_channel(&mut self, x: Var, c: Var) -> Result<Var> {
        self.channel_op(x, c, ChannelKind::Add, "add_channel")
    }

    pub fn sub_channel(&mut self, x: Var, c: Var) -> Result<Var> {
        self.channel_op(x, c, ChannelKind::Sub, "sub_channel")
    }

    pub fn mul_channel(&mut self, x: Var, c: Var) -> Result<Var> {
        self.channel_op(x, c, ChannelKind::Mul, "mul_channel")
    }

    fn channel_means(lay: &ChannelLayout, vals: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; lay.channels];
        for (i, v) in vals.iter().enumerate() {
            sums[lay.channel_of(i)] += v;
        }
        let m = lay.count() as f64;
        sums.iter().map(|s| s / m).collect()
    }

    fn channel_vars(lay: &ChannelLayout, vals: &[f64], mean: &[f64]) -> Vec<f64> {
        let mut sq = vec![0.0; lay.channels];
        for (i, v) in vals.iter().enumerate() {
            let c = lay.channel_of(i);
            let d = v - mean[c];
            sq[c] += d * d;
        }
        let m = lay.count() as f64;
        sq.iter().map(|s| s / m).collect()
    }

    fn reduction_layout(&self, x: Var, what: &str) -> Result<ChannelLayout> {
        let lay = ChannelLayout::of(self.shape(x))?;
        if lay.count() < 2 {
            return Err(Error::domain(format!(
                "{what} needs at least 2 elements per channel, got {}",
                lay.count()
            )));
        }
        Ok(lay)
    }

    /// Per-channel mean over batch and spatial axes: `[N,C,...] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let lay = self.reduction_layout(x, "channel mean")?;
        let out = Self::channel_means(&lay, self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(vec![lay.channels], out, Op::ChannelMean(x), rg))
    }

    /// Per-channel `sqrt(population variance + eps)`.
    pub fn channel_std(&mut self, x: Var, eps: f64) -> Result<Var> {
        let lay = self.reduction_layout(x, "channel std")?;
        let mean = Self::channel_means(&lay, self.value(x));
        let var = Self::channel_vars(&lay, self.value(x), &mean);
        let out = var.iter().map(|v| (v + eps).sqrt()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![lay.channels], out, Op::ChannelStd { x, mean }, rg))
    }

    /// Training-mode batch normalization with batch statistics.
    ///
    /// Returns the normalized output and the observed batch moments so the
    /// caller can maintain running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchMoments)> {
        let lay = ChannelLayout::of(self.shape(x))?;
        if lay.count() < 2 {
            return Err(Error::domain(format!(
                "batch norm needs at least 2 elements per channel, got {}",
                lay.count()
            )));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [lay.channels] {
                return Err(Error::Shape {
                    op: "batch_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let vals = self.value(x);
        let mean = Self::channel_means(&lay, vals);
        let var = Self::channel_vars(&lay, vals, &mean);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(vals.len());
        let mut out = Vec::with_capacity(vals.len());
        for (i, v) in vals.iter().enumerate() {
            let c = lay.channel_of(i);
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            out.push(g[c] * h + b[c]);
        }
        let moments = BatchMoments {
            mean,
            var,
            count: lay.count(),
        };
        let rg = self.rg(&[x, gamma, beta]);
        let y = self.push(
            self.shape(x).to_vec(),
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((y, moments))
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against class ids.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape {
                op: "softmax_xent",
                left: s,
                right: vec![labels.len()],
            });
        }
        let (n, k) = (s[0], s[1]);
        if n == 0 {
            return Err(Error::domain("cross-entropy over an empty batch"));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::domain(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / sum;
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![total / n as f64],
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Cross-entropy against one-hot rows; each row must contain a single 1.
    pub fn softmax_xent_onehot(&mut self, logits: Var, onehot: &Tensor) -> Result<Var> {
        let labels = onehot_to_labels(onehot)?;
        self.softmax_xent(logits, &labels)
    }
}

/// Decodes one-hot rows into class ids.
pub fn onehot_to_labels(onehot: &Tensor) -> Result<Vec<usize>> {
    let s = onehot.shape();
    if s.len() != 2 {
        return Err(Error::domain(format!("one-hot labels must be 2-D, got {s:?}")));
    }
    onehot
        .values()
        .chunks(s[1])
        .enumerate()
        .map(|(row, r)| {
            let ones: Vec<usize> = r
                .iter()
                .enumerate()
                .filter(|(_, v)| **v == 1.0)
                .map(|(j, _)| j)
                .collect();
            let zeros = r.iter().filter(|v| **v == 0.0).count();
            if ones.len() == 1 && zeros == r.len() - 1 {
                Ok(ones[0])
            } else {
                Err(Error::domain(format!("row {row} is not one-hot")))
            }
        })
        .collect()
}
