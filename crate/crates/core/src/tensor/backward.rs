use super::kernels;
use super::tape::{ChannelKind, GradMode, Node, Op, Tape, Var};
use super::ChannelLayout;
use crate::error::{Error, Result};
use crate::par;

impl Tape {
    /// Reverse pass from a scalar `loss`, clearing earlier gradients first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with(loss, GradMode::Reset)
    }

    /// Reverse pass from a scalar `loss`. Every node that requires a gradient
    /// and lies upstream of `loss` ends up holding `d loss / d node`.
    pub fn backward_with(&mut self, loss: Var, mode: GradMode) -> Result<()> {
        let len = self.nodes[loss.0].value.len();
        if len != 1 {
            return Err(Error::domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            propagate(&self.nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        if mode == GradMode::Reset {
            for n in self.nodes.iter_mut() {
                n.grad = None;
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            match node.grad.as_mut() {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

/// Adds `f`'s contribution into the gradient slot of `v`, if `v` needs one.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |s| add_into(s, g));
            accumulate(nodes, grads, *b, |s| add_into(s, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |s| add_into(s, g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * vb[i];
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * va[i];
                }
            });
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / vb[i];
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for i in 0..s.len() {
                    s[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                }
            });
        }
        Op::Scale(a, k) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y));
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.len() as f64;
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|x| *x += g[0] / n));
        }
        Op::Relu(a) => {
            let va = val(*a);
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    if va[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |s| add_into(s, g)),
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |s| {
                let mut tmp = vec![0.0; m * k];
                kernels::matmul_bt(g, vb, &mut tmp, m, n, k);
                add_into(s, &tmp);
            });
            accumulate(nodes, grads, *b, |s| {
                let mut tmp = vec![0.0; k * n];
                kernels::matmul_at(va, g, &mut tmp, m, k, n);
                add_into(s, &tmp);
            });
        }
        Op::Conv2d { input, weight, geom } => {
            let batch = nodes[input.0].shape[0];
            let o = nodes[weight.0].shape[0];
            let (q, l) = (geom.patch_len(), geom.out_len());
            let (x, w) = (val(*input), val(*weight));
            let work = batch * o * q * l;
            if nodes[input.0].requires_grad {
                let mut dx = vec![0.0; batch * geom.in_len()];
                par::for_each_chunk_sized(&mut dx, geom.in_len(), work, |s, dx_s| {
                    let mut dcols = vec![0.0; q * l];
                    // dcols[q,l] = sum_o w[o,q] * g[o,l]
                    let gs = &g[s * o * l..(s + 1) * o * l];
                    for oi in 0..o {
                        let wrow = &w[oi * q..(oi + 1) * q];
                        let grow = &gs[oi * l..(oi + 1) * l];
                        for (qi, &wv) in wrow.iter().enumerate() {
                            if wv == 0.0 {
                                continue;
                            }
                            let d = &mut dcols[qi * l..(qi + 1) * l];
                            for (dv, gv) in d.iter_mut().zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                    }
                    geom.col2im(&dcols, dx_s);
                });
                accumulate(nodes, grads, *input, |s| add_into(s, &dx));
            }
            if nodes[weight.0].requires_grad {
                // Per-sample partials, reduced in sample order.
                let mut partial = vec![0.0; batch * o * q];
                par::for_each_chunk_sized(&mut partial, o * q, work, |s, dw_s| {
                    let mut cols = vec![0.0; q * l];
                    geom.im2col(&x[s * geom.in_len()..(s + 1) * geom.in_len()], &mut cols);
                    let gs = &g[s * o * l..(s + 1) * o * l];
                    for oi in 0..o {
                        let grow = &gs[oi * l..(oi + 1) * l];
                        for qi in 0..q {
                            let crow = &cols[qi * l..(qi + 1) * l];
                            dw_s[oi * q + qi] = grow.iter().zip(crow).map(|(a, b)| a * b).sum();
                        }
                    }
                });
                accumulate(nodes, grads, *weight, |s| {
                    for chunk in partial.chunks(o * q) {
                        add_into(s, chunk);
                    }
                });
            }
        }
        Op::SpatialMean(a) => {
            let lay = ChannelLayout::of(&nodes[a.0].shape).expect("checked in forward");
            let sp = lay.spatial as f64;
            accumulate(nodes, grads, *a, |s| {
                for (i, x) in s.iter_mut().enumerate() {
                    *x += g[i / lay.spatial] / sp;
                }
            });
        }
        Op::Channel { x, c, kind } => {
            let lay = ChannelLayout::of(&nodes[x.0].shape).expect("checked in forward");
            let (vx, vc) = (val(*x), val(*c));
            accumulate(nodes, grads, *x, |s| match kind {
                ChannelKind::Add | ChannelKind::Sub => add_into(s, g),
                ChannelKind::Mul => {
                    for (i, v) in s.iter_mut().enumerate() {
                        *v += g[i] * vc[lay.channel_of(i)];
                    }
                }
            });
            accumulate(nodes, grads, *c, |s| {
                for (i, gv) in g.iter().enumerate() {
                    let ch = lay.channel_of(i);
                    match kind {
                        ChannelKind::Add => s[ch] += gv,
                        ChannelKind::Sub => s[ch] -= gv,
                        ChannelKind::Mul => s[ch] += gv * vx[i],
                    }
                }
            });
        }
        Op::ChannelMean(x) => {
            let lay = ChannelLayout::of(&nodes[x.0].shape).expect("checked in forward");
            let m = lay.count() as f64;
            accumulate(nodes, grads, *x, |s| {
                for (i, v) in s.iter_mut().enumerate() {
                    *v += g[lay.channel_of(i)] / m;
                }
            });
        }
        Op::ChannelStd { x, mean } => {
            let lay = ChannelLayout::of(&nodes[x.0].shape).expect("checked in forward");
            let m = lay.count() as f64;
            let (vx, std) = (val(*x), node.value.as_slice());
            accumulate(nodes, grads, *x, |s| {
                for (i, v) in s.iter_mut().enumerate() {
                    let c = lay.channel_of(i);
                    *v += g[c] * (vx[i] - mean[c]) / (m * std[c]);
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let lay = ChannelLayout::of(&nodes[x.0].shape).expect("checked in forward");
            let m = lay.count() as f64;
            let gam = val(*gamma);
            let mut sum_g = vec![0.0; lay.channels];
            let mut sum_gx = vec![0.0; lay.channels];
            for (i, gv) in g.iter().enumerate() {
                let c = lay.channel_of(i);
                sum_g[c] += gv;
                sum_gx[c] += gv * xhat[i];
            }
            accumulate(nodes, grads, *x, |s| {
                for (i, v) in s.iter_mut().enumerate() {
                    let c = lay.channel_of(i);
                    *v += gam[c] * inv_std[c] / m * (m * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                }
            });
            accumulate(nodes, grads, *gamma, |s| add_into(s, &sum_gx));
            accumulate(nodes, grads, *beta, |s| add_into(s, &sum_g));
        }
        Op::SoftmaxXent { logits, labels, probs } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = g[0] / n as f64;
            accumulate(nodes, grads, *logits, |s| {
                for i in 0..n {
                    for j in 0..k {
                        let t = if j == labels[i] { 1.0 } else { 0.0 };
                        s[i * k + j] += scale * (probs[i * k + j] - t);
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
