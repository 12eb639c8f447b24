//! Define-by-run tape with eager forward evaluation and a pruned reverse
//! sweep: `backward(loss, wrt)` only propagates gradients through nodes
//! that lie between the requested leaves and the loss, so a cheap second
//! backward (e.g. for the entropy-model parameters alone) does not redo
//! convolution backprops.

use super::kernels::{self, ConvGeom};
use super::{conv_out_dim, Scalar, Tensor};
use crate::codec::pwl;
use crate::{Error, Result};

/// Probability floor for the latent entropy model; keeps every in-support
/// symbol codable and the log-likelihood finite.
pub const PROB_FLOOR: f64 = 1.0 / 32768.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    /// Transposed convolution; `geom` describes the *equivalent forward
    /// convolution* mapping the deconv output back to its input.
    Deconv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Per-channel affine with constant parameters (eval-mode batch norm).
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        active: Option<Vec<usize>>,
        probs: Tensor<T>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    /// Mean over leading dim of summed negative log interval masses.
    EntropyNll {
        psi: Var,
        z: Var,
        clamped: Vec<bool>,
        increments: Vec<T>,
        totals: Vec<T>,
    },
    Scale {
        x: Var,
        c: T,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`; zeros if the
    /// node was unreachable.
    pub fn grad(&self, v: Var) -> Vec<T> {
        match &self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![T::ZERO; self.nodes[v.0].value.numel()],
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Config(format!(
                "conv2d shape mismatch: input {xs:?}, weight {ws:?}"
            )));
        }
        if self.value(b).numel() != ws[0] {
            return Err(Error::Config("conv2d bias/weight mismatch".into()));
        }
        let oh = conv_out_dim(xs[2], ws[2], stride, pad);
        let ow = conv_out_dim(xs[3], ws[3], stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Config(format!(
                "conv2d kernel {} exceeds padded input {:?}",
                ws[2], &xs[2..]
            )));
        };
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k: ws[2],
            stride,
            pad,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            Some(&self.nodes[b.0].value),
            &geom,
        );
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution. `target_hw` selects between the two output
    /// sizes reachable from a strided conv and must satisfy
    /// conv_out(target) == input spatial size.
    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        target_hw: (usize, usize),
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(Error::Config(format!(
                "deconv2d shape mismatch: input {xs:?}, weight {ws:?}"
            )));
        }
        let cd_out = ws[1];
        if self.value(b).numel() != cd_out {
            return Err(Error::Config("deconv2d bias/weight mismatch".into()));
        }
        let k = ws[2];
        let ok = conv_out_dim(target_hw.0, k, stride, pad) == Some(xs[2])
            && conv_out_dim(target_hw.1, k, stride, pad) == Some(xs[3]);
        if !ok {
            return Err(Error::Config(format!(
                "deconv2d target {target_hw:?} unreachable from input {:?} (k={k}, s={stride}, p={pad})",
                &xs[2..]
            )));
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: cd_out,
            h: target_hw.0,
            w: target_hw.1,
            cout: xs[1],
            k,
            stride,
            pad,
            oh: xs[2],
            ow: xs[3],
        };
        let mut out = kernels::conv2d_backward_input(&self.nodes[x.0].value, &self.nodes[w.0].value, &geom);
        let spatial = target_hw.0 * target_hw.1;
        let bias = self.nodes[b.0].value.data();
        for sample in out.data_mut().chunks_mut(cd_out * spatial) {
            for (c, row) in sample.chunks_mut(spatial).enumerate() {
                let bv = bias[c];
                for v in row {
                    *v += bv;
                }
            }
        }
        Ok(self.push(out, Op::Deconv2d { x, w, b, geom }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).numel() != ws[0] {
            return Err(Error::Config(format!(
                "linear shape mismatch: input {xs:?}, weight {ws:?}"
            )));
        }
        let out = kernels::linear_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0]
            .value
            .map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push(out, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Config(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.nodes[a.0].value.clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += *v;
        }
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Training-mode batch norm. Returns the output var plus the batch
    /// statistics (mean, biased variance) for running-buffer updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xs = self.value(x).shape().to_vec();
        let c = xs[1];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Config("batch_norm parameter size mismatch".into()));
        }
        let (y, mean, inv_std) = kernels::batchnorm_forward(
            &self.nodes[x.0].value,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            eps,
        );
        let batch_mean = mean.clone();
        let batch_var: Vec<T> = inv_std
            .iter()
            .map(|&is| {
                let isf = is.to_f64();
                T::from_f64(1.0 / (isf * isf) - eps)
            })
            .collect();
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        );
        Ok((v, batch_mean, batch_var))
    }

    /// Eval-mode normalization folded to a constant per-channel affine.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<T>, shift: Vec<T>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let c = xs[1];
        if scale.len() != c || shift.len() != c {
            return Err(Error::Config("channel_affine size mismatch".into()));
        }
        let spatial: usize = xs[2..].iter().product();
        let mut out = self.nodes[x.0].value.clone();
        for sample in out.data_mut().chunks_mut(c * spatial) {
            for (ci, row) in sample.chunks_mut(spatial).enumerate() {
                for v in row {
                    *v = *v * scale[ci] + shift[ci];
                }
            }
        }
        Ok(self.push(out, Op::ChannelAffine { x, scale }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Config("global_avg_pool expects NCHW".into()));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial = xs[2] * xs[3];
        let inv = T::from_f64(1.0 / spatial as f64);
        let mut out = Tensor::zeros(&[n, c]);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let mut acc = 0.0f64;
                for v in &self.nodes[x.0].value.data()[base..base + spatial] {
                    acc += v.to_f64();
                }
                out.data_mut()[ni * c + ci] = T::from_f64(acc) * inv;
            }
        }
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Config("softmax expects [N, C]".into()));
        }
        let c = xs[1];
        let mut out = self.nodes[x.0].value.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_row(row);
        }
        Ok(self.push(out, Op::Softmax { x }))
    }

    /// Mean cross-entropy of `labels` (global class ids) under a softmax
    /// over either all columns or the `active` subset of columns.
    pub fn softmax_xent(
        &mut self,
        logits: Var,
        labels: &[usize],
        active: Option<&[usize]>,
    ) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::Config(format!(
                "cross_entropy shape mismatch: logits {ls:?}, {} labels",
                labels.len()
            )));
        }
        let c = ls[1];
        let cols: Vec<usize> = match active {
            Some(a) => a.to_vec(),
            None => (0..c).collect(),
        };
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Input(format!(
                "active class {bad} out of range for {c} logits"
            )));
        }
        let mut label_pos = Vec::with_capacity(labels.len());
        for &lab in labels {
            match cols.iter().position(|&j| j == lab) {
                Some(p) => label_pos.push(p),
                None => {
                    return Err(Error::Input(format!(
                        "label {lab} not among {} active classes",
                        cols.len()
                    )))
                }
            }
        }
        let n = ls[0];
        let a = cols.len();
        let mut probs = Tensor::zeros(&[n, a]);
        let mut loss = 0.0f64;
        for (row, (prow, &lp)) in self
            .nodes[logits.0]
            .value
            .data()
            .chunks(c)
            .zip(probs.data_mut().chunks_mut(a).zip(&label_pos))
        {
            for (p, &j) in prow.iter_mut().zip(&cols) {
                *p = row[j];
            }
            softmax_row(prow);
            loss -= prow[lp].to_f64().max(1e-300).ln();
        }
        loss /= n as f64;
        let out = Tensor::scalar(T::from_f64(loss));
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                labels: label_pos,
                active: active.map(|_| cols),
                probs,
            },
        ))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Config(format!(
                "mse shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut acc = 0.0f64;
        for (x, y) in self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
        {
            let d = x.to_f64() - y.to_f64();
            acc += d * d;
        }
        acc /= self.nodes[a.0].value.numel() as f64;
        let out = Tensor::scalar(T::from_f64(acc));
        Ok(self.push(out, Op::Mse { a, b }))
    }

    /// Entropy loss of continuous latents `z` under per-channel
    /// piecewise-linear CDFs parameterized by raw `psi` of shape [C, 2R]:
    /// sum over elements of -ln p(z_i), averaged over the leading (batch)
    /// dimension. Latents are clamped into [-R, R-1]; clamped elements and
    /// floored probabilities carry zero gradient.
    pub fn entropy_nll(&mut self, psi: Var, z: Var) -> Result<Var> {
        let ps = self.value(psi).shape().to_vec();
        let zs = self.value(z).shape().to_vec();
        if ps.len() != 2 || zs.len() < 2 || ps[0] != zs[1] {
            return Err(Error::Config(format!(
                "entropy_nll: psi {ps:?} does not match latent channels {zs:?}"
            )));
        }
        let channels = ps[0];
        let bins = ps[1];
        let r = bins as f64 / 2.0;
        let batch = zs[0];
        let spatial: usize = zs[2..].iter().product();
        let mut increments = Vec::with_capacity(channels * bins);
        let mut totals = Vec::with_capacity(channels);
        for row in self.nodes[psi.0].value.data().chunks(bins) {
            let g = pwl::increments(row);
            let mut tot = T::ZERO;
            for &v in &g {
                tot += v;
            }
            increments.extend_from_slice(&g);
            totals.push(tot);
        }
        let zdata = self.nodes[z.0].value.data();
        let mut clamped = vec![false; zdata.len()];
        let floor = T::from_f64(PROB_FLOOR);
        let mut loss = 0.0f64;
        for ni in 0..batch {
            for ci in 0..channels {
                let g = &increments[ci * bins..(ci + 1) * bins];
                let total = totals[ci];
                let base = (ni * channels + ci) * spatial;
                for e in 0..spatial {
                    let idx = base + e;
                    let zv = zdata[idx];
                    let lo = T::from_f64(-r);
                    let hi = T::from_f64(r - 1.0);
                    let zc = if zv < lo {
                        clamped[idx] = true;
                        lo
                    } else if zv > hi {
                        clamped[idx] = true;
                        hi
                    } else {
                        zv
                    };
                    let (num, _, _) = pwl::unit_interval_numerator(g, zc);
                    let p = (num / total).maximum(floor);
                    loss -= p.to_f64().ln();
                }
            }
        }
        loss /= batch as f64;
        let out = Tensor::scalar(T::from_f64(loss));
        Ok(self.push(
            out,
            Op::EntropyNll {
                psi,
                z,
                clamped,
                increments,
                totals,
            },
        ))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.nodes[x.0].value.map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Reverse sweep from scalar `loss`, producing gradients for `wrt` (and
    /// any intermediate on a path from them to the loss).
    pub fn backward(&mut self, loss: Var, wrt: &[Var]) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Config("backward target must be scalar".into()));
        }
        let len = self.nodes.len();
        // descendants of wrt
        let mut needed = vec![false; len];
        for v in wrt {
            needed[v.0] = true;
        }
        for i in 0..len {
            if !needed[i] {
                let mut any = false;
                self.for_each_input(i, |j| any |= needed[j]);
                needed[i] = any;
            }
        }
        // ancestors of loss
        let mut reach = vec![false; len];
        reach[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if reach[i] {
                self.for_each_input(i, |j| reach[j] = true);
            }
        }
        let active: Vec<bool> = needed
            .iter()
            .zip(&reach)
            .map(|(&n, &r)| n && r)
            .collect();

        let mut grads: Vec<Option<Vec<T>>> = vec![None; len];
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &active, &mut grads);
            if active[i] {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn for_each_input(&self, i: usize, mut f: impl FnMut(usize)) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, .. } | Op::Deconv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                f(x.0);
                f(w.0);
                f(b.0);
            }
            Op::Relu { x }
            | Op::ChannelAffine { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Softmax { x }
            | Op::Scale { x, .. } => f(x.0),
            Op::Add { a, b } | Op::Mse { a, b } => {
                f(a.0);
                f(b.0);
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                f(x.0);
                f(gamma.0);
                f(beta.0);
            }
            Op::SoftmaxXent { logits, .. } => f(logits.0),
            Op::EntropyNll { psi, z, .. } => {
                f(psi.0);
                f(z.0);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], active: &[bool], grads: &mut Vec<Option<Vec<T>>>) {
        let acc = |grads: &mut Vec<Option<Vec<T>>>, j: usize, numel: usize, add: &dyn Fn(&mut [T])| {
            let slot = grads[j].get_or_insert_with(|| vec![T::ZERO; numel]);
            add(slot);
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let gt = Tensor::from_vec(self.nodes[i].value.shape(), g.to_vec());
                if active[x.0] {
                    let gin = kernels::conv2d_backward_input(&gt, &self.nodes[w.0].value, geom);
                    acc(grads, x.0, gin.numel(), &|s| {
                        for (a, v) in s.iter_mut().zip(gin.data()) {
                            *a += *v;
                        }
                    });
                }
                if active[w.0] {
                    let gw = kernels::conv2d_backward_weights(&gt, &self.nodes[x.0].value, geom);
                    acc(grads, w.0, gw.numel(), &|s| {
                        for (a, v) in s.iter_mut().zip(gw.data()) {
                            *a += *v;
                        }
                    });
                }
                if active[b.0] {
                    let gb = kernels::channel_sums(&gt, geom.cout);
                    acc(grads, b.0, gb.len(), &|s| {
                        for (a, v) in s.iter_mut().zip(&gb) {
                            *a += *v;
                        }
                    });
                }
            }
            Op::Deconv2d { x, w, b, geom } => {
                let gt = Tensor::from_vec(self.nodes[i].value.shape(), g.to_vec());
                if active[x.0] {
                    let gin = kernels::conv2d_forward(&gt, &self.nodes[w.0].value, None, geom);
                    acc(grads, x.0, gin.numel(), &|s| {
                        for (a, v) in s.iter_mut().zip(gin.data()) {
                            *a += *v;
                        }
                    });
                }
                if active[w.0] {
                    let gw = kernels::conv2d_backward_weights(&self.nodes[x.0].value, &gt, geom);
                    acc(grads, w.0, gw.numel(), &|s| {
                        for (a, v) in s.iter_mut().zip(gw.data()) {
                            *a += *v;
                        }
                    });
                }
                if active[b.0] {
                    let gb = kernels::channel_sums(&gt, geom.cin);
                    acc(grads, b.0, gb.len(), &|s| {
                        for (a, v) in s.iter_mut().zip(&gb) {
                            *a += *v;
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let gt = Tensor::from_vec(self.nodes[i].value.shape(), g.to_vec());
                let (gx, gw, gb) =
                    kernels::linear_backward(&gt, &self.nodes[x.0].value, &self.nodes[w.0].value);
                if active[x.0] {
                    acc(grads, x.0, gx.numel(), &|s| {
                        for (a, v) in s.iter_mut().zip(gx.data()) {
                            *a += *v;
                        }
                    });
                }
                if active[w.0] {
                    acc(grads, w.0, gw.numel(), &|s| {
                        for (a, v) in s.iter_mut().zip(gw.data()) {
                            *a += *v;
                        }
                    });
                }
                if active[b.0] {
                    acc(grads, b.0, gb.len(), &|s| {
                        for (a, v) in s.iter_mut().zip(&gb) {
                            *a += *v;
                        }
                    });
                }
            }
            Op::Relu { x } => {
                if active[x.0] {
                    let xv = self.nodes[x.0].value.data();
                    acc(grads, x.0, xv.len(), &|s| {
                        for ((a, &gv), &v) in s.iter_mut().zip(g).zip(xv) {
                            if v > T::ZERO {
                                *a += gv;
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for &j in &[a.0, b.0] {
                    if active[j] {
                        acc(grads, j, g.len(), &|s| {
                            for (sv, &gv) in s.iter_mut().zip(g) {
                                *sv += gv;
                            }
                        });
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let gt = Tensor::from_vec(self.nodes[i].value.shape(), g.to_vec());
                let (gx, gg, gb) = kernels::batchnorm_backward(
                    &self.nodes[x.0].value,
                    self.nodes[gamma.0].value.data(),
                    mean,
                    inv_std,
                    &gt,
                );
                if active[x.0] {
                    acc(grads, x.0, gx.numel(), &|s| {
                        for (a, v) in s.iter_mut().zip(gx.data()) {
                            *a += *v;
                        }
                    });
                }
                if active[gamma.0] {
                    acc(grads, gamma.0, gg.len(), &|s| {
                        for (a, v) in s.iter_mut().zip(&gg) {
                            *a += *v;
                        }
                    });
                }
                if active[beta.0] {
                    acc(grads, beta.0, gb.len(), &|s| {
                        for (a, v) in s.iter_mut().zip(&gb) {
                            *a += *v;
                        }
                    });
                }
            }
            Op::ChannelAffine { x, scale } => {
                if active[x.0] {
                    let shape = self.nodes[i].value.shape();
                    let c = shape[1];
                    let spatial: usize = shape[2..].iter().product();
                    acc(grads, x.0, g.len(), &|s| {
                        for (sample_s, sample_g) in
                            s.chunks_mut(c * spatial).zip(g.chunks(c * spatial))
                        {
                            for ci in 0..c {
                                let sc = scale[ci];
                                for (a, &gv) in sample_s[ci * spatial..(ci + 1) * spatial]
                                    .iter_mut()
                                    .zip(&sample_g[ci * spatial..(ci + 1) * spatial])
                                {
                                    *a += gv * sc;
                                }
                            }
                        }
                    });
                }
            }
            Op::GlobalAvgPool { x } => {
                if active[x.0] {
                    let xs = self.nodes[x.0].value.shape();
                    let spatial = xs[2] * xs[3];
                    let inv = T::from_f64(1.0 / spatial as f64);
                    acc(grads, x.0, self.nodes[x.0].value.numel(), &|s| {
                        for (nc, &gv) in g.iter().enumerate() {
                            for v in &mut s[nc * spatial..(nc + 1) * spatial] {
                                *v += gv * inv;
                            }
                        }
                    });
                }
            }
            Op::Softmax { x } => {
                if active[x.0] {
                    let p = self.nodes[i].value.data();
                    let c = self.nodes[i].value.shape()[1];
                    acc(grads, x.0, p.len(), &|s| {
                        for ((srow, prow), grow) in
                            s.chunks_mut(c).zip(p.chunks(c)).zip(g.chunks(c))
                        {
                            let mut dot = T::ZERO;
                            for (&pv, &gv) in prow.iter().zip(grow) {
                                dot += pv * gv;
                            }
                            for ((sv, &pv), &gv) in srow.iter_mut().zip(prow).zip(grow) {
                                *sv += pv * (gv - dot);
                            }
                        }
                    });
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                active: cols,
                probs,
            } => {
                if active[logits.0] {
                    let c = self.nodes[logits.0].value.shape()[1];
                    let n = labels.len();
                    let a = probs.shape()[1];
                    let gs = g[0] / T::from_f64(n as f64);
                    acc(grads, logits.0, n * c, &|s| {
                        for (row, (prow, &lp)) in s
                            .chunks_mut(c)
                            .zip(probs.data().chunks(a).zip(labels))
                        {
                            for (jj, &pv) in prow.iter().enumerate() {
                                let col = match cols {
                                    Some(cs) => cs[jj],
                                    None => jj,
                                };
                                let ind = if jj == lp { T::ONE } else { T::ZERO };
                                row[col] += (pv - ind) * gs;
                            }
                        }
                    });
                }
            }
            Op::Mse { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let coeff = g[0] * T::from_f64(2.0 / av.len() as f64);
                if active[a.0] {
                    acc(grads, a.0, av.len(), &|s| {
                        for ((sv, &x), &y) in s.iter_mut().zip(av).zip(bv) {
                            *sv += coeff * (x - y);
                        }
                    });
                }
                if active[b.0] {
                    acc(grads, b.0, bv.len(), &|s| {
                        for ((sv, &x), &y) in s.iter_mut().zip(av).zip(bv) {
                            *sv -= coeff * (x - y);
                        }
                    });
                }
            }
            Op::EntropyNll {
                psi,
                z,
                clamped,
                increments,
                totals,
            } => {
                self.backprop_entropy_nll(
                    i, *psi, *z, clamped, increments, totals, g, active, grads, &acc,
                );
            }
            Op::Scale { x, c } => {
                if active[x.0] {
                    acc(grads, x.0, g.len(), &|s| {
                        for (sv, &gv) in s.iter_mut().zip(g) {
                            *sv += gv * *c;
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_entropy_nll(
        &self,
        _i: usize,
        psi: Var,
        z: Var,
        clamped: &[bool],
        increments: &[T],
        totals: &[T],
        g: &[T],
        active: &[bool],
        grads: &mut Vec<Option<Vec<T>>>,
        acc: &dyn Fn(&mut Vec<Option<Vec<T>>>, usize, usize, &dyn Fn(&mut [T])),
    ) {
        let zshape = self.nodes[z.0].value.shape();
        let batch = zshape[0];
        let channels = zshape[1];
        let spatial: usize = zshape[2..].iter().product();
        let bins = self.nodes[psi.0].value.shape()[1];
        let r = bins as f64 / 2.0;
        let zdata = self.nodes[z.0].value.data();
        let floor = T::from_f64(PROB_FLOOR);
        let gs = g[0] / T::from_f64(batch as f64);
        let want_psi = active[psi.0];
        let want_z = active[z.0];

        let mut gpsi = vec![T::ZERO; channels * bins];
        let mut gz = vec![T::ZERO; zdata.len()];
        for ni in 0..batch {
            for ci in 0..channels {
                let gch = &increments[ci * bins..(ci + 1) * bins];
                let total = totals[ci];
                let base = (ni * channels + ci) * spatial;
                for e in 0..spatial {
                    let idx = base + e;
                    let zc = {
                        let v = zdata[idx].to_f64();
                        v.clamp(-r, r - 1.0)
                    };
                    let (num, ja, jb) = pwl::unit_interval_numerator(gch, T::from_f64(zc));
                    let p = num / total;
                    if p <= floor {
                        continue; // floored: zero gradient
                    }
                    if want_psi {
                        // d(-ln p)/dg_l = 1/G - overlap_l / N
                        let a_pos = zc + r;
                        for l in ja..=jb {
                            let lo = a_pos.max(l as f64);
                            let hi = (a_pos + 1.0).min(l as f64 + 1.0);
                            if hi > lo {
                                gpsi[ci * bins + l] -= T::from_f64(hi - lo) / num * gs;
                            }
                        }
                        let inv_total = T::ONE / total;
                        for v in gpsi[ci * bins..(ci + 1) * bins].iter_mut() {
                            *v += inv_total * gs;
                        }
                    }
                    if want_z && !clamped[idx] {
                        // d(-ln p)/dz = -(g_right - g_left) / N
                        gz[idx] -= (gch[jb] - gch[ja]) / num * gs;
                    }
                }
            }
        }
        if want_psi {
            // chain through softplus
            let praw = self.nodes[psi.0].value.data();
            for (gp, &pr) in gpsi.iter_mut().zip(praw) {
                *gp *= pwl::sigmoid(pr);
            }
            acc(grads, psi.0, gpsi.len(), &|s| {
                for (a, v) in s.iter_mut().zip(&gpsi) {
                    *a += *v;
                }
            });
        }
        if want_z {
            acc(grads, z.0, gz.len(), &|s| {
                for (a, v) in s.iter_mut().zip(&gz) {
                    *a += *v;
                }
            });
        }
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.maximum(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 100.0]));
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).data().chunks(4) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_hand_values() {
        // certain correct prediction -> loss 0
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3], vec![100.0, 0.0, 0.0]));
        let l = tape.softmax_xent(x, &[0], None).unwrap();
        assert!(tape.value(l).item() < 1e-9);

        // uniform over 4 classes -> ln 4
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 4], vec![0.5, 0.5, 0.5, 0.5]));
        let l = tape.softmax_xent(x, &[2], None).unwrap();
        assert!((tape.value(l).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]));
        assert!(tape.softmax_xent(x, &[3], None).is_err());
    }

    #[test]
    fn mse_identity_is_zero() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn masked_xent_only_touches_active_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]));
        let l = tape.softmax_xent(x, &[2], Some(&[2, 3])).unwrap();
        tape.backward(l, &[x]).unwrap();
        let g = tape.grad(x);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!(g[2] != 0.0 && g[3] != 0.0);
    }

    #[test]
    fn deconv_target_validation() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]));
        let w = tape.leaf(Tensor::zeros(&[2, 3, 5, 5]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        // 2h-1 and 2h are reachable, others are not
        assert!(tape.deconv2d(x, w, b, 2, 2, (3, 3)).is_ok());
        assert!(tape.deconv2d(x, w, b, 2, 2, (4, 4)).is_ok());
        assert!(tape.deconv2d(x, w, b, 2, 2, (5, 5)).is_err());
        // 1x1 -> 2x2 per the size contract
        let x1 = tape.leaf(Tensor::zeros(&[1, 2, 1, 1]));
        let d = tape.deconv2d(x1, w, b, 2, 2, (2, 2)).unwrap();
        assert_eq!(tape.value(d).shape(), &[1, 3, 2, 2]);
    }
}
