use crate::data::IGNORE;
use crate::error::{Error, Result};

use super::graph::{Graph, Op, Var};
use super::tensor::{Real, Tensor};

/// Unfolds one `[C, H, W]` image into `[C * 9, H * W]` columns for a 3x3,
/// stride 1, zero-padding 1 cross-correlation.
fn im2col<T: Real>(image: &[T], channels: usize, height: usize, width: usize, cols: &mut [T]) {
    let hw = height * width;
    for c in 0..channels {
        let plane = &image[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..height {
                    let out = &mut row[y * width..(y + 1) * width];
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= height as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * width..(iy as usize + 1) * width];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&src[..width - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..width - 1].copy_from_slice(&src[1..]);
                            out[width - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Real>(cols: &[T], channels: usize, height: usize, width: usize, image: &mut [T]) {
    let hw = height * width;
    for c in 0..channels {
        let plane = &mut image[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..height {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let src = &row[y * width..(y + 1) * width];
                    let dst = &mut plane[iy as usize * width..(iy as usize + 1) * width];
                    match kx {
                        0 => dst[..width - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d = *d + *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s),
                        _ => dst[1..].iter_mut().zip(&src[..width - 1]).for_each(|(d, s)| *d = *d + *s),
                    }
                }
            }
        }
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    /// 3x3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.shape().len() != 4 || w.shape().len() != 4 {
            return Err(Error::Shape(format!("conv2d expects rank-4 input and weight, got {:?} and {:?}", x.shape(), w.shape())));
        }
        let [n, cin, h, wd] = x.dims4();
        let [cout, wcin, kh, kw] = w.dims4();
        if wcin != cin || kh != 3 || kw != 3 {
            return Err(Error::Shape(format!("conv2d weight {:?} does not fit input {:?}", w.shape(), x.shape())));
        }
        if b.shape() != [cout] {
            return Err(Error::Shape(format!("conv2d bias {:?} for {cout} output channels", b.shape())));
        }
        let hw = h * wd;
        let k = cin * 9;
        let track = self.tracks(&[input, weight, bias]);
        let keep_cols = track && self.requires_grad(weight);
        let mut cols = vec![T::zero(); if keep_cols { n * k * hw } else { k * hw }];
        let mut out = vec![T::zero(); n * cout * hw];
        for i in 0..n {
            let col = if keep_cols { &mut cols[i * k * hw..(i + 1) * k * hw] } else { &mut cols[..] };
            im2col(&x.data()[i * cin * hw..(i + 1) * cin * hw], cin, h, wd, col);
            let dst = &mut out[i * cout * hw..(i + 1) * cout * hw];
            for (co, row) in dst.chunks_mut(hw).enumerate() {
                row.fill(b.data()[co]);
            }
            T::gemm(cout, k, hw, T::one(), w.data(), (k as isize, 1), col, (hw as isize, 1), T::one(), dst, (hw as isize, 1));
        }
        let value = Tensor::from_vec(&[n, cout, h, wd], out)?;
        debug_assert!(!(x.is_finite() && w.is_finite() && b.is_finite()) || value.is_finite());
        let op = if track {
            Op::Conv2d { input, weight, bias, cols: if keep_cols { cols } else { Vec::new() } }
        } else {
            Op::Leaf
        };
        Ok(self.push(value, track, op))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::from_vec(x.shape(), data).expect("same shape");
        let track = self.tracks(&[input]);
        self.push(value, track, if track { Op::Relu { input } } else { Op::Leaf })
    }

    /// Softmax over the channel axis of an `[N, C, H, W]` tensor.
    pub fn softmax_channel(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 4 || x.shape()[1] < 2 {
            return Err(Error::Shape(format!("softmax_channel expects [N, C >= 2, H, W], got {:?}", x.shape())));
        }
        let value = softmax_channel_values(x);
        debug_assert!(!x.is_finite() || value.is_finite());
        let track = self.tracks(&[input]);
        Ok(self.push(value, track, if track { Op::SoftmaxChannel { input } } else { Op::Leaf }))
    }

    /// Cross-entropy between `[N, C, H, W]` logits and per-pixel labels,
    /// averaged over non-ignored pixels.
    ///
    /// `weights` holds either one weight for the whole batch, giving
    /// `w * sum / valid`, or one weight per sample, giving
    /// `sum_n(w_n * sum_n) / valid`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], weights: &[T]) -> Result<Var> {
        let x = self.value(logits);
        if x.shape().len() != 4 {
            return Err(Error::Shape(format!("cross_entropy expects [N, C, H, W] logits, got {:?}", x.shape())));
        }
        let [n, c, h, w] = x.dims4();
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::Shape(format!("{} labels for logits {:?}", labels.len(), x.shape())));
        }
        if weights.len() != 1 && weights.len() != n {
            return Err(Error::Shape(format!("{} loss weights for a batch of {n}", weights.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE && l as usize >= c) {
            return Err(Error::Config(format!("label {bad} is out of range for {c} classes")));
        }
        let probs = softmax_channel_values(x);
        let mut per_sample = vec![T::zero(); n];
        let mut valid = 0usize;
        for i in 0..n {
            let mut acc = T::zero();
            for p in 0..hw {
                let label = labels[i * hw + p];
                if label == IGNORE {
                    continue;
                }
                valid += 1;
                // log-sum-exp with max subtraction, evaluated directly from logits
                let at = |ch: usize| x.data()[(i * c + ch) * hw + p];
                let m = (0..c).map(at).fold(T::neg_infinity(), T::max);
                let lse = (0..c).map(|ch| (at(ch) - m).exp()).sum::<T>().ln() + m;
                acc = acc + (lse - at(label as usize));
            }
            per_sample[i] = acc;
        }
        let loss = if valid == 0 {
            T::zero()
        } else if weights.len() == 1 {
            weights[0] * (per_sample.iter().copied().sum::<T>() / T::of(valid as f64))
        } else {
            per_sample.iter().zip(weights).map(|(&s, &w)| w * s).sum::<T>() / T::of(valid as f64)
        };
        debug_assert!(!x.is_finite() || loss.is_finite());
        let track = self.tracks(&[logits]);
        let op = if track {
            Op::CrossEntropy { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs: probs.into_data(), valid }
        } else {
            Op::Leaf
        };
        Ok(self.push(Tensor::scalar(loss), track, op))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        let track = self.tracks(&[a, b]);
        Ok(self.push(value, track, if track { Op::Mul { a, b } } else { Op::Leaf }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add")?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        let track = self.tracks(&[a, b]);
        Ok(self.push(value, track, if track { Op::Add { a, b } } else { Op::Leaf }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::from_vec(x.shape(), data).expect("same shape");
        let track = self.tracks(&[input]);
        self.push(value, track, if track { Op::Scale { input, factor } } else { Op::Leaf })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        let track = self.tracks(&[input]);
        self.push(Tensor::scalar(total), track, if track { Op::Sum { input } } else { Op::Leaf })
    }

    /// Gradient contributions of node `index` to its inputs given the
    /// upstream gradient of its output.
    pub(crate) fn backward_rule(&self, index: usize, upstream: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[index];
        let wants = |v: Var| self.requires_grad(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, cols } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let [n, cin, h, wd] = x.dims4();
                let cout = w.dims4()[0];
                let (hw, k) = (h * wd, cin * 9);
                if wants(*bias) {
                    let mut db = vec![T::zero(); cout];
                    for i in 0..n {
                        for (co, slot) in db.iter_mut().enumerate() {
                            let row = &upstream[(i * cout + co) * hw..][..hw];
                            *slot = *slot + row.iter().copied().sum::<T>();
                        }
                    }
                    out.push((*bias, db));
                }
                if wants(*weight) {
                    let mut dw = vec![T::zero(); cout * k];
                    for i in 0..n {
                        let g = &upstream[i * cout * hw..(i + 1) * cout * hw];
                        let col = &cols[i * k * hw..(i + 1) * k * hw];
                        T::gemm(cout, hw, k, T::one(), g, (hw as isize, 1), col, (1, hw as isize), T::one(), &mut dw, (k as isize, 1));
                    }
                    out.push((*weight, dw));
                }
                if wants(*input) {
                    let mut dx = vec![T::zero(); n * cin * hw];
                    let mut dcol = vec![T::zero(); k * hw];
                    for i in 0..n {
                        let g = &upstream[i * cout * hw..(i + 1) * cout * hw];
                        T::gemm(k, cout, hw, T::one(), w.data(), (1, k as isize), g, (hw as isize, 1), T::zero(), &mut dcol, (hw as isize, 1));
                        col2im(&dcol, cin, h, wd, &mut dx[i * cin * hw..(i + 1) * cin * hw]);
                    }
                    out.push((*input, dx));
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = x.iter().zip(upstream).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
                out.push((*input, dx));
            }
            Op::SoftmaxChannel { input } => {
                let y = &node.value;
                let [n, c, h, w] = y.dims4();
                let hw = h * w;
                let mut dx = vec![T::zero(); y.numel()];
                for i in 0..n {
                    for p in 0..hw {
                        let idx = |ch: usize| (i * c + ch) * hw + p;
                        let dot: T = (0..c).map(|ch| upstream[idx(ch)] * y.data()[idx(ch)]).sum();
                        for ch in 0..c {
                            dx[idx(ch)] = y.data()[idx(ch)] * (upstream[idx(ch)] - dot);
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::CrossEntropy { logits, labels, weights, probs, valid } => {
                let [n, c, h, w] = self.value(*logits).dims4();
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                if *valid > 0 {
                    for i in 0..n {
                        let wi = if weights.len() == 1 { weights[0] } else { weights[i] };
                        let scale = upstream[0] * wi / T::of(*valid as f64);
                        for p in 0..hw {
                            let label = labels[i * hw + p];
                            if label == IGNORE {
                                continue;
                            }
                            for ch in 0..c {
                                let idx = (i * c + ch) * hw + p;
                                let target = if ch == label as usize { T::one() } else { T::zero() };
                                dx[idx] = scale * (probs[idx] - target);
                            }
                        }
                    }
                }
                out.push((*logits, dx));
            }
            Op::Mul { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    out.push((*a, upstream.iter().zip(y).map(|(&g, &v)| g * v).collect()));
                }
                if wants(*b) {
                    out.push((*b, upstream.iter().zip(x).map(|(&g, &v)| g * v).collect()));
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    out.push((*a, upstream.to_vec()));
                }
                if wants(*b) {
                    out.push((*b, upstream.to_vec()));
                }
            }
            Op::Scale { input, factor } => {
                out.push((*input, upstream.iter().map(|&g| g * *factor).collect()));
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                out.push((*input, vec![upstream[0]; n]));
            }
        }
        out.retain(|(v, _)| self.requires_grad(*v));
        out
    }
}

/// Channel softmax of a rank-4 tensor, with max subtraction per pixel.
pub fn softmax_channel_values<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims4();
    let hw = h * w;
    let mut out = vec![T::zero(); x.numel()];
    let mut max = vec![T::zero(); hw];
    let mut denom = vec![T::zero(); hw];
    for i in 0..n {
        let base = i * c * hw;
        max.fill(T::neg_infinity());
        denom.fill(T::zero());
        for ch in 0..c {
            let row = &x.data()[base + ch * hw..][..hw];
            max.iter_mut().zip(row).for_each(|(m, &v)| *m = m.max(v));
        }
        for ch in 0..c {
            let row = &x.data()[base + ch * hw..][..hw];
            let dst = &mut out[base + ch * hw..][..hw];
            for p in 0..hw {
                let e = (row[p] - max[p]).exp();
                dst[p] = e;
                denom[p] = denom[p] + e;
            }
        }
        for ch in 0..c {
            let dst = &mut out[base + ch * hw..][..hw];
            dst.iter_mut().zip(&denom).for_each(|(v, &d)| *v = *v / d);
        }
    }
    Tensor::from_vec(x.shape(), out).expect("same shape")
}
