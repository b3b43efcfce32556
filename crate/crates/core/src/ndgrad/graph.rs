//! Tape-based reverse-mode differentiation.
//!
//! Every forward call appends a node holding its output value and whatever
//! the backward pass needs. Nodes are appended in execution order, so the
//! tape is already topologically sorted and `backward` walks it in reverse.

use super::kernels::{self, Window};
use super::params::{ParamId, ParamStore};
use super::scalar::Float;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction applied by [`Graph::softmax_cross_entropy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over non-ignored positions.
    Mean,
    Sum,
}

/// Normalization statistics mode.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Normalize with the current batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, for running-average updates.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        win: Window,
    },
    Deconv2d {
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    AvgPool {
        input: Var,
        win: Window,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    ResizeNearest(Var),
    ResizeBilinear(Var),
    Reshape(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    StopGradient,
    SoftmaxCe {
        logits: Var,
        axis: usize,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<T>,
        scale: T,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation for one forward/backward step.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(ParamId, Var)>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Input that gradients are not tracked for.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Gradient-enabled leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a store entry; trainable entries are gradient-enabled.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        if trainable {
            self.bindings.push((id, v));
        }
        v
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (o, wc, kh, kw) = self.value(weight).dims4()?;
        if wc != c {
            return Err(shape_err("conv2d", self.shape(input), self.shape(weight)));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(shape_err("conv2d", self.shape(input), self.shape(weight)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(shape_err("conv2d bias", self.shape(b), &[o]));
            }
        }
        let win = Window {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
        };
        let (oh, ow) = (win.out_h(), win.out_w());
        let mut out = Tensor::zeros([n, o, oh, ow]);
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let bias_data = bias.map(|b| self.value(b).data());
            let mut scratch = Vec::new();
            let (isz, osz) = (c * h * w, o * oh * ow);
            let od = out.data_mut();
            for i in 0..n {
                kernels::conv_forward(
                    &x[i * isz..(i + 1) * isz],
                    wt,
                    bias_data,
                    &win,
                    o,
                    &mut scratch,
                    &mut od[i * osz..(i + 1) * osz],
                );
            }
        }
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                win,
            },
            needs,
        ))
    }

    /// Transposed convolution whose output extent is exactly `stride ×` the
    /// input extent. The kernel is `[C_in, C_out / groups, k, k]` with
    /// `k - stride` even and non-negative; the overhang is cropped symmetrically.
    pub fn deconv2d(&mut self, input: Var, weight: Var, stride: usize, groups: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("deconv2d", "stride must be >= 1"));
        }
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (wc, cout_g, kh, kw) = self.value(weight).dims4()?;
        if groups == 0 || wc != cin || cin % groups != 0 || kh != kw {
            return Err(shape_err("deconv2d", self.shape(input), self.shape(weight)));
        }
        if kh < stride || !(kh - stride).is_multiple_of(2) {
            return Err(Error::invalid(
                "deconv2d",
                format!("kernel {kh} incompatible with stride {stride} (needs k - stride even and >= 0)"),
            ));
        }
        let pad = (kh - stride) / 2;
        let (oh, ow) = (
            kernels::deconv_extent(h, kh, stride, pad),
            kernels::deconv_extent(w, kw, stride, pad),
        );
        let cin_g = cin / groups;
        let cout = cout_g * groups;
        let win = Window {
            channels: cout_g,
            height: oh,
            width: ow,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
        };
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let rows = cout_g * kh * kw;
            let mut col = vec![T::zero(); rows * h * w];
            let od = out.data_mut();
            for i in 0..n {
                for g in 0..groups {
                    let xg = &x[(i * cin + g * cin_g) * h * w..(i * cin + (g + 1) * cin_g) * h * w];
                    let wg = &wt[g * cin_g * rows..(g + 1) * cin_g * rows];
                    kernels_matmul_t(rows, cin_g, h * w, wg, xg, &mut col);
                    let dst = &mut od[(i * cout + g * cout_g) * oh * ow..(i * cout + (g + 1) * cout_g) * oh * ow];
                    kernels::col2im(&col, &win, dst);
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight);
        Ok(self.push(
            out,
            Op::Deconv2d {
                input,
                weight,
                stride,
                pad,
                groups,
            },
            needs,
        ))
    }

    pub fn avgpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("avgpool2d", "kernel and stride must be >= 1"));
        }
        if kernel > h || kernel > w {
            return Err(Error::invalid(
                "avgpool2d",
                format!("kernel {kernel} larger than input {h}x{w}"),
            ));
        }
        let win = Window {
            channels: c,
            height: h,
            width: w,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad: 0,
        };
        let (oh, ow) = (win.out_h(), win.out_w());
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let x = self.value(input).data();
        for i in 0..n {
            kernels::avgpool_forward(
                &x[i * c * h * w..(i + 1) * c * h * w],
                &win,
                &mut out.data_mut()[i * c * oh * ow..(i + 1) * c * oh * ow],
            );
        }
        let needs = self.needs(input);
        Ok(self.push(out, Op::AvgPool { input, win }, needs))
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if kernel == 0 || stride == 0 || pad >= kernel {
            return Err(Error::invalid("maxpool2d", "need kernel, stride >= 1 and pad < kernel"));
        }
        if kernel > h + 2 * pad || kernel > w + 2 * pad {
            return Err(Error::invalid(
                "maxpool2d",
                format!("kernel {kernel} larger than padded input {h}x{w}"),
            ));
        }
        let win = Window {
            channels: c,
            height: h,
            width: w,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad,
        };
        let (oh, ow) = (win.out_h(), win.out_w());
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let x = self.value(input).data();
        for i in 0..n {
            let osz = c * oh * ow;
            kernels::maxpool_forward(
                &x[i * c * h * w..(i + 1) * c * h * w],
                &win,
                &mut out.data_mut()[i * osz..(i + 1) * osz],
                &mut argmax[i * osz..(i + 1) * osz],
            );
            argmax[i * osz..(i + 1) * osz]
                .iter_mut()
                .for_each(|a| *a += i * c * h * w);
        }
        let needs = self.needs(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(out, Op::Sum(x), needs)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Per-channel normalization of an `N×C×H×W` tensor followed by an affine map.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", self.shape(input), self.shape(gamma)));
        }
        let eps = T::from_f64_lossy(eps);
        let hw = h * w;
        let m = n * hw;
        let x = self.value(input).data();
        let (mean, var_biased, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for i in 0..n {
                        acc += x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    mean[ch] = acc / T::from_usize(m).unwrap();
                    let mut sq = T::zero();
                    for i in 0..n {
                        for &v in &x[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            sq += (v - mean[ch]) * (v - mean[ch]);
                        }
                    }
                    var[ch] = sq / T::from_usize(m).unwrap();
                }
                let unbiased = if m > 1 {
                    let f = T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap();
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm stats", &[c], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    xhat[k] = (x[k] - mean[ch]) * inv_std[ch];
                    out[k] = xhat[k] * g[ch] + b[ch];
                }
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: stats.is_some(),
            },
            needs,
        );
        Ok((v, stats))
    }

    /// Nearest-neighbour resampling, `src = floor(dst · in / out)`.
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize_nearest", "zero output extent"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for p in 0..n * c {
            for oy in 0..out_h {
                let iy = kernels::nearest_index(oy, h, out_h);
                for ox in 0..out_w {
                    out.push(src[(p * h + iy) * w + kernels::nearest_index(ox, w, out_w)]);
                }
            }
        }
        let out = Tensor::new([n, c, out_h, out_w], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::ResizeNearest(x), needs))
    }

    /// Bilinear resampling with half-pixel centres (corners not aligned).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize_bilinear", "zero output extent"));
        }
        let src = self.value(x).data();
        let ys: Vec<_> = (0..out_h).map(|o| kernels::linear_taps(o, h, out_h)).collect();
        let xs: Vec<_> = (0..out_w).map(|o| kernels::linear_taps(o, w, out_w)).collect();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for &(y0, y1, wy) in &ys {
                let wy = T::from_f64_lossy(wy);
                for &(x0, x1, wx) in &xs {
                    let wx = T::from_f64_lossy(wx);
                    let top = plane[y0 * w + x0] * (T::one() - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (T::one() - wx) + plane[y1 * w + x1] * wx;
                    out.push(top * (T::one() - wy) + bot * wy);
                }
            }
        }
        let out = Tensor::new([n, c, out_h, out_w], out)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::ResizeBilinear(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Slice { input: x, axis, start }, needs))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let data = kernels::permute(self.value(x).data(), &shape, perm);
        let out = Tensor::new(perm.iter().map(|&p| shape[p]).collect::<Vec<_>>(), data)?;
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::Permute {
                input: x,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// Identity forward; nothing flows back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Negative log-softmax of the target class along `axis`, reduced over
    /// positions whose target is not `ignore`. `targets` has one entry per
    /// position, i.e. the logits shape with `axis` removed, row-major.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: usize,
        axis: usize,
        reduction: Reduction,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax_cross_entropy", format!("axis {axis} for {shape:?}")));
        }
        let classes = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        if targets.len() != outer * inner {
            return Err(shape_err("softmax_cross_entropy targets", &shape, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * classes + k) * inner + i;
                let t = targets[o * inner + i];
                let max = (0..classes).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..classes {
                    let e = (x[at(k)] - max).exp();
                    probs[at(k)] = e;
                    z += e;
                }
                for k in 0..classes {
                    probs[at(k)] /= z;
                }
                if t != ignore {
                    total += z.ln() + max - x[at(t)];
                    count += 1;
                }
            }
        }
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean if count > 0 => T::from_usize(count).unwrap().recip(),
            Reduction::Mean => T::zero(),
        };
        let out = Tensor::scalar(total * scale);
        let needs = self.needs(logits);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                axis,
                targets: targets.to_vec(),
                ignore,
                probs,
                scale,
            },
            needs,
        ))
    }

    /// `Σ 0.5·e²` for `|e| < 1`, else `|e| − 0.5`, with `e = pred − target`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err("smooth_l1", self.shape(pred), self.shape(target)));
        }
        let half = T::from_f64_lossy(0.5);
        let total = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| {
                let e = (p - t).abs();
                if e < T::one() {
                    half * e * e
                } else {
                    e - half
                }
            })
            .sum();
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(total), Op::SmoothL1 { pred, target }, needs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Returns the gradient slot for `v`, creating zeros if needed.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut Tensor<T> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                win,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, c, h, w) = x.dims4()?;
                let o = wt.shape()[0];
                let (oh, ow) = (win.out_h(), win.out_w());
                let (isz, osz) = (c * h * w, o * oh * ow);
                let mut gx = self.needs(*input).then(|| Tensor::zeros(x.shape().to_vec()));
                let mut gw = self.needs(*weight).then(|| Tensor::zeros(wt.shape().to_vec()));
                let mut scratch = Vec::new();
                for i in 0..n {
                    kernels::conv_backward(
                        &x.data()[i * isz..(i + 1) * isz],
                        wt.data(),
                        &gy.data()[i * osz..(i + 1) * osz],
                        win,
                        o,
                        &mut scratch,
                        gx.as_mut().map(|g| &mut g.data_mut()[i * isz..(i + 1) * isz]),
                        gw.as_mut().map(|g| g.data_mut()),
                    );
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    let mut gb = Tensor::zeros([o]);
                    for i in 0..n {
                        for oc in 0..o {
                            let s: T = gy.data()[i * osz + oc * oh * ow..i * osz + (oc + 1) * oh * ow]
                                .iter()
                                .copied()
                                .sum();
                            gb.data_mut()[oc] += s;
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
                if let Some(g) = gx {
                    self.accumulate(grads, *input, g);
                }
                if let Some(g) = gw {
                    self.accumulate(grads, *weight, g);
                }
            }
            Op::Deconv2d {
                input,
                weight,
                stride,
                pad,
                groups,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, cin, h, w) = x.dims4()?;
                let (_, cout_g, k, _) = wt.dims4()?;
                let (_, cout, oh, ow) = gy.dims4()?;
                let cin_g = cin / groups;
                let rows = cout_g * k * k;
                let win = Window {
                    channels: cout_g,
                    height: oh,
                    width: ow,
                    kernel_h: k,
                    kernel_w: k,
                    stride: *stride,
                    pad: *pad,
                };
                let mut gx = self.needs(*input).then(|| Tensor::zeros(x.shape().to_vec()));
                let mut gw = self.needs(*weight).then(|| Tensor::zeros(wt.shape().to_vec()));
                let mut col = vec![T::zero(); rows * h * w];
                for i in 0..n {
                    for g in 0..*groups {
                        let gyg = &gy.data()[(i * cout + g * cout_g) * oh * ow..(i * cout + (g + 1) * cout_g) * oh * ow];
                        kernels::im2col(gyg, &win, &mut col);
                        let wg = &wt.data()[g * cin_g * rows..(g + 1) * cin_g * rows];
                        let xr = (i * cin + g * cin_g) * h * w..(i * cin + (g + 1) * cin_g) * h * w;
                        if let Some(gx) = gx.as_mut() {
                            super::scalar::matmul(cin_g, rows, h * w, wg, false, &col, false, &mut gx.data_mut()[xr.clone()], true);
                        }
                        if let Some(gw) = gw.as_mut() {
                            let dst = &mut gw.data_mut()[g * cin_g * rows..(g + 1) * cin_g * rows];
                            super::scalar::matmul(cin_g, h * w, rows, &x.data()[xr], false, &col, true, dst, true);
                        }
                    }
                }
                if let Some(g) = gx {
                    self.accumulate(grads, *input, g);
                }
                if let Some(g) = gw {
                    self.accumulate(grads, *weight, g);
                }
            }
            Op::AvgPool { input, win } => {
                let shape = self.shape(*input).to_vec();
                let n = shape[0];
                let (isz, osz) = (win.channels * win.height * win.width, win.channels * win.out_h() * win.out_w());
                let gx = self.slot(grads, *input);
                for i in 0..n {
                    kernels::avgpool_backward(
                        &gy.data()[i * osz..(i + 1) * osz],
                        win,
                        &mut gx.data_mut()[i * isz..(i + 1) * isz],
                    );
                }
            }
            Op::MaxPool { input, argmax } => {
                let gx = self.slot(grads, *input);
                let d = gx.data_mut();
                for (&a, &g) in argmax.iter().zip(gy.data()) {
                    d[a] += g;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let g = Tensor::new(
                    xv.shape().to_vec(),
                    xv.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                )?;
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let g = Tensor::new(
                        av.shape().to_vec(),
                        gy.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect(),
                    )?;
                    self.accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    let g = Tensor::new(
                        bv.shape().to_vec(),
                        gy.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect(),
                    )?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.accumulate(grads, *x, gy.map(|g| g * f));
            }
            Op::Sum(x) => {
                let g = gy.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), g));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&gy.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(self.shape(v).to_vec(), data)?);
                    }
                    offset += len;
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let hw = h * w;
                let m = T::from_usize(n * hw).unwrap();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for k in base..base + hw {
                            sum_g[ch] += gy.data()[k];
                            sum_gx[ch] += gy.data()[k] * xhat[k];
                        }
                    }
                }
                if self.needs(*input) {
                    let mut gx = vec![T::zero(); n * c * hw];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let k0 = gam[ch] * inv_std[ch];
                            for k in base..base + hw {
                                gx[k] = if *train {
                                    k0 * (gy.data()[k] - (sum_g[ch] + xhat[k] * sum_gx[ch]) / m)
                                } else {
                                    k0 * gy.data()[k]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new([n, c, h, w], gx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new([c], sum_gx)?);
                self.accumulate(grads, *beta, Tensor::new([c], sum_g)?);
            }
            Op::ResizeNearest(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = gy.dims4()?;
                let gx = self.slot(grads, *x);
                let d = gx.data_mut();
                for p in 0..n * c {
                    for oy in 0..oh {
                        let iy = kernels::nearest_index(oy, h, oh);
                        for ox in 0..ow {
                            d[(p * h + iy) * w + kernels::nearest_index(ox, w, ow)] += gy.data()[(p * oh + oy) * ow + ox];
                        }
                    }
                }
            }
            Op::ResizeBilinear(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = gy.dims4()?;
                let ys: Vec<_> = (0..oh).map(|o| kernels::linear_taps(o, h, oh)).collect();
                let xs: Vec<_> = (0..ow).map(|o| kernels::linear_taps(o, w, ow)).collect();
                let gx = self.slot(grads, *x);
                let d = gx.data_mut();
                for p in 0..n * c {
                    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                        let wy = T::from_f64_lossy(wy);
                        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                            let wx = T::from_f64_lossy(wx);
                            let g = gy.data()[(p * oh + oy) * ow + ox];
                            let base = p * h * w;
                            d[base + y0 * w + x0] += g * (T::one() - wy) * (T::one() - wx);
                            d[base + y0 * w + x1] += g * (T::one() - wy) * wx;
                            d[base + y1 * w + x0] += g * wy * (T::one() - wx);
                            d[base + y1 * w + x1] += g * wy * wx;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let g = gy.clone().reshape(self.shape(*x).to_vec())?;
                self.accumulate(grads, *x, g);
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input).to_vec();
                let len = gy.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let gx = self.slot(grads, *input);
                let d = gx.data_mut();
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    for (k, &g) in gy.data()[o * len * inner..(o + 1) * len * inner].iter().enumerate() {
                        d[base + k] += g;
                    }
                }
            }
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let data = kernels::permute(gy.data(), gy.shape(), &inverse);
                self.accumulate(grads, *input, Tensor::new(self.shape(*input).to_vec(), data)?);
            }
            Op::SoftmaxCe {
                logits,
                axis,
                targets,
                ignore,
                probs,
                scale,
            } => {
                let shape = self.shape(*logits);
                let classes = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let s = gy.item() * *scale;
                let mut g = vec![T::zero(); probs.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let t = targets[o * inner + i];
                        if t == *ignore {
                            continue;
                        }
                        for k in 0..classes {
                            let at = (o * classes + k) * inner + i;
                            let onehot = if k == t { T::one() } else { T::zero() };
                            g[at] = (probs[at] - onehot) * s;
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(shape.to_vec(), g)?);
            }
            Op::SmoothL1 { pred, target } => {
                let g0 = gy.item();
                let d: Vec<T> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(self.value(*target).data())
                    .map(|(&p, &t)| {
                        let e = p - t;
                        let de = if e.abs() < T::one() { e } else { e.signum() };
                        de * g0
                    })
                    .collect();
                let shape = self.shape(*pred).to_vec();
                if self.needs(*target) {
                    self.accumulate(grads, *target, Tensor::new(shape.clone(), d.iter().map(|&v| -v).collect())?);
                }
                self.accumulate(grads, *pred, Tensor::new(shape, d)?);
            }
        }
        Ok(())
    }

    /// Gradient for every gradient-enabled leaf; leaves the loss does not
    /// depend on get exact zeros.
    pub fn grad(&self, grads: &Gradients<T>, v: Var) -> Tensor<T> {
        grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    /// Gradients of all store parameters bound on this graph, summed over
    /// repeated bindings, in binding order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for &(id, v) in &self.bindings {
            let g = self.grad(grads, v);
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, acc)) => acc.add_assign(&g),
                None => out.push((id, g)),
            }
        }
        out
    }
}

/// `col = wᵀ · x` for deconvolution, with `w` stored `cin×rows` and `x` `cin×hw`.
fn kernels_matmul_t<T: Float>(rows: usize, cin: usize, hw: usize, w: &[T], x: &[T], col: &mut [T]) {
    super::scalar::matmul(rows, cin, hw, w, true, x, false, col, false);
}
