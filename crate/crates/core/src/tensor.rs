//! Four-dimensional `f64` tensors and a small reverse-mode autodiff tape.
//!
//! Tensors are NCHW and contiguous. A [`Graph`] records every operation in
//! execution order; [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar node with respect to every node that needs one.
//! Leaves added with [`Graph::constant`] never receive gradients, so frozen
//! parameters and data inputs cost nothing on the way back.

use std::borrow::Cow;

use matrixmultiply::dgemm;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match data");
        Tensor { shape, data }
    }

    /// Normal(0, std²) truncated at two standard deviations.
    pub fn truncated_normal<R: rand::Rng>(shape: [usize; 4], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform<R: rand::Rng>(shape: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per leading-index slice (C·H·W).
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + i) * w + j]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape changes size");
        self.shape = shape;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// c = op(a)·op(b) + beta·c for row-major matrices; op(a) is m×k, op(b) is k×n.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents asserted above and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    /// Padding as (top, bottom, left, right).
    pub pad: [usize; 4],
    pub dilation: usize,
    /// One filter per channel (`groups == channels`).
    pub depthwise: bool,
}

impl ConvSpec {
    pub fn pointwise() -> Self {
        ConvSpec {
            stride: 1,
            pad: [0; 4],
            dilation: 1,
            depthwise: false,
        }
    }

    /// Stride-1 convolution whose output has the input's spatial size. Even
    /// kernels put the extra padding row/column after the data.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let total = dilation * (kernel - 1);
        let before = total / 2;
        ConvSpec {
            stride: 1,
            pad: [before, total - before, before, total - before],
            dilation,
            depthwise: false,
        }
    }

    pub fn strided(stride: usize, pad: usize) -> Self {
        ConvSpec {
            stride,
            pad: [pad; 4],
            dilation: 1,
            depthwise: false,
        }
    }

    pub fn depthwise(mut self) -> Self {
        self.depthwise = true;
        self
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let eh = self.dilation * (kh - 1) + 1;
        let ew = self.dilation * (kw - 1) + 1;
        let ph = h + self.pad[0] + self.pad[1];
        let pw = w + self.pad[2] + self.pad[3];
        if ph < eh || pw < ew || self.stride == 0 {
            return None;
        }
        Some(((ph - eh) / self.stride + 1, (pw - ew) / self.stride + 1))
    }

    fn is_plain_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.pad == [0; 4]
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    /// Input coordinate for output index `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, size: usize) -> Option<usize> {
        let p = (o * self.spec.stride + k * self.spec.dilation) as isize - pad as isize;
        (p >= 0 && (p as usize) < size).then_some(p as usize)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.ho * self.wo;
        for ci in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oi in 0..self.ho {
                        let src_i = self.src(oi, ki, self.spec.pad[0], self.h);
                        for oj in 0..self.wo {
                            dst[oi * self.wo + oj] = match (src_i, self.src(oj, kj, self.spec.pad[2], self.w)) {
                                (Some(i), Some(j)) => x[(ci * self.h + i) * self.w + j],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.ho * self.wo;
        for ci in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oi in 0..self.ho {
                        let Some(i) = self.src(oi, ki, self.spec.pad[0], self.h) else {
                            continue;
                        };
                        for oj in 0..self.wo {
                            if let Some(j) = self.src(oj, kj, self.spec.pad[2], self.w) {
                                dx[(ci * self.h + i) * self.w + j] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear ×2 upsampling taps (half-pixel centres, edge clamped).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044715;
const GN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `a` is N×C×H×W, `b` is 1×C×H×W.
    AddBroadcast(Var, Var),
    /// `x` is N×C×H×W, `s` holds C values.
    ChannelScale(Var, Var),
    Upsample2(Var),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    WeightedSse { pred: Var, target: Vec<f64>, weight: Vec<f64> },
    Combine(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one scalar with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    /// A trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    /// An owned leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape;
        let [cout, wcin, kh, kw] = wv.shape;
        if spec.depthwise {
            assert!(wcin == 1 && cout == cin, "depthwise kernel {:?} for {cin} channels", wv.shape);
        } else {
            assert_eq!(wcin, cin, "kernel {:?} for {cin} input channels", wv.shape);
        }
        if let Some(b) = b {
            assert_eq!(self.value(b).len(), cout, "bias size");
        }
        let (ho, wo) = spec
            .output_size(h, wd, kh, kw)
            .unwrap_or_else(|| panic!("conv kernel {kh}x{kw} does not fit {h}x{wd}"));
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            spec,
        };
        let p = ho * wo;
        if spec.depthwise {
            depthwise_forward(&geom, n, &xv.data, &wv.data, &mut out.data);
        } else if spec.is_plain_pointwise(kh, kw) {
            for s in 0..n {
                gemm(
                    cout,
                    cin,
                    p,
                    &wv.data,
                    false,
                    &xv.data[s * cin * p..(s + 1) * cin * p],
                    false,
                    &mut out.data[s * cout * p..(s + 1) * cout * p],
                    0.0,
                );
            }
        } else {
            let k = cin * kh * kw;
            let mut cols = vec![0.0; k * p];
            for s in 0..n {
                geom.im2col(&xv.data[s * cin * h * wd..(s + 1) * cin * h * wd], &mut cols);
                gemm(cout, k, p, &wv.data, false, &cols, false, &mut out.data[s * cout * p..(s + 1) * cout * p], 0.0);
            }
        }
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for s in 0..n {
                for c in 0..cout {
                    out.data[(s * cout + c) * p..(s * cout + c + 1) * p]
                        .iter_mut()
                        .for_each(|o| *o += bv[c]);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv { x, w, b, spec }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape;
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        assert!(gv.len() == c && bv.len() == c);
        let per = c / groups * h * w;
        let plane = h * w;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; n * groups];
        let mut out = Tensor::zeros(xv.shape);
        for s in 0..n {
            for g in 0..groups {
                let start = (s * c + g * (c / groups)) * plane;
                let seg = &xv.data[start..start + per];
                let mean = seg.iter().sum::<f64>() / per as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
                let r = 1.0 / (var + GN_EPS).sqrt();
                rstd[s * groups + g] = r;
                for (k, &v) in seg.iter().enumerate() {
                    let ch = g * (c / groups) + k / plane;
                    let xh = (v - mean) * r;
                    xhat[start + k] = xh;
                    out.data[start + k] = gv[ch] * xh + bv[ch];
                }
            }
        }
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape,
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(out, op, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add shape mismatch");
        let out = Tensor {
            shape: av.shape,
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
        };
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "mul shape mismatch");
        let out = Tensor {
            shape: av.shape,
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
        };
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a 1×C×H×W tensor to every item of an N×C×H×W tensor.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape[0], 1);
        assert_eq!(&av.shape[1..], &bv.shape[1..], "broadcast shape mismatch");
        let m = bv.len();
        let out = Tensor {
            shape: av.shape,
            data: av.data.iter().enumerate().map(|(k, x)| x + bv.data[k % m]).collect(),
        };
        self.push(out, Op::AddBroadcast(a, b), &[a, b])
    }

    /// Multiplies channel `c` of every item by `s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        let [_, c, h, w] = xv.shape;
        assert_eq!(sv.len(), c, "scale size");
        let plane = h * w;
        let out = Tensor {
            shape: xv.shape,
            data: xv
                .data
                .iter()
                .enumerate()
                .map(|(k, v)| v * sv.data[(k / plane) % c])
                .collect(),
        };
        self.push(out, Op::ChannelScale(x, s), &[x, s])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape;
        let ti = upsample_taps(h);
        let tj = upsample_taps(w);
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for nc in 0..n * c {
            let src = &xv.data[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out.data[nc * 4 * h * w..(nc + 1) * 4 * h * w];
            for (oi, &(i0, i1, a)) in ti.iter().enumerate() {
                for (oj, &(j0, j1, b)) in tj.iter().enumerate() {
                    dst[oi * 2 * w + oj] = (1.0 - a) * ((1.0 - b) * src[i0 * w + j0] + b * src[i0 * w + j1])
                        + a * ((1.0 - b) * src[i1 * w + j0] + b * src[i1 * w + j1]);
                }
            }
        }
        self.push(out, Op::Upsample2(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let [n, _, h, w] = self.shape(xs[0]);
        let total: usize = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert!(s[0] == n && s[2] == h && s[3] == w, "concat shape mismatch");
                s[1]
            })
            .sum();
        let mut out = Tensor::zeros([n, total, h, w]);
        let plane = h * w;
        for s in 0..n {
            let mut off = 0;
            for &v in xs {
                let t = self.value(v);
                let c = t.shape[1];
                out.data[(s * total + off) * plane..(s * total + off + c) * plane]
                    .copy_from_slice(&t.data[s * c * plane..(s + 1) * c * plane]);
                off += c;
            }
        }
        self.push(out, Op::ConcatChannels(xs.to_vec()), xs)
    }

    /// Σ weight·(pred − target)² as a 1×1×1×1 scalar.
    pub fn weighted_sse(&mut self, pred: Var, target: Vec<f64>, weight: Vec<f64>) -> Var {
        let pv = self.value(pred);
        assert!(target.len() == pv.len() && weight.len() == pv.len(), "loss shape mismatch");
        let s: f64 = pv
            .data
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((p, t), w)| if *w != 0.0 { w * (p - t) * (p - t) } else { 0.0 })
            .sum();
        self.push(Tensor::full([1; 4], s), Op::WeightedSse { pred, target, weight }, &[pred])
    }

    /// Σ coef·scalar.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let s = terms.iter().map(|&(v, c)| c * self.scalar(v)).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::full([1; 4], s), Op::Combine(terms.to_vec()), &inputs)
    }

    /// Reverse pass from `root` seeded with `seed·ones`.
    pub fn backward(&self, root: Var, seed: f64) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(vec![seed; self.nodes[root.0].value.len()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Conv { x, w, b, spec } => {
                    let (gx, gw, gb) = self.conv_backward(*x, *w, b.is_some(), *spec, &gy, ng(*x), ng(*w));
                    if let Some(g) = gx {
                        accumulate(&mut grads[x.0], g);
                    }
                    if let Some(g) = gw {
                        accumulate(&mut grads[w.0], g);
                    }
                    if let (Some(b), Some(g)) = (b, gb) {
                        if ng(*b) {
                            accumulate(&mut grads[b.0], g);
                        }
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let [n, c, h, w] = node.value.shape;
                    let plane = h * w;
                    let cg = c / groups;
                    let per = cg * plane;
                    let gv = &self.value(*gamma).data;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for k in 0..gy.len() {
                        let ch = (k / plane) % c;
                        dgamma[ch] += gy[k] * xhat[k];
                        dbeta[ch] += gy[k];
                    }
                    if ng(*x) {
                        let mut dx = vec![0.0; gy.len()];
                        for s in 0..n {
                            for g in 0..*groups {
                                let start = (s * c + g * cg) * plane;
                                let mut sum = 0.0;
                                let mut sum_x = 0.0;
                                for k in start..start + per {
                                    let d = gy[k] * gv[(k / plane) % c];
                                    sum += d;
                                    sum_x += d * xhat[k];
                                }
                                let r = rstd[s * groups + g];
                                let m = per as f64;
                                for k in start..start + per {
                                    let d = gy[k] * gv[(k / plane) % c];
                                    dx[k] = r / m * (m * d - sum - xhat[k] * sum_x);
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                    if ng(*gamma) {
                        accumulate(&mut grads[gamma.0], dgamma);
                    }
                    if ng(*beta) {
                        accumulate(&mut grads[beta.0], dbeta);
                    }
                }
                Op::Gelu(x) => {
                    let xv = &self.value(*x).data;
                    let g = gy.iter().zip(xv).map(|(g, &v)| g * gelu_grad(v)).collect();
                    accumulate(&mut grads[x.0], g);
                }
                Op::Sigmoid(x) => {
                    let g = gy.iter().zip(&node.value.data).map(|(g, &y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads[x.0], g);
                }
                Op::Add(a, b) => {
                    if ng(*b) {
                        accumulate(&mut grads[b.0], gy.clone());
                    }
                    if ng(*a) {
                        accumulate(&mut grads[a.0], gy);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    if ng(*a) {
                        accumulate(&mut grads[a.0], gy.iter().zip(bv).map(|(g, y)| g * y).collect());
                    }
                    if ng(*b) {
                        accumulate(&mut grads[b.0], gy.iter().zip(av).map(|(g, x)| g * x).collect());
                    }
                }
                Op::AddBroadcast(a, b) => {
                    if ng(*b) {
                        let m = self.value(*b).len();
                        let mut gb = vec![0.0; m];
                        for (k, g) in gy.iter().enumerate() {
                            gb[k % m] += g;
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                    if ng(*a) {
                        accumulate(&mut grads[a.0], gy);
                    }
                }
                Op::ChannelScale(x, s) => {
                    let [_, c, h, w] = node.value.shape;
                    let plane = h * w;
                    let (xv, sv) = (&self.value(*x).data, &self.value(*s).data);
                    if ng(*s) {
                        let mut gs = vec![0.0; c];
                        for (k, g) in gy.iter().enumerate() {
                            gs[(k / plane) % c] += g * xv[k];
                        }
                        accumulate(&mut grads[s.0], gs);
                    }
                    if ng(*x) {
                        let gx = gy.iter().enumerate().map(|(k, g)| g * sv[(k / plane) % c]).collect();
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::Upsample2(x) => {
                    let [n, c, h, w] = self.shape(*x);
                    let ti = upsample_taps(h);
                    let tj = upsample_taps(w);
                    let mut gx = vec![0.0; n * c * h * w];
                    for nc in 0..n * c {
                        let src = &gy[nc * 4 * h * w..(nc + 1) * 4 * h * w];
                        let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
                        for (oi, &(i0, i1, a)) in ti.iter().enumerate() {
                            for (oj, &(j0, j1, b)) in tj.iter().enumerate() {
                                let g = src[oi * 2 * w + oj];
                                dst[i0 * w + j0] += g * (1.0 - a) * (1.0 - b);
                                dst[i0 * w + j1] += g * (1.0 - a) * b;
                                dst[i1 * w + j0] += g * a * (1.0 - b);
                                dst[i1 * w + j1] += g * a * b;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Reshape(x) => accumulate(&mut grads[x.0], gy),
                Op::ConcatChannels(xs) => {
                    let [n, total, h, w] = node.value.shape;
                    let plane = h * w;
                    let mut off = 0;
                    for &v in xs {
                        let c = self.shape(v)[1];
                        if ng(v) {
                            let mut g = Vec::with_capacity(n * c * plane);
                            for s in 0..n {
                                g.extend_from_slice(&gy[(s * total + off) * plane..(s * total + off + c) * plane]);
                            }
                            accumulate(&mut grads[v.0], g);
                        }
                        off += c;
                    }
                }
                Op::WeightedSse { pred, target, weight } => {
                    let pv = &self.value(*pred).data;
                    let g0 = gy[0];
                    let g = pv
                        .iter()
                        .zip(target)
                        .zip(weight)
                        .map(|((p, t), w)| if *w != 0.0 { 2.0 * g0 * w * (p - t) } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[pred.0], g);
                }
                Op::Combine(terms) => {
                    for &(v, c) in terms {
                        if ng(v) {
                            accumulate(&mut grads[v.0], vec![c * gy[0]]);
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        has_bias: bool,
        spec: ConvSpec,
        gy: &[f64],
        want_x: bool,
        want_w: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape;
        let [cout, _, kh, kw] = wv.shape;
        let (ho, wo) = spec.output_size(h, wd, kh, kw).expect("checked in forward");
        let p = ho * wo;
        let gb = has_bias.then(|| {
            let mut gb = vec![0.0; cout];
            for s in 0..n {
                for (c, acc) in gb.iter_mut().enumerate() {
                    *acc += gy[(s * cout + c) * p..(s * cout + c + 1) * p].iter().sum::<f64>();
                }
            }
            gb
        });
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            spec,
        };
        if spec.depthwise {
            let (gx, gw) = depthwise_backward(&geom, n, &xv.data, &wv.data, gy, want_x, want_w);
            return (gx, gw, gb);
        }
        let mut gx = want_x.then(|| vec![0.0; xv.len()]);
        let mut gw = want_w.then(|| vec![0.0; wv.len()]);
        let isz = cin * h * wd;
        if spec.is_plain_pointwise(kh, kw) {
            for s in 0..n {
                let gys = &gy[s * cout * p..(s + 1) * cout * p];
                let xs = &xv.data[s * isz..(s + 1) * isz];
                if let Some(gw) = gw.as_mut() {
                    gemm(cout, p, cin, gys, false, xs, true, gw, 1.0);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(cin, cout, p, &wv.data, true, gys, false, &mut gx[s * isz..(s + 1) * isz], 1.0);
                }
            }
        } else {
            let k = cin * kh * kw;
            let mut cols = vec![0.0; k * p];
            let mut dcols = vec![0.0; k * p];
            for s in 0..n {
                let gys = &gy[s * cout * p..(s + 1) * cout * p];
                if let Some(gw) = gw.as_mut() {
                    geom.im2col(&xv.data[s * isz..(s + 1) * isz], &mut cols);
                    gemm(cout, p, k, gys, false, &cols, true, gw, 1.0);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(k, cout, p, &wv.data, true, gys, false, &mut dcols, 0.0);
                    geom.col2im(&dcols, &mut gx[s * isz..(s + 1) * isz]);
                }
            }
        }
        (gx, gw, gb)
    }
}

fn depthwise_forward(g: &ConvGeom, n: usize, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (h, wd, kh, kw, ho, wo) = (g.h, g.w, g.kh, g.kw, g.ho, g.wo);
    for s in 0..n {
        for c in 0..g.cin {
            let xs = &x[(s * g.cin + c) * h * wd..(s * g.cin + c + 1) * h * wd];
            let ws = &w[c * kh * kw..(c + 1) * kh * kw];
            let os = &mut out[(s * g.cin + c) * ho * wo..(s * g.cin + c + 1) * ho * wo];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wt = ws[ki * kw + kj];
                    for oi in 0..ho {
                        let Some(i) = g.src(oi, ki, g.spec.pad[0], h) else {
                            continue;
                        };
                        for oj in 0..wo {
                            if let Some(j) = g.src(oj, kj, g.spec.pad[2], wd) {
                                os[oi * wo + oj] += wt * xs[i * wd + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    g: &ConvGeom,
    n: usize,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (h, wd, kh, kw, ho, wo) = (g.h, g.w, g.kh, g.kw, g.ho, g.wo);
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    for s in 0..n {
        for c in 0..g.cin {
            let xoff = (s * g.cin + c) * h * wd;
            let gys = &gy[(s * g.cin + c) * ho * wo..(s * g.cin + c + 1) * ho * wo];
            for ki in 0..kh {
                for kj in 0..kw {
                    let widx = c * kh * kw + ki * kw + kj;
                    let wt = w[widx];
                    let mut acc = 0.0;
                    for oi in 0..ho {
                        let Some(i) = g.src(oi, ki, g.spec.pad[0], h) else {
                            continue;
                        };
                        for oj in 0..wo {
                            if let Some(j) = g.src(oj, kj, g.spec.pad[2], wd) {
                                let gv = gys[oi * wo + oj];
                                acc += gv * x[xoff + i * wd + j];
                                if let Some(gx) = gx.as_mut() {
                                    gx[xoff + i * wd + j] += gv * wt;
                                }
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut rng::stream(seed, "tensor-test", 0))
    }

    /// Checks d(loss)/d(input k) for every input against central differences.
    fn grad_check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let build = |ts: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
            let out = f(&mut g, &vars);
            let n = g.value(out).len();
            let w: Vec<f64> = (0..n).map(|k| 0.3 + (k % 7) as f64 * 0.1).collect();
            let loss = g.weighted_sse(out, vec![0.1; n], w);
            let grads = g.backward(loss, 1.0);
            (g.scalar(loss), vars.iter().map(|&v| grads.get(v).unwrap().to_vec()).collect())
        };
        let (_, analytic) = build(&inputs);
        let h = 1e-6;
        for (a, t) in inputs.iter().enumerate() {
            for k in 0..t.len() {
                let mut plus = inputs.clone();
                plus[a].data[k] += h;
                let mut minus = inputs.clone();
                minus[a].data[k] -= h;
                let num = (build(&plus).0 - build(&minus).0) / (2.0 * h);
                let ana = analytic[a][k];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < 1e-5, "input {a} element {k}: numeric {num} analytic {ana}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for (spec, ks) in [
            (ConvSpec::same(4, 1), 4),
            (ConvSpec::strided(2, 1), 4),
            (ConvSpec::same(3, 2), 3),
            (ConvSpec::pointwise(), 1),
        ] {
            let x = rand_tensor([2, 3, 6, 6], 1);
            let w = rand_tensor([2, 3, ks, ks], 2);
            let b = rand_tensor([1, 2, 1, 1], 3);
            grad_check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec));
        }
    }

    #[test]
    fn depthwise_gradients() {
        let x = rand_tensor([2, 3, 7, 7], 4);
        let w = rand_tensor([3, 1, 3, 3], 5);
        grad_check(vec![x, w], |g, v| g.conv2d(v[0], v[1], None, ConvSpec::same(3, 2).depthwise()));
    }

    #[test]
    fn elementwise_gradients() {
        let a = rand_tensor([2, 4, 3, 3], 6);
        let b = rand_tensor([2, 4, 3, 3], 7);
        let c = rand_tensor([1, 4, 3, 3], 8);
        let s = rand_tensor([1, 4, 1, 1], 9);
        grad_check(vec![a, b, c, s], |g, v| {
            let m = g.mul(v[0], v[1]);
            let sg = g.sigmoid(m);
            let ge = g.gelu(v[1]);
            let sum = g.add(sg, ge);
            let bc = g.add_broadcast(sum, v[2]);
            g.channel_scale(bc, v[3])
        });
    }

    #[test]
    fn group_norm_gradients() {
        let x = rand_tensor([2, 4, 3, 3], 10);
        let gamma = rand_tensor([1, 4, 1, 1], 11);
        let beta = rand_tensor([1, 4, 1, 1], 12);
        grad_check(vec![x, gamma, beta], |g, v| g.group_norm(v[0], v[1], v[2], 2));
    }

    #[test]
    fn shape_op_gradients() {
        let a = rand_tensor([2, 2, 3, 4], 13);
        let b = rand_tensor([2, 3, 3, 4], 14);
        grad_check(vec![a, b], |g, v| {
            let up = g.upsample2(v[0]);
            let r = g.reshape(v[1], [1, 6, 3, 4]);
            let c = g.concat_channels(&[v[0], v[1]]);
            let c2 = g.reshape(c, [1, 10, 3, 4]);
            let cc = g.concat_channels(&[c2, r]);
            let l1 = g.weighted_sse(up, vec![0.0; 2 * 2 * 6 * 8], vec![1.0; 2 * 2 * 6 * 8]);
            let l2 = g.weighted_sse(cc, vec![0.2; 16 * 12], vec![0.5; 16 * 12]);
            g.combine(&[(l1, 0.7), (l2, 1.3)])
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = rand_tensor([1, 2, 5, 5], 15);
        let w = rand_tensor([3, 2, 4, 4], 16);
        let spec = ConvSpec::same(4, 1);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, spec);
        assert_eq!(g.shape(y), [1, 3, 5, 5]);
        // padding 1 before, 2 after
        for co in 0..3 {
            for oi in 0..5 {
                for oj in 0..5 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ki in 0..4 {
                            for kj in 0..4 {
                                let (i, j) = (oi as isize + ki as isize - 1, oj as isize + kj as isize - 1);
                                if (0..5).contains(&i) && (0..5).contains(&j) {
                                    acc += w.at(co, ci, ki, kj) * x.at(0, ci, i as usize, j as usize);
                                }
                            }
                        }
                    }
                    assert!((acc - g.value(y).at(0, co, oi, oj)).abs() < 1e-12);
                }
            }
        }
        let s = g.conv2d(xv, wv, None, ConvSpec::strided(2, 1));
        assert_eq!(g.shape(s), [1, 3, 2, 2]);
    }

    #[test]
    fn upsample_constant_and_size() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 1, 3, 5], 2.5));
        let y = g.upsample2(x);
        assert_eq!(g.shape(y), [1, 1, 6, 10]);
        assert!(g.value(y).data.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let w = g.variable(Tensor::full([1, 1, 1, 1], 2.0));
        let y = g.conv2d(x, w, None, ConvSpec::pointwise());
        let l = g.weighted_sse(y, vec![0.0; 4], vec![1.0; 4]);
        let grads = g.backward(l, 1.0);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap(), &[4.0 * 2.0 * 2.0]);
    }
}
