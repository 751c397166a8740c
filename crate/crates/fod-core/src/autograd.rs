//! Reverse-mode automatic differentiation on dynamic-dimension arrays.
//!
//! A `Graph` is a tape: every operation appends a node holding its output
//! value and enough information to backpropagate. Node ids are indices into
//! the tape, so creation order is a topological order and `backward` is a
//! single reverse sweep. The element type is generic (f32 for training,
//! f64 for finite-difference gradient checks).
//!
//! The op set is exactly what the denoiser needs: elementwise arithmetic,
//! 2-D matmul (attention), 3-D convolution via im2col (recomputed in the
//! backward pass rather than stored), group normalization, SiLU, row
//! softmax, nearest-neighbor upsampling, channel concatenation, and scalar
//! reductions.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, IxDyn};

pub trait Scalar: ndarray::NdFloat + std::iter::Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(pub(crate) usize);

impl Id {
    /// Position of this node in the tape; indexes the vector returned by
    /// `Graph::backward`.
    pub fn index(&self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, T),
    AddConst(Id),
    MulConst(Id, ArrayD<T>),
    MatMul(Id, Id),
    Transpose(Id),
    Reshape(Id),
    Concat { inputs: Vec<Id>, axis: usize },
    Conv3d { x: Id, w: Id, stride: usize },
    Upsample2(Id),
    GroupNorm {
        x: Id,
        gamma: Id,
        beta: Id,
        groups: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Silu(Id),
    SoftmaxRows(Id),
    Abs(Id),
    MeanAll(Id),
    AddChannelBias { x: Id, bias: Id },
}

pub struct Graph<T: Scalar> {
    values: Vec<ArrayD<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, requires: bool) -> Id {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        Id(self.values.len() - 1)
    }

    fn req(&self, id: Id) -> bool {
        self.requires[id.0]
    }

    pub fn value(&self, id: Id) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn scalar_value(&self, id: Id) -> T {
        *self.values[id.0].iter().next().expect("scalar node")
    }

    /// Insert a differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> Id {
        let std = as_standard(value);
        self.push(std, Op::Leaf, requires_grad)
    }

    /// Insert a constant (no gradient flows into it).
    pub fn constant(&mut self, value: ArrayD<T>) -> Id {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let v = &self.values[a.0] + &self.values[b.0];
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        let v = &self.values[a.0] - &self.values[b.0];
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Sub(a, b), r)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let v = &self.values[a.0] * &self.values[b.0];
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Mul(a, b), r)
    }

    pub fn scale(&mut self, a: Id, c: T) -> Id {
        let v = self.values[a.0].mapv(|x| x * c);
        let r = self.req(a);
        self.push(v, Op::Scale(a, c), r)
    }

    pub fn add_const(&mut self, a: Id, c: ArrayD<T>) -> Id {
        let v = &self.values[a.0] + &c;
        let r = self.req(a);
        self.push(v, Op::AddConst(a), r)
    }

    pub fn mul_const(&mut self, a: Id, c: ArrayD<T>) -> Id {
        let v = &self.values[a.0] * &c;
        let r = self.req(a);
        self.push(v, Op::MulConst(a, c), r)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let av = self.values[a.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-D");
        let bv = self.values[b.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-D");
        let v = av.dot(&bv).into_dyn();
        let r = self.req(a) || self.req(b);
        self.push(v, Op::MatMul(a, b), r)
    }

    pub fn transpose(&mut self, a: Id) -> Id {
        let v = self.values[a.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("transpose needs 2-D")
            .t()
            .to_owned()
            .into_dyn();
        let r = self.req(a);
        self.push(v, Op::Transpose(a), r)
    }

    pub fn reshape(&mut self, a: Id, shape: &[usize]) -> Id {
        let v = as_standard(self.values[a.0].clone())
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let r = self.req(a);
        self.push(v, Op::Reshape(a), r)
    }

    pub fn concat(&mut self, inputs: &[Id], axis: usize) -> Id {
        let views: Vec<ArrayViewD<T>> = inputs.iter().map(|i| self.values[i.0].view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let r = inputs.iter().any(|&i| self.req(i));
        self.push(
            as_standard(v),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            r,
        )
    }

    /// 3-D convolution, kernel 3x3x3, padding 1. `x` is [C, D, H, W] and
    /// `w` is [OC, C*27]. Stride 1 preserves the spatial shape; stride 2
    /// halves even extents.
    pub fn conv3d(&mut self, x: Id, w: Id, stride: usize) -> Id {
        let xv = &self.values[x.0];
        let wv = self.values[w.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("conv weight must be 2-D");
        let (c, d, h, wd) = dims4(xv);
        assert_eq!(wv.dim().1, c * 27, "conv weight in-channels mismatch");
        let (od, oh, ow) = (conv_out(d, stride), conv_out(h, stride), conv_out(wd, stride));
        let cols = im2col(xv, stride);
        let y2 = wv.dot(
            &cols
                .view()
                .into_dimensionality::<Ix2>()
                .expect("cols are 2-D"),
        );
        let oc = wv.dim().0;
        let v = y2
            .into_dyn()
            .into_shape_with_order(IxDyn(&[oc, od, oh, ow]))
            .expect("conv output shape");
        let r = self.req(x) || self.req(w);
        self.push(v, Op::Conv3d { x, w, stride }, r)
    }

    /// Nearest-neighbor 2x upsampling of the trailing three axes of
    /// [C, D, H, W].
    pub fn upsample2(&mut self, a: Id) -> Id {
        let xv = &self.values[a.0];
        let (c, d, h, w) = dims4(xv);
        let mut out = ArrayD::zeros(IxDyn(&[c, d * 2, h * 2, w * 2]));
        for ci in 0..c {
            for di in 0..d {
                for hi in 0..h {
                    for wi in 0..w {
                        let v = xv[[ci, di, hi, wi]];
                        for dd in 0..2 {
                            for hh in 0..2 {
                                for ww in 0..2 {
                                    out[[ci, 2 * di + dd, 2 * hi + hh, 2 * wi + ww]] = v;
                                }
                            }
                        }
                    }
                }
            }
        }
        let r = self.req(a);
        self.push(out, Op::Upsample2(a), r)
    }

    /// Group normalization over [C, spatial...]: statistics per group of
    /// channels, affine per channel.
    pub fn group_norm(&mut self, x: Id, gamma: Id, beta: Id, groups: usize) -> Id {
        let xv = &self.values[x.0];
        let c = xv.shape()[0];
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        let cg = c / groups;
        let spatial: usize = xv.shape()[1..].iter().product();
        let flat = xv
            .view()
            .into_shape_with_order(IxDyn(&[c, spatial]))
            .expect("standard layout");
        let eps = T::from_f64(1e-5);
        let mut mean = vec![T::zero(); groups];
        let mut inv_std = vec![T::zero(); groups];
        let mut out = ArrayD::zeros(IxDyn(xv.shape()));
        {
            let mut out_flat = out
                .view_mut()
                .into_shape_with_order(IxDyn(&[c, spatial]))
                .expect("standard layout");
            let gv = &self.values[gamma.0];
            let bv = &self.values[beta.0];
            for g in 0..groups {
                let n = T::from_f64((cg * spatial) as f64);
                let mut sum = T::zero();
                for ci in g * cg..(g + 1) * cg {
                    for s in 0..spatial {
                        sum += flat[[ci, s]];
                    }
                }
                let mu = sum / n;
                // two-pass variance: non-negative even under f32 rounding
                let mut sq = T::zero();
                for ci in g * cg..(g + 1) * cg {
                    for s in 0..spatial {
                        let d = flat[[ci, s]] - mu;
                        sq += d * d;
                    }
                }
                let var = sq / n;
                let istd = T::one() / (var + eps).sqrt();
                mean[g] = mu;
                inv_std[g] = istd;
                for ci in g * cg..(g + 1) * cg {
                    let ga = gv[[ci]];
                    let be = bv[[ci]];
                    for s in 0..spatial {
                        let xh = (flat[[ci, s]] - mu) * istd;
                        out_flat[[ci, s]] = ga * xh + be;
                    }
                }
            }
        }
        let r = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
            },
            r,
        )
    }

    pub fn silu(&mut self, a: Id) -> Id {
        let v = self.values[a.0].mapv(|x| x * sigmoid(x));
        let r = self.req(a);
        self.push(v, Op::Silu(a), r)
    }

    /// Softmax over the last axis of a 2-D array.
    pub fn softmax_rows(&mut self, a: Id) -> Id {
        let av = self.values[a.0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("softmax needs 2-D");
        let (rows, cols) = av.dim();
        let mut out = ndarray::Array2::<T>::zeros((rows, cols));
        for r in 0..rows {
            let row = av.row(r);
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for c in 0..cols {
                let e = (row[c] - mx).exp();
                out[(r, c)] = e;
                sum += e;
            }
            for c in 0..cols {
                out[(r, c)] /= sum;
            }
        }
        let r = self.req(a);
        self.push(out.into_dyn(), Op::SoftmaxRows(a), r)
    }

    pub fn abs(&mut self, a: Id) -> Id {
        let v = self.values[a.0].mapv(|x| x.abs());
        let r = self.req(a);
        self.push(v, Op::Abs(a), r)
    }

    /// Mean over all elements, returning a 0-dimensional node. Accumulates
    /// in f64 so the result does not depend on the element layout.
    pub fn mean_all(&mut self, a: Id) -> Id {
        let n = self.values[a.0].len() as f64;
        let total: f64 = self.values[a.0].iter().map(|v| v.as_f64()).sum();
        let v = ArrayD::from_elem(IxDyn(&[]), T::from_f64(total / n));
        let r = self.req(a);
        self.push(v, Op::MeanAll(a), r)
    }

    /// x[C, ...] + bias[C] broadcast over trailing axes.
    pub fn add_channel_bias(&mut self, x: Id, bias: Id) -> Id {
        let xv = &self.values[x.0];
        let bv = &self.values[bias.0];
        let c = xv.shape()[0];
        assert_eq!(bv.len(), c, "bias length must match channels");
        let spatial: usize = xv.shape()[1..].iter().product();
        let mut out = xv.clone();
        {
            let mut flat = out
                .view_mut()
                .into_shape_with_order(IxDyn(&[c, spatial]))
                .expect("standard layout");
            for ci in 0..c {
                let b = bv[[ci]];
                for s in 0..spatial {
                    flat[[ci, s]] += b;
                }
            }
        }
        let r = self.req(x) || self.req(bias);
        self.push(out, Op::AddChannelBias { x, bias }, r)
    }

    /// Reverse sweep from `root` (seed gradient all ones). Returns
    /// per-node gradients for nodes that require grad.
    pub fn backward(&self, root: Id) -> Vec<Option<ArrayD<T>>> {
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.values.len()];
        grads[root.0] = Some(ArrayD::ones(IxDyn(self.values[root.0].shape())));

        for idx in (0..=root.0).rev() {
            if !self.requires[idx] {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.ops[idx] {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.values[b.0];
                    let gb = &g * &self.values[a.0];
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.accum(&mut grads, *a, g.mapv(|v| v * c));
                }
                Op::AddConst(a) => {
                    self.accum(&mut grads, *a, g);
                }
                Op::MulConst(a, c) => {
                    self.accum(&mut grads, *a, &g * c);
                }
                Op::MatMul(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
                    let bv = self.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
                    if self.req(*a) {
                        self.accum(&mut grads, *a, g2.dot(&bv.t()).into_dyn());
                    }
                    if self.req(*b) {
                        self.accum(&mut grads, *b, av.t().dot(&g2).into_dyn());
                    }
                }
                Op::Transpose(a) => {
                    let gt = g
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .t()
                        .to_owned()
                        .into_dyn();
                    self.accum(&mut grads, *a, gt);
                }
                Op::Reshape(a) => {
                    let shape = self.values[a.0].shape().to_vec();
                    let gr = as_standard(g)
                        .into_shape_with_order(IxDyn(&shape))
                        .expect("reshape grad");
                    self.accum(&mut grads, *a, gr);
                }
                Op::Concat { inputs, axis } => {
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = self.values[inp.0].shape()[*axis];
                        let slice = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                            .to_owned();
                        self.accum(&mut grads, inp, slice);
                        offset += len;
                    }
                }
                Op::Conv3d { x, w, stride } => {
                    let oc = self.values[idx].shape()[0];
                    let n_out: usize = self.values[idx].shape()[1..].iter().product();
                    let g2 = as_standard(g)
                        .into_shape_with_order(IxDyn(&[oc, n_out]))
                        .unwrap();
                    let g2v = g2.view().into_dimensionality::<Ix2>().unwrap();
                    let cols = im2col(&self.values[x.0], *stride);
                    let colsv = cols.view().into_dimensionality::<Ix2>().unwrap();
                    if self.req(*w) {
                        self.accum(&mut grads, *w, g2v.dot(&colsv.t()).into_dyn());
                    }
                    if self.req(*x) {
                        let wv = self.values[w.0].view().into_dimensionality::<Ix2>().unwrap();
                        let gcols = wv.t().dot(&g2v);
                        let gx = col2im(&gcols.into_dyn(), self.values[x.0].shape(), *stride);
                        self.accum(&mut grads, *x, gx);
                    }
                }
                Op::Upsample2(a) => {
                    let (c, d, h, w) = dims4(&self.values[a.0]);
                    let mut gx = ArrayD::zeros(IxDyn(&[c, d, h, w]));
                    for ci in 0..c {
                        for di in 0..d {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let mut acc = T::zero();
                                    for dd in 0..2 {
                                        for hh in 0..2 {
                                            for ww in 0..2 {
                                                acc += g[[ci, 2 * di + dd, 2 * hi + hh, 2 * wi + ww]];
                                            }
                                        }
                                    }
                                    gx[[ci, di, hi, wi]] = acc;
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *a, gx);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    inv_std,
                } => {
                    let xv = &self.values[x.0];
                    let c = xv.shape()[0];
                    let cg = c / groups;
                    let spatial: usize = xv.shape()[1..].iter().product();
                    let xf = xv.view().into_shape_with_order(IxDyn(&[c, spatial])).unwrap();
                    let gstd = as_standard(g);
                    let gf = gstd
                        .view()
                        .into_shape_with_order(IxDyn(&[c, spatial]))
                        .unwrap();
                    let gv = &self.values[gamma.0];

                    let mut dgamma = ArrayD::zeros(IxDyn(&[c]));
                    let mut dbeta = ArrayD::zeros(IxDyn(&[c]));
                    let mut dx = ArrayD::zeros(IxDyn(&[c, spatial]));
                    for grp in 0..*groups {
                        let n = T::from_f64((cg * spatial) as f64);
                        let (mu, istd) = (mean[grp], inv_std[grp]);
                        let mut sum_gh = T::zero();
                        let mut sum_gh_xh = T::zero();
                        for ci in grp * cg..(grp + 1) * cg {
                            let ga = gv[[ci]];
                            for s in 0..spatial {
                                let xh = (xf[[ci, s]] - mu) * istd;
                                let gy = gf[[ci, s]];
                                dgamma[[ci]] += gy * xh;
                                dbeta[[ci]] += gy;
                                let gh = gy * ga;
                                sum_gh += gh;
                                sum_gh_xh += gh * xh;
                            }
                        }
                        let mean_gh = sum_gh / n;
                        let mean_gh_xh = sum_gh_xh / n;
                        for ci in grp * cg..(grp + 1) * cg {
                            let ga = gv[[ci]];
                            for s in 0..spatial {
                                let xh = (xf[[ci, s]] - mu) * istd;
                                let gh = gf[[ci, s]] * ga;
                                dx[[ci, s]] = istd * (gh - mean_gh - xh * mean_gh_xh);
                            }
                        }
                    }
                    let dx = dx
                        .into_shape_with_order(IxDyn(xv.shape()))
                        .expect("groupnorm grad shape");
                    self.accum(&mut grads, *x, dx);
                    self.accum(&mut grads, *gamma, dgamma);
                    self.accum(&mut grads, *beta, dbeta);
                }
                Op::Silu(a) => {
                    let dv = self.values[a.0].mapv(|x| {
                        let s = sigmoid(x);
                        s * (T::one() + x * (T::one() - s))
                    });
                    self.accum(&mut grads, *a, &g * &dv);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.values[idx].view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let (rows, cols) = y.dim();
                    let mut dx = ndarray::Array2::<T>::zeros((rows, cols));
                    for r in 0..rows {
                        let mut dotp = T::zero();
                        for cix in 0..cols {
                            dotp += g2[(r, cix)] * y[(r, cix)];
                        }
                        for cix in 0..cols {
                            dx[(r, cix)] = y[(r, cix)] * (g2[(r, cix)] - dotp);
                        }
                    }
                    self.accum(&mut grads, *a, dx.into_dyn());
                }
                Op::Abs(a) => {
                    let sign = self.values[a.0].mapv(|x| {
                        if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    });
                    self.accum(&mut grads, *a, &g * &sign);
                }
                Op::MeanAll(a) => {
                    let n = T::from_f64(self.values[a.0].len() as f64);
                    let gs = *g.iter().next().expect("scalar grad") / n;
                    let ga = ArrayD::from_elem(IxDyn(self.values[a.0].shape()), gs);
                    self.accum(&mut grads, *a, ga);
                }
                Op::AddChannelBias { x, bias } => {
                    if self.req(*bias) {
                        let c = self.values[x.0].shape()[0];
                        let spatial: usize = self.values[x.0].shape()[1..].iter().product();
                        let gstd = as_standard(g.clone());
                        let gf = gstd
                            .view()
                            .into_shape_with_order(IxDyn(&[c, spatial]))
                            .unwrap();
                        let mut db = ArrayD::zeros(IxDyn(&[c]));
                        for ci in 0..c {
                            let mut acc = T::zero();
                            for s in 0..spatial {
                                acc += gf[[ci, s]];
                            }
                            db[[ci]] = acc;
                        }
                        self.accum(&mut grads, *bias, db);
                    }
                    self.accum(&mut grads, *x, g);
                }
            }
        }
        grads
    }

    fn accum(&self, grads: &mut [Option<ArrayD<T>>], id: Id, g: ArrayD<T>) {
        if !self.req(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn as_standard<T: Scalar>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn dims4<T: Scalar>(a: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected [C, D, H, W], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

/// im2col for 3x3x3 kernels with padding 1: [C, D, H, W] ->
/// [C*27, outD*outH*outW].
fn im2col<T: Scalar>(x: &ArrayD<T>, stride: usize) -> ArrayD<T> {
    let (c, d, h, w) = dims4(x);
    let (od, oh, ow) = (conv_out(d, stride), conv_out(h, stride), conv_out(w, stride));
    let n_out = od * oh * ow;
    let mut cols = ArrayD::zeros(IxDyn(&[c * 27, n_out]));
    let xs = x.as_slice().expect("standard layout");
    let colsm = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let x_base = ci * d * h * w;
        for kd in 0..3usize {
            for kh in 0..3usize {
                for kw in 0..3usize {
                    let row = ((ci * 3 + kd) * 3 + kh) * 3 + kw;
                    let row_base = row * n_out;
                    for odi in 0..od {
                        let di = (odi * stride + kd) as isize - 1;
                        if di < 0 || di >= d as isize {
                            continue;
                        }
                        for ohi in 0..oh {
                            let hi = (ohi * stride + kh) as isize - 1;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            let out_base = row_base + (odi * oh + ohi) * ow;
                            let in_base = x_base + (di as usize * h + hi as usize) * w;
                            for owi in 0..ow {
                                let wi = (owi * stride + kw) as isize - 1;
                                if wi < 0 || wi >= w as isize {
                                    continue;
                                }
                                colsm[out_base + owi] = xs[in_base + wi as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of im2col: scatter-add columns back into the input shape.
fn col2im<T: Scalar>(cols: &ArrayD<T>, x_shape: &[usize], stride: usize) -> ArrayD<T> {
    let (c, d, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (od, oh, ow) = (conv_out(d, stride), conv_out(h, stride), conv_out(w, stride));
    let n_out = od * oh * ow;
    let mut x = ArrayD::zeros(IxDyn(x_shape));
    let xs = x.as_slice_mut().expect("standard layout");
    let colsm = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        let x_base = ci * d * h * w;
        for kd in 0..3usize {
            for kh in 0..3usize {
                for kw in 0..3usize {
                    let row = ((ci * 3 + kd) * 3 + kh) * 3 + kw;
                    let row_base = row * n_out;
                    for odi in 0..od {
                        let di = (odi * stride + kd) as isize - 1;
                        if di < 0 || di >= d as isize {
                            continue;
                        }
                        for ohi in 0..oh {
                            let hi = (ohi * stride + kh) as isize - 1;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            let out_base = row_base + (odi * oh + ohi) * ow;
                            let in_base = x_base + (di as usize * h + hi as usize) * w;
                            for owi in 0..ow {
                                let wi = (owi * stride + kw) as isize - 1;
                                if wi < 0 || wi >= w as isize {
                                    continue;
                                }
                                xs[in_base + wi as usize] += colsm[out_base + owi];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
