//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! Nodes only ever reference earlier nodes, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! The op set is exactly what the feature extractor, the LUT network and the
//! losses need. Broadcasting only expands size-1 axes via
//! [`Tape::broadcast`]. Domain-specific nodes (CLUT reconstruction, lattice
//! regularizers) plug in through [`CustomOp`].

use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use crate::lut::{Image, Lut3D};
use crate::real::matmul;
use crate::{Error, Real, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("tensor shape {shape:?} must be nonempty and positive")));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("valid shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Uniform values in `[-bound, bound)`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        Self::new(shape.to_vec(), data).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected NCHW tensor, got {:?}", self.shape))),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }

    /// Stacks images of equal size into an `N x 3 x H x W` tensor.
    pub fn from_images(images: &[Image<T>]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
        let (w, h) = (first.width(), first.height());
        let mut data = Vec::with_capacity(images.len() * 3 * w * h);
        for img in images {
            if (img.width(), img.height()) != (w, h) {
                return Err(Error::shape(format!(
                    "batch mixes {w}x{h} and {}x{} images",
                    img.width(),
                    img.height()
                )));
            }
            data.extend(img.to_planar());
        }
        Self::new(vec![images.len(), 3, h, w], data)
    }

    /// Splits an `N x 3 x H x W` tensor back into images.
    pub fn to_images(&self) -> Result<Vec<Image<T>>> {
        let (n, c, h, w) = self.nchw()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        (0..n)
            .map(|i| Image::from_planar(w, h, &self.data[i * 3 * h * w..(i + 1) * 3 * h * w]))
            .collect()
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A node whose forward value is computed by the caller and whose backward
/// pass is supplied by the implementor.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input. Entries whose `wanted` flag is false
    /// may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        wanted: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    Relu(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Concat { inputs: Vec<Var>, axis: usize },
    Matmul(Var, Var),
    Reshape(Var),
    Broadcast(Var),
    ChannelMean(Var),
    ChannelStd(Var),
    Sum(Var),
    Mean(Var),
    RowNorms(Var),
    LutApply { lut: Var, img: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the tape's trainable leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Number of leaves that received a gradient.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn conv_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Valid output columns `[lo, hi)` for kernel column `kx`.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let lo = ((p - kx as isize).max(0) + s - 1) / s;
        let hi = ((self.w as isize + p - kx as isize + s - 1) / s).clamp(0, self.wo as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let plane = self.ho * self.wo;
        for c in 0..self.c {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let out = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        let ix0 = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (o, ox) in out[lo..hi].iter_mut().zip(0..) {
                                *o = src[ix0 + ox * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let plane = self.ho * self.wo;
        for c in 0..self.c {
            let xc = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let g = &src[oy * self.wo..(oy + 1) * self.wo];
                        let dst = &mut xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let ix0 = lo * self.stride + kx - self.pad;
                        for (ox, &v) in g[lo..hi].iter().enumerate() {
                            dst[ix0 + ox * self.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Strides of `shape` where size-1 axes that expand to `target` get stride 0.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        strides[ax] = if shape[ax] == 1 && target[ax] != 1 { 0 } else { acc };
        acc *= shape[ax];
    }
    strides
}

fn for_each_broadcast(target: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = target.iter().product();
    let mut idx = vec![0usize; target.len()];
    let mut src = 0usize;
    for out in 0..total {
        f(out, src);
        for ax in (0..target.len()).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < target[ax] {
                break;
            }
            src -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) {
            if let Some(pos) = value.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite value at flat index {pos} in output of {}",
                    op_name(&op)
                )));
            }
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Appends a node computed outside the tape.
    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp<T>>,
        inputs: &[Var],
        output: Tensor<T>,
    ) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// 2D convolution without bias. `x` is `N x C x H x W`, `k` is
    /// `O x C x kh x kw`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let (n, c, h, w) = xv.nchw()?;
        let (o, kc, kh, kw) = kv.nchw()?;
        if kc != c {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels, kernel expects {kc}"
            )));
        }
        let (ho, wo) = match (conv_extent(h, kh, stride, pad), conv_extent(w, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d: {h}x{w} input too small for {kh}x{kw} kernel (stride {stride}, pad {pad})"
                )))
            }
        };
        let g = ConvGeom { c, h, w, kh, kw, stride, pad, ho, wo };
        let mut out = vec![T::zero(); n * o * ho * wo];
        let (xd, kd) = (xv.data(), kv.data());
        out.par_chunks_mut(o * ho * wo).enumerate().for_each(|(s, dst)| {
            let xs = &xd[s * c * h * w..(s + 1) * c * h * w];
            if g.pointwise() {
                matmul(kd, xs, dst, o, c, h * w, false, false, false);
            } else {
                let mut col = vec![T::zero(); g.col_rows() * ho * wo];
                g.im2col(xs, &mut col);
                matmul(kd, &col, dst, o, g.col_rows(), ho * wo, false, false, false);
            }
        });
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        self.push(value, Op::Conv2d { x, k, stride, pad }, &[x, k])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "sub")?;
        let v = self.value(a).zip_map(self.value(b), |p, q| p - q);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "mul")?;
        let v = self.value(a).zip_map(self.value(b), |p, q| p * q);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "div")?;
        let v = self.value(a).zip_map(self.value(b), |p, q| p / q);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.value(v).shape().to_vec())
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat: {s:?} incompatible with {first:?}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Matrix product of two 2D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false, false, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::Matmul(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())
            .map_err(|_| Error::shape(format!("reshape {:?} to {shape:?}", t.shape())))?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Expands size-1 axes of `x` to `shape`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let ok = t.shape().len() == shape.len()
            && t.shape().iter().zip(shape).all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(Error::shape(format!("cannot broadcast {:?} to {shape:?}", t.shape())));
        }
        let strides = broadcast_strides(t.shape(), shape);
        let mut data = vec![T::zero(); shape.iter().product()];
        let src = t.data();
        for_each_broadcast(shape, &strides, |o, i| data[o] = src[i]);
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push(value, Op::Broadcast(x), &[x])
    }

    fn spatial_reduce(&self, x: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(x).nchw()?;
        Ok((n, c, h * w))
    }

    /// Per-sample, per-channel mean over spatial positions: `N x C x 1 x 1`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, hw) = self.spatial_reduce(x)?;
        let inv = T::one() / T::of_usize(hw);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], data)?;
        self.push(value, Op::ChannelMean(x), &[x])
    }

    /// Global average pooling to `N x C x 1 x 1`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.channel_mean(x)
    }

    /// Per-channel standard deviation `sqrt(biased variance + eps)`.
    pub fn channel_std(&mut self, x: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::InvalidInput("channel_std needs eps > 0".into()));
        }
        let (n, c, hw) = self.spatial_reduce(x)?;
        let inv = T::one() / T::of_usize(hw);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| {
                let mu = p.iter().copied().sum::<T>() * inv;
                let var = p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
                (var + eps).sqrt()
            })
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], data)?;
        self.push(value, Op::ChannelStd(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of_usize(t.numel());
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// L2 norm of each sample along the leading axis: `N x ...` to `N`.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let data = t
            .data()
            .chunks(t.numel() / n)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let value = Tensor::new(vec![n], data)?;
        self.push(value, Op::RowNorms(x), &[x])
    }

    /// Applies a LUT (`L x 3 x D x D x D`, `L` is 1 or `N`) to an
    /// `N x 3 x H x W` image batch through [`Lut3D::apply_image`].
    ///
    /// Only the LUT receives a gradient; the image is treated as data.
    pub fn lut_apply(&mut self, lut: Var, img: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(img).nchw()?;
        if c != 3 {
            return Err(Error::shape(format!("lut_apply needs 3 image channels, got {c}")));
        }
        let (l, dim) = lut_batch(self.value(lut), n)?;
        let lut_t = self.value(lut);
        let img_t = self.value(img);
        let lut_len = 3 * dim * dim * dim;
        let plane = 3 * h * w;
        let outputs: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|s| -> Result<Vec<T>> {
                let li = if l == 1 { 0 } else { s };
                let table =
                    Lut3D::from_entries(dim, lut_t.data()[li * lut_len..(li + 1) * lut_len].to_vec())?;
                let image = Image::from_planar(w, h, &img_t.data()[s * plane..(s + 1) * plane])?;
                Ok(table.apply_image(&image).to_planar())
            })
            .collect::<Result<_>>()?;
        let value = Tensor::new(vec![n, 3, h, w], outputs.concat())?;
        self.push(value, Op::LutApply { lut, img }, &[lut])
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::InvalidInput("loss is not on this tape".into()))?;
        if root.value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(g);
                continue;
            }
            for (parent, pg) in self.node_backward(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert!(parent.0 < idx, "tape out of topological order");
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, stride, pad } => {
                let (dx, dk) = self.conv2d_backward(*x, *k, *stride, *pad, g)?;
                out.extend(dx.map(|t| (*x, t)));
                out.extend(dk.map(|t| (*k, t)));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                out.push((*x, xv.zip_map(g, |a, d| if a > T::zero() { d } else { T::zero() })));
            }
            Op::Tanh(x) => {
                out.push((*x, node.value.zip_map(g, |y, d| d * (T::one() - y * y))));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                if self.wants(*b) {
                    out.push((*b, g.map(|d| -d)));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.zip_map(self.value(*b), |d, q| d * q)));
                }
                if self.wants(*b) {
                    out.push((*b, g.zip_map(self.value(*a), |d, p| d * p)));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.wants(*a) {
                    out.push((*a, g.zip_map(bv, |d, q| d / q)));
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b) / b
                    let q = node.value.zip_map(bv, |y, q| -y / q);
                    out.push((*b, g.zip_map(&q, |d, v| d * v)));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                out.push((*x, g.map(|d| d * s)));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let s = self.value(v).shape().to_vec();
                    let block = s[*axis] * inner;
                    if self.wants(v) {
                        let row = shape[*axis] * inner;
                        let mut data = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            data.extend_from_slice(&g.data()[o * row + offset..o * row + offset + block]);
                        }
                        out.push((v, Tensor::new(s, data)?));
                    }
                    offset += block;
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul(g.data(), bv.data(), &mut da, m, n, k, false, true, false);
                    out.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul(av.data(), g.data(), &mut db, k, m, n, true, false, false);
                    out.push((*b, Tensor::new(vec![k, n], db)?));
                }
            }
            Op::Reshape(x) => {
                out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), g.data().to_vec())?));
            }
            Op::Broadcast(x) => {
                let xs = self.value(*x).shape().to_vec();
                let strides = broadcast_strides(&xs, node.value.shape());
                let mut acc = vec![T::zero(); xs.iter().product()];
                let gd = g.data();
                for_each_broadcast(node.value.shape(), &strides, |o, i| acc[i] += gd[o]);
                out.push((*x, Tensor::new(xs, acc)?));
            }
            Op::ChannelMean(x) => {
                let xv = self.value(*x);
                let hw = xv.shape()[2] * xv.shape()[3];
                let inv = T::one() / T::of_usize(hw);
                let mut data = vec![T::zero(); xv.numel()];
                for (chunk, &d) in data.chunks_mut(hw).zip(g.data()) {
                    chunk.fill(d * inv);
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::ChannelStd(x) => {
                let xv = self.value(*x);
                let hw = xv.shape()[2] * xv.shape()[3];
                let inv = T::one() / T::of_usize(hw);
                let mut data = vec![T::zero(); xv.numel()];
                for (((dst, src), &sd), &d) in data
                    .chunks_mut(hw)
                    .zip(xv.data().chunks(hw))
                    .zip(node.value.data())
                    .zip(g.data())
                {
                    let mu = src.iter().copied().sum::<T>() * inv;
                    let coef = d * inv / sd;
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = coef * (v - mu);
                    }
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::Sum(x) => {
                let d = g.item();
                out.push((*x, Tensor::full(self.value(*x).shape(), d)));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let d = g.item() / T::of_usize(xv.numel());
                out.push((*x, Tensor::full(xv.shape(), d)));
            }
            Op::RowNorms(x) => {
                let xv = self.value(*x);
                let row = xv.numel() / xv.shape()[0];
                let mut data = vec![T::zero(); xv.numel()];
                for (((dst, src), &norm), &d) in data
                    .chunks_mut(row)
                    .zip(xv.data().chunks(row))
                    .zip(node.value.data())
                    .zip(g.data())
                {
                    if norm > T::zero() {
                        let coef = d / norm;
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = coef * v;
                        }
                    }
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::LutApply { lut, img } => {
                out.push((*lut, self.lut_apply_backward(*lut, *img, g)?));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let wanted: Vec<bool> = inputs.iter().map(|&v| self.wants(v)).collect();
                let grads = op.backward(&values, &node.value, g, &wanted)?;
                if grads.len() != inputs.len() {
                    return Err(Error::shape(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for ((&v, gr), want) in inputs.iter().zip(grads).zip(wanted) {
                    if let (Some(t), true) = (gr, want) {
                        if t.shape() != self.value(v).shape() {
                            return Err(Error::shape(format!(
                                "custom op {} gradient shape {:?} != input {:?}",
                                op.name(),
                                t.shape(),
                                self.value(v).shape()
                            )));
                        }
                        out.push((v, t));
                    }
                }
            }
        }
        Ok(out)
    }

    fn conv2d_backward(
        &self,
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
    ) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        let (xv, kv) = (self.value(x), self.value(k));
        let (n, c, h, w) = xv.nchw()?;
        let (o, _, kh, kw) = kv.nchw()?;
        let (_, _, ho, wo) = g.nchw()?;
        let geom = ConvGeom { c, h, w, kh, kw, stride, pad, ho, wo };
        let (want_x, want_k) = (self.wants(x), self.wants(k));
        let rows = geom.col_rows();
        let (xd, kd, gd) = (xv.data(), kv.data(), g.data());

        let mut dx = want_x.then(|| vec![T::zero(); xv.numel()]);
        let per_sample = |s: usize, dxs: Option<&mut [T]>| -> Option<Vec<T>> {
            let gs = &gd[s * o * ho * wo..(s + 1) * o * ho * wo];
            let xs = &xd[s * c * h * w..(s + 1) * c * h * w];
            if geom.pointwise() {
                if let Some(dxs) = dxs {
                    matmul(kd, gs, dxs, c, o, h * w, true, false, false);
                }
                want_k.then(|| {
                    let mut dk = vec![T::zero(); o * c];
                    matmul(gs, xs, &mut dk, o, h * w, c, false, true, false);
                    dk
                })
            } else {
                let mut col = vec![T::zero(); rows * ho * wo];
                if let Some(dxs) = dxs {
                    matmul(kd, gs, &mut col, rows, o, ho * wo, true, false, false);
                    geom.col2im(&col, dxs);
                }
                want_k.then(|| {
                    geom.im2col(xs, &mut col);
                    let mut dk = vec![T::zero(); o * rows];
                    matmul(gs, &col, &mut dk, o, ho * wo, rows, false, true, false);
                    dk
                })
            }
        };

        let partials: Vec<Option<Vec<T>>> = match dx.as_mut() {
            Some(dx) => dx
                .par_chunks_mut(c * h * w)
                .enumerate()
                .map(|(s, dxs)| per_sample(s, Some(dxs)))
                .collect(),
            None => (0..n).into_par_iter().map(|s| per_sample(s, None)).collect(),
        };
        let dk = if want_k {
            let mut acc = vec![T::zero(); kv.numel()];
            for part in partials.into_iter().flatten() {
                for (a, v) in acc.iter_mut().zip(part) {
                    *a += v;
                }
            }
            Some(Tensor::new(kv.shape().to_vec(), acc)?)
        } else {
            None
        };
        let dx = dx.map(|d| Tensor::new(xv.shape().to_vec(), d)).transpose()?;
        Ok((dx, dk))
    }

    fn lut_apply_backward(&self, lut: Var, img: Var, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (lv, iv) = (self.value(lut), self.value(img));
        let (n, _, h, w) = iv.nchw()?;
        let (l, dim) = lut_batch(lv, n)?;
        let lut_len = 3 * dim * dim * dim;
        let plane = 3 * h * w;
        let partials: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|s| -> Result<Vec<T>> {
                let li = if l == 1 { 0 } else { s };
                let table =
                    Lut3D::from_entries(dim, lv.data()[li * lut_len..(li + 1) * lut_len].to_vec())?;
                let image = Image::from_planar(w, h, &iv.data()[s * plane..(s + 1) * plane])?;
                let up = Image::from_planar(w, h, &g.data()[s * plane..(s + 1) * plane])?;
                Ok(table.apply_image_backward(&image, &up)?.into_entries())
            })
            .collect::<Result<_>>()?;
        let mut acc = vec![T::zero(); lv.numel()];
        for (s, part) in partials.into_iter().enumerate() {
            let li = if l == 1 { 0 } else { s };
            for (a, v) in acc[li * lut_len..(li + 1) * lut_len].iter_mut().zip(part) {
                *a += v;
            }
        }
        Tensor::new(lv.shape().to_vec(), acc)
    }
}

fn lut_batch<T: Real>(lut: &Tensor<T>, n: usize) -> Result<(usize, usize)> {
    match lut.shape() {
        &[l, 3, d0, d1, d2] if d0 == d1 && d1 == d2 && d0 >= 2 && (l == 1 || l == n) => Ok((l, d0)),
        s => Err(Error::shape(format!(
            "lut_apply expects a (1 or {n}) x 3 x D x D x D lattice, got {s:?}"
        ))),
    }
}

fn op_name<T: Real>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu(_) => "relu",
        Op::Tanh(_) => "tanh",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::Concat { .. } => "concat",
        Op::Matmul(..) => "matmul",
        Op::Reshape(_) => "reshape",
        Op::Broadcast(_) => "broadcast",
        Op::ChannelMean(_) => "channel_mean",
        Op::ChannelStd(_) => "channel_std",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::RowNorms(_) => "row_norms",
        Op::LutApply { .. } => "lut_apply",
        Op::Custom { op, .. } => op.name(),
    }
}

/// Central finite-difference checks for tape gradients in 64-bit mode.
pub mod gradcheck {
    use super::*;

    pub const STEP: f64 = 1e-4;
    pub const REL_TOL: f64 = 1e-3;
    /// Differences below this are accepted regardless of relative error.
    pub const ABS_FLOOR: f64 = 1e-7;

    /// Worst disagreement found by [`verify`].
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Report {
        pub max_rel_error: f64,
        pub max_abs_error: f64,
        pub checked: usize,
    }

    /// Builds the graph twice per perturbed coordinate and compares the
    /// difference quotient against the tape's gradient for every input.
    /// Returns an error describing the first coordinate out of tolerance.
    pub fn verify<F>(inputs: &[Tensor<f64>], build: F) -> std::result::Result<Report, String>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        verify_with(inputs, build, |_, g| (0..g.numel()).collect())
    }

    /// Like [`verify`], but checks at most `per_input` coordinates of each
    /// input: the half with the largest analytic gradient plus an evenly
    /// spaced spread of the rest. For graphs too large to sweep.
    pub fn verify_sampled<F>(inputs: &[Tensor<f64>], per_input: usize, build: F) -> std::result::Result<Report, String>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        verify_with(inputs, build, |_, g| {
            let n = g.numel();
            if n <= per_input {
                return (0..n).collect();
            }
            let mut by_size: Vec<usize> = (0..n).collect();
            by_size.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()));
            let mut picked: Vec<usize> = by_size[..per_input / 2].to_vec();
            let rest = per_input - picked.len();
            picked.extend((0..rest).map(|i| i * n / rest));
            picked.sort_unstable();
            picked.dedup();
            picked
        })
    }

    fn verify_with<F, S>(inputs: &[Tensor<f64>], build: F, select: S) -> std::result::Result<Report, String>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
        S: Fn(usize, &Tensor<f64>) -> Vec<usize>,
    {
        let eval = |vals: &[Tensor<f64>]| -> std::result::Result<f64, String> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars).map_err(|e| e.to_string())?;
            Ok(tape.value(loss).item())
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars).map_err(|e| e.to_string())?;
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;
        drop(tape);
        let mut report = Report { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
        let mut work = inputs.to_vec();
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for idx in select(which, &analytic) {
                let orig = input.data()[idx];
                work[which].data_mut()[idx] = orig + STEP;
                let up = eval(&work)?;
                work[which].data_mut()[idx] = orig - STEP;
                let down = eval(&work)?;
                work[which].data_mut()[idx] = orig;
                let fd = (up - down) / (2.0 * STEP);
                let an = analytic.data()[idx];
                let err = (fd - an).abs();
                let rel = err / fd.abs().max(an.abs()).max(1e-12);
                report.checked += 1;
                report.max_abs_error = report.max_abs_error.max(err);
                if err >= ABS_FLOOR {
                    report.max_rel_error = report.max_rel_error.max(rel);
                }
                if rel >= REL_TOL && err >= ABS_FLOOR {
                    return Err(format!(
                        "input {which} element {idx}: finite difference {fd:e}, analytic {an:e}"
                    ));
                }
            }
        }
        Ok(report)
    }

    /// Panicking form of [`verify`] for tests.
    pub fn check<F>(inputs: &[Tensor<f64>], build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        if let Err(msg) = verify(inputs, build) {
            panic!("{msg}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Weighted sum with fixed pseudo-random weights so every output
    /// element contributes a distinct gradient.
    fn probe(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let w = tape.constant(rand_t(&shape, 999));
        let p = tape.mul(x, w)?;
        tape.sum(p)
    }

    /// Direct convolution with explicit loops.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, w) = x.nchw().unwrap();
        let (o, _, kh, kw) = k.nchw().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((s * c + ic) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (stride, pad, kh) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3), (1, 2, 3)] {
            let x = rand_t(&[2, 3, 7, 6], 1);
            let k = rand_t(&[4, 3, kh, kh], 2);
            let mut tape = Tape::new();
            let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
            let y = tape.conv2d(xv, kv, stride, pad).unwrap();
            let want = naive_conv(&x, &k, stride, pad);
            assert_eq!(tape.value(y).shape(), want.shape());
            for (a, b) in tape.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_pointwise_unit_kernel_is_identity() {
        let x = rand_t(&[1, 1, 4, 5], 3);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = tape.conv2d(xv, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(tape.conv2d(x, k, 1, 1).is_err());
    }

    #[test]
    fn channel_statistics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.5));
        let m = tape.channel_mean(x).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| v == 0.5));
        let s = tape.channel_std(x, 1e-5).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 3.1623e-3).abs() < 1e-6);
        }
        assert!(tape.channel_std(x, 0.0).is_err());
    }

    #[test]
    fn sum_and_mean_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean(sq).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(rand_t(&[3], 1));
        let b = tape.constant(rand_t(&[3], 2));
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_some());
        assert!(g.get(b).is_none());
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::uniform(&[2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
            let k = tape.leaf(Tensor::uniform(&[5, 3, 3, 3], 0.3, &mut ChaCha8Rng::seed_from_u64(5)));
            let y = tape.conv2d(x, k, 2, 1).unwrap();
            let t = tape.tanh(y).unwrap();
            let s = tape.channel_std(t, 1e-5).unwrap();
            let l = tape.sum(s).unwrap();
            let g = tape.backward(l).unwrap();
            (g.get(x).unwrap().clone(), g.get(k).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_conv2d() {
        for (stride, pad, kh) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let x = rand_t(&[2, 2, 4, 4], 10);
            let k = rand_t(&[3, 2, kh, kh], 11);
            check(&[x, k], |t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad)?;
                probe(t, y)
            });
        }
    }

    #[test]
    fn grad_elementwise() {
        let a = rand_t(&[2, 3], 20);
        let b = Tensor::new(vec![2, 3], rand_t(&[2, 3], 21).data().iter().map(|v| v + 2.0).collect()).unwrap();
        check(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let m = t.mul(d, v[1])?;
            let q = t.div(m, v[1])?;
            let q = t.div(q, v[1])?;
            let q = t.scale(q, 0.7)?;
            probe(t, q)
        });
        check(&[a], |t, v| {
            let y = t.tanh(v[0])?;
            let r = t.relu(v[0])?;
            let s = t.add(y, r)?;
            probe(t, s)
        });
    }

    #[test]
    fn grad_concat_matmul_reshape() {
        let a = rand_t(&[2, 3], 30);
        let b = rand_t(&[2, 2], 31);
        let w = rand_t(&[5, 4], 32);
        check(&[a, b, w], |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let m = t.matmul(c, v[2])?;
            let r = t.reshape(m, &[2, 2, 1, 2])?;
            probe(t, r)
        });
        let a = rand_t(&[2, 3, 2, 2], 33);
        let b = rand_t(&[2, 1, 2, 2], 34);
        check(&[a, b], |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            probe(t, c)
        });
    }

    #[test]
    fn grad_broadcast_and_channel_stats() {
        let x = rand_t(&[2, 3, 3, 2], 40);
        let y = rand_t(&[1, 3, 1, 1], 41);
        check(&[x, y], |t, v| {
            let mu = t.channel_mean(v[0])?;
            let sd = t.channel_std(v[0], 1e-5)?;
            let p = t.adaptive_avg_pool(v[0])?;
            let yb = t.broadcast(v[1], &[2, 3, 1, 1])?;
            let a = t.mul(sd, yb)?;
            let b = t.add(a, mu)?;
            let c = t.add(b, p)?;
            let e = t.broadcast(c, &[2, 3, 3, 2])?;
            let f = t.mul(e, v[0])?;
            probe(t, f)
        });
    }

    #[test]
    fn grad_norms_and_reductions() {
        let x = rand_t(&[3, 2, 2], 50);
        check(&[x], |t, v| {
            let n = t.row_norms(v[0])?;
            let m = t.mean(n)?;
            let s = t.sum(v[0])?;
            let s = t.scale(s, 0.1)?;
            t.add(m, s)
        });
    }

    #[test]
    fn lut_apply_identity_and_gradient() {
        let img = Tensor::uniform(&[2, 3, 3, 4], 0.5, &mut ChaCha8Rng::seed_from_u64(60))
            .data()
            .iter()
            .map(|v| v + 0.5)
            .collect::<Vec<f64>>();
        let img = Tensor::new(vec![2, 3, 3, 4], img).unwrap();
        let ident = Lut3D::<f64>::identity(3).unwrap().into_entries();
        let lut = Tensor::new(vec![1, 3, 3, 3, 3], ident).unwrap();

        let mut tape = Tape::new();
        let (l, i) = (tape.constant(lut.clone()), tape.constant(img.clone()));
        let out = tape.lut_apply(l, i).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-9);
        }

        let mut tape = Tape::new();
        let (l, i) = (tape.leaf(lut.clone()), tape.constant(img.clone()));
        let out = tape.lut_apply(l, i).unwrap();
        let z = tape.scale(out, 0.0).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(l).unwrap().data().iter().all(|&v| v == 0.0));

        let lut = rand_t(&[2, 3, 3, 3, 3], 61);
        check(&[lut], |t, v| {
            let i = t.constant(img.clone());
            let o = t.lut_apply(v[0], i)?;
            probe(t, o)
        });
    }

    #[test]
    fn lut_apply_rejects_wrong_channels() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 3, 2, 2, 2]));
        let i = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(tape.lut_apply(l, i).is_err());
    }

    #[test]
    fn image_batch_round_trip() {
        let imgs: Vec<Image<f32>> = (0..2)
            .map(|s| Image::from_fn(3, 2, |x, y| crate::lut::Rgb::new(x as f32, y as f32, s as f32)).unwrap())
            .collect();
        let t = Tensor::from_images(&imgs).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 3]);
        assert_eq!(t.to_images().unwrap(), imgs);
    }
}
