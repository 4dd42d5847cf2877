//! Compressed LUTs.
//!
//! A [`Clut`] stores each output channel of a lattice as a small `S x W`
//! matrix. Two shared transformation matrices expand it to the dense
//! `D x D^2` layout: `M_s (D x S) * psi_c (S x W) * M_w (W x D^2)`. Row `i`
//! is the red input index and the `D^2` axis unrolls green-major with blue
//! varying fastest, which matches the `[c][i][j][k]` layout of [`Lut3D`].
//!
//! Reconstruction is residual: the expanded values are added to the identity
//! lattice, so all-zero parameters give the identity color mapping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lut::Lut3D;
use crate::real::matmul;
use crate::tensor::{CustomOp, Tape, Tensor, Var};
use crate::{Error, Real, Result};

pub const DEFAULT_S: usize = 32;
pub const DEFAULT_W: usize = 32;
pub const DEFAULT_N: usize = 20;
pub const DEFAULT_DIM: usize = 33;

/// Compressed parameters of one LUT, laid out `3 x S x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clut<T = f32> {
    s: usize,
    w: usize,
    psi: Vec<T>,
}

impl<T: Real> Clut<T> {
    pub fn new(s: usize, w: usize, psi: Vec<T>) -> Result<Self> {
        if s == 0 || w == 0 {
            return Err(Error::shape(format!("CLUT needs S, W >= 1, got {s}x{w}")));
        }
        if psi.len() != 3 * s * w {
            return Err(Error::shape(format!(
                "CLUT {s}x{w} needs {} values, got {}",
                3 * s * w,
                psi.len()
            )));
        }
        if let Some(pos) = psi.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite CLUT entry at index {pos}")));
        }
        Ok(Self { s, w, psi })
    }

    pub fn zeros(s: usize, w: usize) -> Result<Self> {
        Self::new(s, w, vec![T::zero(); 3 * s * w])
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn psi(&self) -> &[T] {
        &self.psi
    }

    pub fn psi_mut(&mut self) -> &mut [T] {
        &mut self.psi
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.s * self.w;
        &self.psi[c * n..(c + 1) * n]
    }
}

/// The expansion matrices `M_s (D x S)` and `M_w (W x D^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformMatrices<T = f32> {
    dim: usize,
    s: usize,
    w: usize,
    m_s: Vec<T>,
    m_w: Vec<T>,
}

impl<T: Real> TransformMatrices<T> {
    pub fn new(dim: usize, s: usize, w: usize, m_s: Vec<T>, m_w: Vec<T>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        if m_s.len() != dim * s || m_w.len() != w * dim * dim {
            return Err(Error::shape(format!(
                "transform matrices for D={dim}, S={s}, W={w} need {}x{s} and {w}x{}, got {} and {} values",
                dim,
                dim * dim,
                m_s.len(),
                m_w.len()
            )));
        }
        Ok(Self { dim, s, w, m_s, m_w })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn m_s(&self) -> &[T] {
        &self.m_s
    }

    pub fn m_w(&self) -> &[T] {
        &self.m_w
    }

    pub fn m_s_mut(&mut self) -> &mut [T] {
        &mut self.m_s
    }

    pub fn m_w_mut(&mut self) -> &mut [T] {
        &mut self.m_w
    }

    fn check(&self, clut: &Clut<T>) -> Result<()> {
        if (clut.s, clut.w) != (self.s, self.w) {
            return Err(Error::shape(format!(
                "CLUT is {}x{} but matrices expect {}x{}",
                clut.s, clut.w, self.s, self.w
            )));
        }
        Ok(())
    }
}

/// `N` compressed LUTs sharing `S` and `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisBank<T = f32> {
    s: usize,
    w: usize,
    bases: Vec<Clut<T>>,
}

impl<T: Real> BasisBank<T> {
    pub fn new(bases: Vec<Clut<T>>) -> Result<Self> {
        let first = bases
            .first()
            .ok_or_else(|| Error::InvalidInput("basis bank needs at least one CLUT".into()))?;
        let (s, w) = (first.s, first.w);
        if let Some(bad) = bases.iter().position(|b| (b.s, b.w) != (s, w)) {
            return Err(Error::shape(format!(
                "basis {bad} is {}x{}, expected {s}x{w}",
                bases[bad].s, bases[bad].w
            )));
        }
        Ok(Self { s, w, bases })
    }

    /// Builds a bank from a row-major `N x (3*S*W)` array.
    pub fn from_flat(n: usize, s: usize, w: usize, data: &[T]) -> Result<Self> {
        let len = 3 * s * w;
        if data.len() != n * len {
            return Err(Error::shape(format!(
                "bank of {n} CLUTs {s}x{w} needs {} values, got {}",
                n * len,
                data.len()
            )));
        }
        Self::new(
            data.chunks(len)
                .map(|c| Clut::new(s, w, c.to_vec()))
                .collect::<Result<_>>()?,
        )
    }

    pub fn n(&self) -> usize {
        self.bases.len()
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn bases(&self) -> &[Clut<T>] {
        &self.bases
    }

    /// Row-major `N x (3*S*W)` copy of all bases.
    pub fn to_flat(&self) -> Vec<T> {
        self.bases.iter().flat_map(|b| b.psi.iter().copied()).collect()
    }
}

/// Weighted sum of the bank's CLUTs.
pub fn combine_basis<T: Real>(bank: &BasisBank<T>, weights: &[T]) -> Result<Clut<T>> {
    if weights.len() != bank.n() {
        return Err(Error::shape(format!(
            "{} weights for a bank of {} CLUTs",
            weights.len(),
            bank.n()
        )));
    }
    let mut psi = vec![T::zero(); 3 * bank.s * bank.w];
    for (base, &wt) in bank.bases.iter().zip(weights) {
        for (acc, &v) in psi.iter_mut().zip(&base.psi) {
            *acc += wt * v;
        }
    }
    Clut::new(bank.s, bank.w, psi)
}

/// Expands `psi` (`3 x S x W`) into `out` (`3 x D x D^2`) and adds the
/// identity lattice.
fn reconstruct_into<T: Real>(
    psi: &[T],
    m_s: &[T],
    m_w: &[T],
    (dim, s, w): (usize, usize, usize),
    baseline: &[T],
    out: &mut [T],
) {
    let d2 = dim * dim;
    let mut tmp = vec![T::zero(); dim * w];
    for c in 0..3 {
        matmul(m_s, &psi[c * s * w..(c + 1) * s * w], &mut tmp, dim, s, w, false, false, false);
        let dst = &mut out[c * dim * d2..(c + 1) * dim * d2];
        dst.copy_from_slice(&baseline[c * dim * d2..(c + 1) * dim * d2]);
        matmul(&tmp, m_w, dst, dim, w, d2, false, false, true);
    }
}

/// Gradients of one reconstruction. `g` is the `3 x D x D^2` upstream.
/// Matrix gradients are accumulated into `dm_s` and `dm_w`.
#[allow(clippy::too_many_arguments)]
fn reconstruct_backward_into<T: Real>(
    g: &[T],
    psi: &[T],
    m_s: &[T],
    m_w: &[T],
    (dim, s, w): (usize, usize, usize),
    dpsi: Option<&mut [T]>,
    mut dm_s: Option<&mut [T]>,
    mut dm_w: Option<&mut [T]>,
) {
    let d2 = dim * dim;
    let mut gm = vec![T::zero(); dim * w];
    let mut tmp = vec![T::zero(); dim * w];
    let mut dpsi = dpsi;
    for c in 0..3 {
        let gc = &g[c * dim * d2..(c + 1) * dim * d2];
        let pc = &psi[c * s * w..(c + 1) * s * w];
        if dpsi.is_some() || dm_s.is_some() {
            // G_c M_w^T: D x W
            matmul(gc, m_w, &mut gm, dim, d2, w, false, true, false);
        }
        if let Some(dp) = dpsi.as_deref_mut() {
            matmul(m_s, &gm, &mut dp[c * s * w..(c + 1) * s * w], s, dim, w, true, false, false);
        }
        if let Some(dms) = dm_s.as_deref_mut() {
            matmul(&gm, pc, dms, dim, w, s, false, true, true);
        }
        if let Some(dmw) = dm_w.as_deref_mut() {
            matmul(m_s, pc, &mut tmp, dim, s, w, false, false, false);
            matmul(&tmp, gc, dmw, w, dim, d2, true, false, true);
        }
    }
}

/// Dense LUT from a CLUT: identity plus `M_s psi_c M_w` per channel.
pub fn reconstruct<T: Real>(clut: &Clut<T>, m: &TransformMatrices<T>) -> Result<Lut3D<T>> {
    m.check(clut)?;
    let baseline = Lut3D::<T>::identity(m.dim)?;
    let mut out = vec![T::zero(); baseline.entries().len()];
    reconstruct_into(
        &clut.psi,
        &m.m_s,
        &m.m_w,
        (m.dim, m.s, m.w),
        baseline.entries(),
        &mut out,
    );
    Lut3D::from_entries(m.dim, out)
}

/// Gradients of a reconstruction with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClutGradients<T = f32> {
    pub psi: Vec<T>,
    pub m_s: Vec<T>,
    pub m_w: Vec<T>,
}

pub fn reconstruct_backward<T: Real>(
    upstream: &Lut3D<T>,
    m: &TransformMatrices<T>,
    clut: &Clut<T>,
) -> Result<ClutGradients<T>> {
    m.check(clut)?;
    if upstream.dim() != m.dim {
        return Err(Error::shape(format!(
            "upstream gradient has D={}, matrices expect D={}",
            upstream.dim(),
            m.dim
        )));
    }
    let mut grads = ClutGradients {
        psi: vec![T::zero(); clut.psi.len()],
        m_s: vec![T::zero(); m.m_s.len()],
        m_w: vec![T::zero(); m.m_w.len()],
    };
    reconstruct_backward_into(
        upstream.entries(),
        &clut.psi,
        &m.m_s,
        &m.m_w,
        (m.dim, m.s, m.w),
        Some(&mut grads.psi),
        Some(&mut grads.m_s),
        Some(&mut grads.m_w),
    );
    Ok(grads)
}

fn uniform_vec<T: Real>(len: usize, bound: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..len).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
}

/// Random bank and matrices. Matrices are uniform in `+-1/sqrt(max side)`,
/// bases uniform in `+-0.01`.
pub fn init_bank<T: Real>(
    n: usize,
    s: usize,
    w: usize,
    dim: usize,
    seed: u64,
) -> Result<(BasisBank<T>, TransformMatrices<T>)> {
    if n == 0 {
        return Err(Error::InvalidInput("basis bank needs N >= 1".into()));
    }
    if s == 0 || w == 0 {
        return Err(Error::shape(format!("CLUT needs S, W >= 1, got {s}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d2 = dim * dim;
    let m_s = uniform_vec(dim * s, 1.0 / (dim.max(s) as f64).sqrt(), &mut rng);
    let m_w = uniform_vec(w * d2, 1.0 / (w.max(d2) as f64).sqrt(), &mut rng);
    let bases = (0..n)
        .map(|_| Clut::new(s, w, uniform_vec(3 * s * w, 0.01, &mut rng)))
        .collect::<Result<_>>()?;
    Ok((BasisBank::new(bases)?, TransformMatrices::new(dim, s, w, m_s, m_w)?))
}

struct ReconstructOp {
    dim: usize,
    s: usize,
    w: usize,
}

impl<T: Real> CustomOp<T> for ReconstructOp {
    fn name(&self) -> &'static str {
        "clut_reconstruct"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        wanted: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (psi, m_s, m_w) = (inputs[0], inputs[1], inputs[2]);
        let geom = (self.dim, self.s, self.w);
        let b = psi.shape()[0];
        let psi_len = 3 * self.s * self.w;
        let lut_len = 3 * self.dim * self.dim * self.dim;
        let mut dpsi = wanted[0].then(|| vec![T::zero(); psi.numel()]);
        let mut dm_s = wanted[1].then(|| vec![T::zero(); m_s.numel()]);
        let mut dm_w = wanted[2].then(|| vec![T::zero(); m_w.numel()]);
        for i in 0..b {
            reconstruct_backward_into(
                &grad.data()[i * lut_len..(i + 1) * lut_len],
                &psi.data()[i * psi_len..(i + 1) * psi_len],
                m_s.data(),
                m_w.data(),
                geom,
                dpsi.as_mut().map(|d| &mut d[i * psi_len..(i + 1) * psi_len]),
                dm_s.as_deref_mut(),
                dm_w.as_deref_mut(),
            );
        }
        let wrap = |d: Option<Vec<T>>, like: &Tensor<T>| {
            d.map(|v| Tensor::new(like.shape().to_vec(), v)).transpose()
        };
        Ok(vec![wrap(dpsi, psi)?, wrap(dm_s, m_s)?, wrap(dm_w, m_w)?])
    }
}

/// Records a batched reconstruction on the tape.
///
/// `psi` is `B x (3*S*W)`, `m_s` is `D x S`, `m_w` is `W x D^2`. The result
/// is the `B x 3 x D x D x D` lattice batch including the identity baseline.
pub fn reconstruct_node<T: Real>(tape: &mut Tape<T>, psi: Var, m_s: Var, m_w: Var) -> Result<Var> {
    let (ps, ms, mw) = (
        tape.value(psi).shape().to_vec(),
        tape.value(m_s).shape().to_vec(),
        tape.value(m_w).shape().to_vec(),
    );
    let (dim, s, w, b) = match (&ps[..], &ms[..], &mw[..]) {
        (&[b, len], &[dim, s], &[w, d2]) if d2 == dim * dim && len == 3 * s * w && dim >= 2 => {
            (dim, s, w, b)
        }
        _ => {
            return Err(Error::shape(format!(
                "reconstruct: psi {ps:?}, M_s {ms:?}, M_w {mw:?} are inconsistent"
            )))
        }
    };
    let baseline = Lut3D::<T>::identity(dim)?;
    let lut_len = baseline.entries().len();
    let psi_len = 3 * s * w;
    let mut out = vec![T::zero(); b * lut_len];
    for (i, dst) in out.chunks_mut(lut_len).enumerate() {
        reconstruct_into(
            &tape.value(psi).data()[i * psi_len..(i + 1) * psi_len],
            tape.value(m_s).data(),
            tape.value(m_w).data(),
            (dim, s, w),
            baseline.entries(),
            dst,
        );
    }
    let value = Tensor::new(vec![b, 3, dim, dim, dim], out)?;
    tape.custom(Box::new(ReconstructOp { dim, s, w }), &[psi, m_s, m_w], value)
}
