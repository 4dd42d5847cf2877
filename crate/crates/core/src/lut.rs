//! Dense 3D lookup tables and trilinear color mapping.
//!
//! A [`Lut3D`] of dimension `D` stores, for each of the three output
//! channels, a `D x D x D` lattice indexed by the quantized red, green and
//! blue input. Colors between lattice points are mapped by trilinear
//! interpolation of the eight surrounding entries.

use rayon::prelude::*;

use crate::{Error, Real, Result};

/// A normalized RGB color. Channels are expected in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rgb<T = f32> {
    pub r: T,
    pub g: T,
    pub b: T,
}

impl<T: Real> Rgb<T> {
    pub fn new(r: T, g: T, b: T) -> Self {
        Self { r, g, b }
    }

    pub fn splat(v: T) -> Self {
        Self { r: v, g: v, b: v }
    }

    pub fn to_array(self) -> [T; 3] {
        [self.r, self.g, self.b]
    }

    pub fn from_array([r, g, b]: [T; 3]) -> Self {
        Self { r, g, b }
    }

    pub fn cast<U: Real>(self) -> Rgb<U> {
        Rgb {
            r: U::from(self.r).unwrap(),
            g: U::from(self.g).unwrap(),
            b: U::from(self.b).unwrap(),
        }
    }
}

/// A row-major RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T = f32> {
    width: usize,
    height: usize,
    pixels: Vec<Rgb<T>>,
}

impl<T: Real> Image<T> {
    pub fn new(width: usize, height: usize, pixels: Vec<Rgb<T>>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, color: Rgb<T>) -> Result<Self> {
        Self::new(width, height, vec![color; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> Rgb<T>,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb<T>] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb<T>] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb<T> {
        self.pixels[y * self.width + x]
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| p.cast()).collect(),
        }
    }

    /// Per-channel mean over all pixels.
    pub fn mean(&self) -> Rgb<T> {
        let n = T::of_usize(self.pixels.len());
        let mut acc = [T::zero(); 3];
        for p in &self.pixels {
            acc[0] += p.r;
            acc[1] += p.g;
            acc[2] += p.b;
        }
        Rgb::new(acc[0] / n, acc[1] / n, acc[2] / n)
    }

    /// Channel planes `[r..., g..., b...]`, the layout of one NCHW sample.
    pub fn to_planar(&self) -> Vec<T> {
        let n = self.pixels.len();
        let mut out = vec![T::zero(); 3 * n];
        for (i, p) in self.pixels.iter().enumerate() {
            out[i] = p.r;
            out[n + i] = p.g;
            out[2 * n + i] = p.b;
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, planes: &[T]) -> Result<Self> {
        let n = width * height;
        if planes.len() != 3 * n {
            return Err(Error::shape(format!(
                "planar {width}x{height} image needs {} values, got {}",
                3 * n,
                planes.len()
            )));
        }
        let pixels = (0..n)
            .map(|i| Rgb::new(planes[i], planes[n + i], planes[2 * n + i]))
            .collect();
        Self::new(width, height, pixels)
    }

    /// Bilinear resampling with half-pixel centers (no corner alignment).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Self> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let axis = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, T::lit(src - i0 as f64))
        };
        let cols: Vec<_> = (0..width).map(|x| axis(x, sx, self.width)).collect();
        Self::from_fn(width, height, |x, y| {
            let (y0, y1, fy) = axis(y, sy, self.height);
            let (x0, x1, fx) = cols[x];
            let lerp = |a: Rgb<T>, b: Rgb<T>, t: T| {
                Rgb::new(
                    a.r + (b.r - a.r) * t,
                    a.g + (b.g - a.g) * t,
                    a.b + (b.b - a.b) * t,
                )
            };
            let top = lerp(self.get(x0, y0), self.get(x1, y0), fx);
            let bottom = lerp(self.get(x0, y1), self.get(x1, y1), fx);
            lerp(top, bottom, fy)
        })
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::InvalidInput(format!(
                "crop {width}x{height}+{x}+{y} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Self::from_fn(width, height, |cx, cy| self.get(x + cx, y + cy))
    }
}

/// Dense 3D LUT with entries laid out `[channel][i][j][k]`, where `i`, `j`
/// and `k` index the red, green and blue input axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut3D<T = f32> {
    dim: usize,
    entries: Vec<T>,
}

/// Lattice cell containing `v` on one axis: base index and fractional offset.
///
/// The top index is clamped to `dim - 2` so that 1.0 falls in the last cell
/// with offset 1.
#[inline(always)]
fn locate<T: Real>(v: T, last: T, max_base: usize) -> (usize, T) {
    let x = v.max(T::zero()).min(T::one()) * last;
    let i = x.floor().to_usize().unwrap_or(0).min(max_base);
    (i, x - T::of_usize(i))
}

impl<T: Real> Lut3D<T> {
    pub fn identity(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        let n = dim * dim * dim;
        let last = T::of_usize(dim - 1);
        let mut entries = vec![T::zero(); 3 * n];
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    let idx = (i * dim + j) * dim + k;
                    entries[idx] = T::of_usize(i) / last;
                    entries[n + idx] = T::of_usize(j) / last;
                    entries[2 * n + idx] = T::of_usize(k) / last;
                }
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn constant(dim: usize, color: Rgb<T>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        let n = dim * dim * dim;
        let mut entries = Vec::with_capacity(3 * n);
        for v in color.to_array() {
            entries.extend(std::iter::repeat(v).take(n));
        }
        Ok(Self { dim, entries })
    }

    pub fn from_entries(dim: usize, entries: Vec<T>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        if entries.len() != 3 * dim * dim * dim {
            return Err(Error::shape(format!(
                "LUT of dimension {dim} needs {} entries, got {}",
                3 * dim * dim * dim,
                entries.len()
            )));
        }
        if let Some(pos) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite LUT entry at index {pos}")));
        }
        Ok(Self { dim, entries })
    }

    /// All-zero lattice, used as a gradient accumulator.
    pub fn zeros(dim: usize) -> Result<Self> {
        Self::from_entries(dim, vec![T::zero(); 3 * dim * dim * dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [T] {
        &mut self.entries
    }

    pub fn into_entries(self) -> Vec<T> {
        self.entries
    }

    #[inline]
    pub fn index(&self, channel: usize, i: usize, j: usize, k: usize) -> usize {
        let d = self.dim;
        channel * d * d * d + (i * d + j) * d + k
    }

    pub fn entry(&self, i: usize, j: usize, k: usize) -> Rgb<T> {
        Rgb::new(
            self.entries[self.index(0, i, j, k)],
            self.entries[self.index(1, i, j, k)],
            self.entries[self.index(2, i, j, k)],
        )
    }

    pub fn set_entry(&mut self, i: usize, j: usize, k: usize, c: Rgb<T>) {
        let idx = self.index(0, i, j, k);
        let n = self.dim * self.dim * self.dim;
        self.entries[idx] = c.r;
        self.entries[n + idx] = c.g;
        self.entries[2 * n + idx] = c.b;
    }

    pub fn cast<U: Real>(&self) -> Lut3D<U> {
        Lut3D {
            dim: self.dim,
            entries: self.entries.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }

    /// Maps one color through the lattice.
    #[inline]
    pub fn apply(&self, c: Rgb<T>) -> Rgb<T> {
        let d = self.dim;
        let last = T::of_usize(d - 1);
        let (i, fr) = locate(c.r, last, d - 2);
        let (j, fg) = locate(c.g, last, d - 2);
        let (k, fb) = locate(c.b, last, d - 2);
        let base = (i * d + j) * d + k;
        let (si, sj) = (d * d, d);
        let n = d * d * d;
        let mut out = [T::zero(); 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let e = &self.entries[ch * n..(ch + 1) * n];
            let lerp = |a: T, b: T, t: T| a + (b - a) * t;
            let c00 = lerp(e[base], e[base + 1], fb);
            let c01 = lerp(e[base + sj], e[base + sj + 1], fb);
            let c10 = lerp(e[base + si], e[base + si + 1], fb);
            let c11 = lerp(e[base + si + sj], e[base + si + sj + 1], fb);
            let c0 = lerp(c00, c01, fg);
            let c1 = lerp(c10, c11, fg);
            *o = lerp(c0, c1, fr);
        }
        Rgb::from_array(out)
    }

    /// Applies the LUT to every pixel, partitioning the work over the
    /// current rayon pool. Each pixel is an independent pure function of its
    /// input, so the result does not depend on the worker count.
    pub fn apply_image(&self, img: &Image<T>) -> Image<T> {
        const CHUNK: usize = 4096;
        let mut out = vec![Rgb::default(); img.pixels.len()];
        out.par_chunks_mut(CHUNK)
            .zip(img.pixels.par_chunks(CHUNK))
            .for_each(|(dst, src)| {
                for (o, &p) in dst.iter_mut().zip(src) {
                    *o = self.apply(p);
                }
            });
        Image {
            width: img.width,
            height: img.height,
            pixels: out,
        }
    }

    /// Gradient of `sum(upstream * apply_image(self, img))` with respect to
    /// the lattice entries.
    ///
    /// Pixels are split into chunks whose size depends only on the pixel
    /// count; partial lattices are summed in chunk order.
    pub fn apply_image_backward(&self, img: &Image<T>, upstream: &Image<T>) -> Result<Lut3D<T>> {
        if img.width != upstream.width || img.height != upstream.height {
            return Err(Error::shape(format!(
                "upstream gradient is {}x{}, image is {}x{}",
                upstream.width, upstream.height, img.width, img.height
            )));
        }
        let npix = img.pixels.len();
        let chunk = 8192.max(npix.div_ceil(64));
        let partials: Vec<Vec<T>> = img
            .pixels
            .par_chunks(chunk)
            .zip(upstream.pixels.par_chunks(chunk))
            .map(|(px, up)| {
                let mut g = vec![T::zero(); self.entries.len()];
                for (&p, &u) in px.iter().zip(up) {
                    self.scatter(p, u, &mut g);
                }
                g
            })
            .collect();
        let mut grad = vec![T::zero(); self.entries.len()];
        for part in partials {
            for (g, v) in grad.iter_mut().zip(part) {
                *g += v;
            }
        }
        Ok(Lut3D {
            dim: self.dim,
            entries: grad,
        })
    }

    #[inline]
    fn scatter(&self, c: Rgb<T>, up: Rgb<T>, grad: &mut [T]) {
        let d = self.dim;
        let last = T::of_usize(d - 1);
        let (i, fr) = locate(c.r, last, d - 2);
        let (j, fg) = locate(c.g, last, d - 2);
        let (k, fb) = locate(c.b, last, d - 2);
        let base = (i * d + j) * d + k;
        let n = d * d * d;
        let one = T::one();
        let wr = [one - fr, fr];
        let wg = [one - fg, fg];
        let wb = [one - fb, fb];
        for (ch, u) in up.to_array().into_iter().enumerate() {
            if u == T::zero() {
                continue;
            }
            let g = &mut grad[ch * n..(ch + 1) * n];
            for (di, &a) in wr.iter().enumerate() {
                for (dj, &b) in wg.iter().enumerate() {
                    let row = base + di * d * d + dj * d;
                    let ab = u * a * b;
                    g[row] += ab * wb[0];
                    g[row + 1] += ab * wb[1];
                }
            }
        }
    }
}
