//! The LUT weight predictor.
//!
//! Content and style pyramids go through one splatting block per level
//! (two tanh convolutions with kernels shared between the two paths, then
//! AdaIN). The fused maps are average pooled, concatenated and fed to a stack
//! of 1x1 convolutions ending in a linear head with one output per basis LUT.
//! The predicted weights mix the basis bank, the mix is reconstructed to a
//! dense lattice and that lattice recolors the content image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clut::{self, BasisBank, TransformMatrices};
use crate::features::{conv_kernel, FeatureExtractor, FeaturePyramid, Profile};
use crate::lut::{Image, Lut3D};
use crate::tensor::{CustomOp, Tape, Tensor, Var};
use crate::{Error, Real, Result};

/// Epsilon inside the standard deviation of AdaIN and the style statistics.
pub const STATS_EPS: f64 = 1e-5;

/// Side length images are resized to before feature extraction.
pub const TRAIN_SIZE: usize = 256;

/// Architecture hyperparameters. Everything needed to rebuild the model
/// apart from the learned arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub profile: Profile,
    pub feature_seed: u64,
    pub dim: usize,
    pub n: usize,
    pub s: usize,
    pub w: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Desk,
            feature_seed: crate::features::DEFAULT_FEATURE_SEED,
            dim: clut::DEFAULT_DIM,
            n: clut::DEFAULT_N,
            s: clut::DEFAULT_S,
            w: clut::DEFAULT_W,
        }
    }
}

impl ModelConfig {
    /// Names and shapes of every learned array, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.profile.channels();
        let m = self.profile.c_mid();
        let mut out = Vec::new();
        for (j, &cin) in c.iter().enumerate() {
            out.push((format!("block{}.conv_a", j + 1), vec![cin, cin, 3, 3]));
            out.push((format!("block{}.conv_b", j + 1), vec![m, cin, 1, 1]));
        }
        let schedule = [4 * m, 2 * m, 4 * m, 2 * m, 8 * m];
        for i in 0..4 {
            out.push((
                format!("classifier.conv{}", i + 1),
                vec![schedule[i + 1], schedule[i], 1, 1],
            ));
        }
        out.push(("classifier.head".into(), vec![self.n, 8 * m, 1, 1]));
        out.push(("bank".into(), vec![self.n, 3 * self.s * self.w]));
        out.push(("m_s".into(), vec![self.dim, self.s]));
        out.push(("m_w".into(), vec![self.w, self.dim * self.dim]));
        out
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidDimension(self.dim));
        }
        if self.n == 0 || self.s == 0 || self.w == 0 {
            return Err(Error::InvalidInput(format!(
                "N, S and W must be positive, got {}, {}, {}",
                self.n, self.s, self.w
            )));
        }
        Ok(())
    }
}

const CONV_A: usize = 0;
const CONV_B: usize = 1;
const CLASSIFIER: usize = 8;
const HEAD: usize = 12;
pub const BANK: usize = 13;
pub const M_S: usize = 14;
pub const M_W: usize = 15;
pub const PARAM_COUNT: usize = 16;

/// A named learned array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone)]
pub struct NlutModel<T: Real = f32> {
    config: ModelConfig,
    extractor: FeatureExtractor<T>,
    params: Vec<Param<T>>,
}

/// Tape handles of a model's parameters for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles created elsewhere, one per entry of
    /// [`ModelConfig::param_shapes`], in that order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Everything a training step needs from one forward pass.
pub struct Forward {
    pub content: FeaturePyramid,
    pub style: FeaturePyramid,
    pub weights: Var,
    pub lut: Var,
    pub stylized: Var,
}

impl<T: Real> NlutModel<T> {
    /// Fresh model. Network kernels are uniform in `+-1/sqrt(fan_in)`; the
    /// bank and matrices come from [`clut::init_bank`].
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bank, m) = clut::init_bank::<T>(config.n, config.s, config.w, config.dim, seed ^ 0xc1u64)?;
        let params = config
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(idx, (name, shape))| {
                let value = match idx {
                    BANK => Tensor::new(shape, bank.to_flat()),
                    M_S => Tensor::new(shape, m.m_s().to_vec()),
                    M_W => Tensor::new(shape, m.m_w().to_vec()),
                    _ => Ok(conv_kernel(shape[0], shape[1], shape[2], &mut rng)),
                }?;
                Ok(Param { name, value })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            extractor: FeatureExtractor::new(config.profile, config.feature_seed),
            config,
            params,
        })
    }

    /// Rebuilds a model from stored arrays, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::shape(format!(
                "model needs {} arrays, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (p, (name, shape)) in params.iter().zip(&expected) {
            if &p.name != name || p.value.shape() != &shape[..] {
                return Err(Error::shape(format!(
                    "array {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self {
            extractor: FeatureExtractor::new(config.profile, config.feature_seed),
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn extractor(&self) -> &FeatureExtractor<T> {
        &self.extractor
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Param<T>> {
        self.params
    }

    pub fn bank(&self) -> Result<BasisBank<T>> {
        let c = &self.config;
        BasisBank::from_flat(c.n, c.s, c.w, self.params[BANK].value.data())
    }

    pub fn matrices(&self) -> Result<TransformMatrices<T>> {
        let c = &self.config;
        TransformMatrices::new(
            c.dim,
            c.s,
            c.w,
            self.params[M_S].value.data().to_vec(),
            self.params[M_W].value.data().to_vec(),
        )
    }

    /// Puts every parameter on the tape, as a trainable leaf when
    /// `trainable(name)` holds and as a constant otherwise.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(&p.name) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// One splatting block: shared tanh convolutions on both paths, then AdaIN.
    pub fn splat(&self, tape: &mut Tape<T>, b: &Bound, level: usize, fc: Var, fs: Var) -> Result<Var> {
        let (ka, kb) = (b.var(2 * level + CONV_A), b.var(2 * level + CONV_B));
        let mut path = |x: Var| -> Result<Var> {
            let y = tape.conv2d(x, ka, 2, 1)?;
            let y = tape.tanh(y)?;
            let y = tape.conv2d(y, kb, 1, 0)?;
            tape.tanh(y)
        };
        let c = path(fc)?;
        let s = path(fs)?;
        adain(tape, c, s)
    }

    /// `B x N` combination weights from content and style pyramids.
    pub fn predict_from_pyramids(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        content: &FeaturePyramid,
        style: &FeaturePyramid,
    ) -> Result<Var> {
        let mut pooled = Vec::with_capacity(4);
        for level in 0..4 {
            let fused = self.splat(tape, b, level, content.levels[level], style.levels[level])?;
            pooled.push(tape.adaptive_avg_pool(fused)?);
        }
        let mut x = tape.concat(&pooled, 1)?;
        for i in 0..4 {
            x = tape.conv2d(x, b.var(CLASSIFIER + i), 1, 0)?;
            if i < 3 {
                x = tape.tanh(x)?;
            }
        }
        let x = tape.conv2d(x, b.var(HEAD), 1, 0)?;
        let batch = tape.value(x).shape()[0];
        tape.reshape(x, &[batch, self.config.n])
    }

    /// Weights from content (`B x 3 x H x W`) and style (`1` or `B` images).
    pub fn predict_weights(&self, tape: &mut Tape<T>, b: &Bound, content: Var, style: Var) -> Result<Var> {
        let pc = self.extractor.extract(tape, content)?;
        let ps = self.extractor.extract(tape, style)?;
        self.predict_from_pyramids(tape, b, &pc, &ps)
    }

    /// Mixes the bank with `B x N` weights and reconstructs `B` lattices.
    pub fn lut_from_weights(&self, tape: &mut Tape<T>, b: &Bound, weights: Var) -> Result<Var> {
        let psi = tape.matmul(weights, b.var(BANK))?;
        clut::reconstruct_node(tape, psi, b.var(M_S), b.var(M_W))
    }

    /// Full training graph: pyramids, predicted (or supplied) weights, the
    /// lattice batch and the recolored content.
    ///
    /// `direct` replaces the predictor with a `1 x N` weight row shared by
    /// the batch.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        content: Var,
        style: Var,
        direct: Option<Var>,
    ) -> Result<Forward> {
        let pc = self.extractor.extract(tape, content)?;
        let ps = self.extractor.extract(tape, style)?;
        let weights = match direct {
            Some(w) => {
                let batch = tape.value(content).shape()[0];
                let ones = tape.constant(Tensor::full(&[batch, 1], T::one()));
                tape.matmul(ones, w)?
            }
            None => self.predict_from_pyramids(tape, b, &pc, &ps)?,
        };
        let lut = self.lut_from_weights(tape, b, weights)?;
        let stylized = tape.lut_apply(lut, content)?;
        Ok(Forward {
            content: pc,
            style: ps,
            weights,
            lut,
            stylized,
        })
    }

    /// Predicted weights for one content/style pair, both resized to the
    /// training resolution.
    pub fn predict_pair(&self, content: &Image<T>, style: &Image<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let c = tape.constant(Tensor::from_images(&[content.resize_bilinear(TRAIN_SIZE, TRAIN_SIZE)?])?);
        let s = tape.constant(Tensor::from_images(&[style.resize_bilinear(TRAIN_SIZE, TRAIN_SIZE)?])?);
        let w = self.predict_weights(&mut tape, &b, c, s)?;
        Ok(tape.value(w).data().to_vec())
    }

    /// The dense lattice for a weight vector, through the same mixing and
    /// reconstruction as training.
    pub fn lut_for_weights(&self, weights: &[T]) -> Result<Lut3D<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let w = tape.constant(Tensor::new(vec![1, weights.len()], weights.to_vec())?);
        let lut = self.lut_from_weights(&mut tape, &b, w)?;
        Lut3D::from_entries(self.config.dim, tape.value(lut).data().to_vec())
    }

    /// Predicts a lattice from the resized pair and applies it to the
    /// full-resolution content.
    pub fn stylize(&self, content: &Image<T>, style: &Image<T>) -> Result<(Image<T>, Lut3D<T>)> {
        let weights = self.predict_pair(content, style)?;
        let lut = self.lut_for_weights(&weights)?;
        Ok((lut.apply_image(content), lut))
    }
}

/// Adaptive instance normalization: re-standardizes `x` to the per-channel
/// mean and standard deviation of `y`. `y` may have batch 1 or the batch of
/// `x`.
pub fn adain<T: Real>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let ys = tape.value(y).shape().to_vec();
    if xs.len() != 4 || ys.len() != 4 || xs[1] != ys[1] || !(ys[0] == 1 || ys[0] == xs[0]) {
        return Err(Error::shape(format!("adain: content {xs:?} vs style {ys:?}")));
    }
    let (xv, yv) = (tape.value(x), tape.value(y));
    let (xm, ym) = (xs[2] * xs[3], ys[2] * ys[3]);
    let (c, yb) = (xs[1], ys[0]);
    let ystats: Vec<(T, T)> = yv.data().chunks(ym).map(plane_stats).collect();
    let mut out = vec![T::zero(); xv.numel()];
    for (plane, (src, dst)) in xv.data().chunks(xm).zip(out.chunks_mut(xm)).enumerate() {
        let (mx, sx) = plane_stats(src);
        let (my, sy) = ystats[if yb == 1 { plane % c } else { plane }];
        let gain = sy / sx;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mx) * gain + my;
        }
    }
    let value = Tensor::new(xs, out)?;
    tape.custom(Box::new(AdaIn), &[x, y], value)
}

/// Mean and eps-guarded population standard deviation of one plane.
fn plane_stats<T: Real>(p: &[T]) -> (T, T) {
    let inv = T::one() / T::of_usize(p.len());
    let mu = p.iter().copied().sum::<T>() * inv;
    let var = p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
    (mu, (var + T::lit(STATS_EPS)).sqrt())
}

struct AdaIn;

impl<T: Real> CustomOp<T> for AdaIn {
    fn name(&self) -> &'static str {
        "adain"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        wanted: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, y) = (inputs[0], inputs[1]);
        let (c, xm) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
        let (yb, ym) = (y.shape()[0], y.shape()[2] * y.shape()[3]);
        let ystats: Vec<(T, T)> = y.data().chunks(ym).map(plane_stats).collect();
        let inv = T::one() / T::of_usize(xm);
        let mut dx = vec![T::zero(); x.numel()];
        // Per style plane: gradients w.r.t. its mean and std.
        let mut dstats = vec![(T::zero(), T::zero()); ystats.len()];
        for (plane, ((src, g), dst)) in x.data().chunks(xm).zip(grad.data().chunks(xm)).zip(dx.chunks_mut(xm)).enumerate() {
            let (mx, sx) = plane_stats(src);
            let yi = if yb == 1 { plane % c } else { plane };
            let sy = ystats[yi].1;
            let (mut gsum, mut gxhat) = (T::zero(), T::zero());
            for (&v, &gv) in src.iter().zip(g) {
                gsum += gv;
                gxhat += gv * (v - mx) / sx;
            }
            dstats[yi].0 += gsum;
            dstats[yi].1 += gxhat;
            if wanted[0] {
                let (gmean, gxmean, gain) = (gsum * inv, gxhat * inv, sy / sx);
                for ((d, &v), &gv) in dst.iter_mut().zip(src).zip(g) {
                    *d = gain * (gv - gmean - (v - mx) / sx * gxmean);
                }
            }
        }
        let dy = if wanted[1] {
            let inv_y = T::one() / T::of_usize(ym);
            let mut dy = vec![T::zero(); y.numel()];
            for (((src, dst), &(my, sy)), &(dmu, dsigma)) in
                y.data().chunks(ym).zip(dy.chunks_mut(ym)).zip(&ystats).zip(&dstats)
            {
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = dmu * inv_y + dsigma * (v - my) * inv_y / sy;
                }
            }
            Some(Tensor::new(y.shape().to_vec(), dy)?)
        } else {
            None
        };
        let dx = if wanted[0] { Some(Tensor::new(x.shape().to_vec(), dx)?) } else { None };
        Ok(vec![dx, dy])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            profile: Profile::Desk,
            feature_seed: 3,
            dim: 4,
            n: 3,
            s: 2,
            w: 2,
        }
    }

    fn stats(t: &Tensor<f64>) -> Vec<(f64, f64)> {
        let (_, _, h, w) = t.nchw().unwrap();
        t.data()
            .chunks(h * w)
            .map(|p| {
                let m = p.iter().sum::<f64>() / p.len() as f64;
                let v = p.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / p.len() as f64;
                (m, v.sqrt())
            })
            .collect()
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn adain_self_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(rand_t(&[2, 3, 4, 4], 1));
        let y = adain(&mut tape, x, x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn adain_constant_style_collapses_to_its_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(rand_t(&[1, 2, 4, 4], 2));
        let y = tape.constant(Tensor::new(vec![1, 2, 1, 2], vec![0.3, 0.3, 0.7, 0.7]).unwrap());
        let out = adain(&mut tape, x, y).unwrap();
        let d = tape.value(out).data();
        assert!(d[..16].iter().all(|v| (v - 0.3).abs() < 1e-2));
        assert!(d[16..].iter().all(|v| (v - 0.7).abs() < 1e-2));
    }

    #[test]
    fn adain_transfers_statistics() {
        // x with mean 0.5, std 0.1; y with mean 0.2, std 0.3 (alternating).
        let xd: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 0.4 } else { 0.6 }).collect();
        let yd: Vec<f64> = (0..64).map(|i| if (i / 3) % 2 == 0 { -0.1 } else { 0.5 }).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 8, 8], xd).unwrap());
        let y = tape.constant(Tensor::new(vec![1, 1, 8, 8], yd).unwrap());
        let (ym, ys) = stats(tape.value(y))[0];
        let out = adain(&mut tape, x, y).unwrap();
        let (m, s) = stats(tape.value(out))[0];
        assert!((m - ym).abs() < 1e-3 && (s - ys).abs() < 1e-3, "{m} {s} vs {ym} {ys}");
        assert!((stats(tape.value(x))[0].1 - 0.1).abs() < 1e-12);
    }

    fn adain_composed(tape: &mut Tape<f64>, x: Var, y: Var) -> Var {
        let xs = tape.value(x).shape().to_vec();
        let mx = tape.channel_mean(x).unwrap();
        let sx = tape.channel_std(x, STATS_EPS).unwrap();
        let my = tape.channel_mean(y).unwrap();
        let sy = tape.channel_std(y, STATS_EPS).unwrap();
        let [mx, sx, my, sy] = [mx, sx, my, sy].map(|v| tape.broadcast(v, &xs).unwrap());
        let centered = tape.sub(x, mx).unwrap();
        let normalized = tape.div(centered, sx).unwrap();
        let scaled = tape.mul(normalized, sy).unwrap();
        tape.add(scaled, my).unwrap()
    }

    #[test]
    fn adain_matches_composed_ops_and_gradients() {
        for style_batch in [1, 2] {
            let x = rand_t(&[2, 3, 4, 4], 11).cast::<f64>();
            let y = rand_t(&[style_batch, 3, 2, 3], 12).cast::<f64>();
            let probe = rand_t(&[2, 3, 4, 4], 13).cast::<f64>();
            let mut tape = Tape::new();
            let (xv, yv) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
            let fused = adain(&mut tape, xv, yv).unwrap();
            let composed = adain_composed(&mut tape, xv, yv);
            for (a, b) in tape.value(fused).data().iter().zip(tape.value(composed).data()) {
                assert!((a - b).abs() < 1e-12);
            }
            gradcheck::check(&[x, y, probe], |t, v| {
                let out = adain(t, v[0], v[1])?;
                let prod = t.mul(out, v[2])?;
                t.sum(prod)
            });
        }
    }

    #[test]
    fn adain_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(rand_t(&[1, 2, 4, 4], 1));
        let y = tape.constant(rand_t(&[1, 3, 4, 4], 2));
        assert!(adain(&mut tape, x, y).is_err());
    }

    #[test]
    fn splat_contracts() {
        let model = NlutModel::<f64>::new(tiny_config(), 1).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, |_| false);
        let f = tape.constant(rand_t(&[1, 16, 8, 8], 4));
        let same = model.splat(&mut tape, &b, 0, f, f).unwrap();
        assert_eq!(tape.value(same).shape(), &[1, 64, 4, 4]);

        // Equal inputs: AdaIN returns the conv path unchanged.
        let ka = b.var(0);
        let kb = b.var(1);
        let y = tape.conv2d(f, ka, 2, 1).unwrap();
        let y = tape.tanh(y).unwrap();
        let y = tape.conv2d(y, kb, 1, 0).unwrap();
        let y = tape.tanh(y).unwrap();
        for (a, b) in tape.value(same).data().iter().zip(tape.value(y).data()) {
            assert!((a - b).abs() < 1e-4);
        }

        // Zero content: every position carries the style path's channel mean.
        let zero = tape.constant(Tensor::zeros(&[1, 16, 8, 8]));
        let fs = tape.constant(rand_t(&[1, 16, 8, 8], 5));
        let out = model.splat(&mut tape, &b, 0, zero, fs).unwrap();
        let s = tape.conv2d(fs, ka, 2, 1).unwrap();
        let s = tape.tanh(s).unwrap();
        let s = tape.conv2d(s, kb, 1, 0).unwrap();
        let s = tape.tanh(s).unwrap();
        let means: Vec<f64> = stats(tape.value(s)).iter().map(|p| p.0).collect();
        for (c, chunk) in tape.value(out).data().chunks(16).enumerate() {
            assert!(chunk.iter().all(|v| (v - means[c]).abs() < 1e-6));
        }
    }

    #[test]
    fn weights_are_deterministic_and_batch_invariant() {
        let model = NlutModel::<f32>::new(tiny_config(), 2).unwrap();
        let img = Image::from_fn(16, 16, |x, y| {
            crate::lut::Rgb::new(x as f32 / 16.0, y as f32 / 16.0, 0.5)
        })
        .unwrap();
        let style = Image::filled(16, 16, crate::lut::Rgb::new(0.8, 0.1, 0.1)).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, |_| false);
        let c = tape.constant(Tensor::from_images(&[img.clone(), img.clone()]).unwrap());
        let s = tape.constant(Tensor::from_images(&[style.clone()]).unwrap());
        let w = model.predict_weights(&mut tape, &b, c, s).unwrap();
        let d = tape.value(w).data();
        assert_eq!(tape.value(w).shape(), &[2, 3]);
        assert_eq!(d[..3], d[3..]);
        let again = model.predict_pair(&img, &style).unwrap();
        assert_eq!(again, model.predict_pair(&img, &style).unwrap());
        assert_eq!(again.len(), 3);
    }

    #[test]
    fn zero_bank_is_identity_and_lut_reproduces_image() {
        let mut model = NlutModel::<f32>::new(tiny_config(), 3).unwrap();
        model.params_mut()[BANK].value.data_mut().fill(0.0);
        let img = Image::from_fn(24, 16, |x, y| {
            crate::lut::Rgb::new(x as f32 / 24.0, y as f32 / 16.0, 0.3)
        })
        .unwrap();
        let style = Image::filled(8, 8, crate::lut::Rgb::new(0.8, 0.1, 0.1)).unwrap();
        let (out, lut) = model.stylize(&img, &style).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a.r - b.r).abs() < 1e-5 && (a.g - b.g).abs() < 1e-5 && (a.b - b.b).abs() < 1e-5);
        }

        let model = NlutModel::<f32>::new(tiny_config(), 3).unwrap();
        let (out, lut2) = model.stylize(&img, &style).unwrap();
        assert_ne!(lut, lut2);
        assert_eq!(lut2.apply_image(&img), out);
    }

    #[test]
    fn from_params_checks_layout() {
        let model = NlutModel::<f32>::new(tiny_config(), 3).unwrap();
        let mut params = model.into_params();
        assert!(NlutModel::from_params(tiny_config(), params.clone()).is_ok());
        params.swap(0, 1);
        assert!(NlutModel::from_params(tiny_config(), params).is_err());
    }

    #[test]
    fn splat_gradients_check() {
        let model = NlutModel::<f64>::new(tiny_config(), 5).unwrap();
        let ka = model.params()[0].value.clone();
        let kb = model.params()[1].value.clone();
        let inputs = vec![ka, kb, rand_t(&[2, 16, 4, 4], 6), rand_t(&[1, 16, 4, 4], 7), rand_t(&[2, 64, 2, 2], 8)];
        gradcheck::check(&inputs, |t, v| {
            let mut path = |x: Var| -> Result<Var> {
                let y = t.conv2d(x, v[0], 2, 1)?;
                let y = t.tanh(y)?;
                let y = t.conv2d(y, v[1], 1, 0)?;
                t.tanh(y)
            };
            let c = path(v[2])?;
            let s = path(v[3])?;
            let fused = adain(t, c, s)?;
            let p = t.mul(fused, v[4])?;
            t.sum(p)
        });
    }
}
