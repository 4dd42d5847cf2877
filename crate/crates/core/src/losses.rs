//! Training objectives: feature-statistics style loss, last-level content
//! loss and two lattice regularizers.

use crate::features::FeaturePyramid;
use crate::lut::Lut3D;
use crate::network::STATS_EPS;
use crate::tensor::{CustomOp, Tape, Tensor, Var};
use crate::{Error, Real, Result};

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub style: f64,
    pub content: f64,
    pub smooth: f64,
    pub mono: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            style: 1.0,
            content: 4.0,
            smooth: 1e-4,
            mono: 10.0,
        }
    }
}

impl LossWeights {
    /// Test-time training preset. Both feature losses are unsquared norms,
    /// so at the identity start a content weight above the style weight (or
    /// any sizable monotonicity weight on the summed penalty) pins the
    /// lattice in place.
    pub fn finetune() -> Self {
        Self {
            content: 0.5,
            mono: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.style, self.content, self.smooth, self.mono];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "loss weights must be finite and nonnegative, got {all:?}"
            )));
        }
        if self.style == 0.0 && self.content == 0.0 {
            return Err(Error::InvalidInput(
                "at least one of the style and content weights must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Weighted total of already evaluated terms.
    pub fn combine(&self, style: f64, content: f64, smooth: f64, mono: f64) -> Result<LossReport> {
        for (name, v) in [("style", style), ("content", content), ("smooth", smooth), ("mono", mono)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{name} loss is {v}")));
            }
        }
        Ok(LossReport {
            style,
            content,
            smooth,
            mono,
            total: self.style * style + self.content * content + self.smooth * smooth + self.mono * mono,
        })
    }
}

/// Values of every term of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub style: f64,
    pub content: f64,
    pub smooth: f64,
    pub mono: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,style,content,smooth,mono,total";

    pub fn csv_row(&self, iter: usize) -> String {
        format!(
            "{iter},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.style, self.content, self.smooth, self.mono, self.total
        )
    }
}

/// Tape handles of the four terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub style: Var,
    pub content: Var,
    pub smooth: Var,
    pub mono: Var,
}

/// Broadcasts a `1 x ...` tensor to the batch of `like` when needed.
fn match_batch<T: Real>(tape: &mut Tape<T>, x: Var, like: Var) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let ls = tape.value(like).shape().to_vec();
    if xs == ls {
        return Ok(x);
    }
    if xs.len() == ls.len() && xs[0] == 1 && xs[1..] == ls[1..] {
        return tape.broadcast(x, &ls);
    }
    Err(Error::shape(format!("feature shapes {xs:?} and {ls:?} do not match")))
}

/// Sum over the four levels of the L2 distances between per-channel means
/// and between per-channel standard deviations, averaged over the batch.
/// `target` may hold a single image shared by the whole batch.
pub fn style_loss<T: Real>(tape: &mut Tape<T>, target: &FeaturePyramid, stylized: &FeaturePyramid) -> Result<Var> {
    let eps = T::lit(STATS_EPS);
    let mut terms = Vec::with_capacity(8);
    for (&t, &s) in target.levels.iter().zip(&stylized.levels) {
        let (_, ct, _, _) = tape.value(t).nchw()?;
        let (_, cs, _, _) = tape.value(s).nchw()?;
        if ct != cs {
            return Err(Error::shape(format!("style loss: {ct} vs {cs} channels")));
        }
        let mt = tape.channel_mean(t)?;
        let ms = tape.channel_mean(s)?;
        let mt = match_batch(tape, mt, ms)?;
        let dm = tape.sub(mt, ms)?;
        terms.push(tape.row_norms(dm)?);
        let st = tape.channel_std(t, eps)?;
        let ss = tape.channel_std(s, eps)?;
        let st = match_batch(tape, st, ss)?;
        let ds = tape.sub(st, ss)?;
        terms.push(tape.row_norms(ds)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.mean(acc)
}

/// L2 distance between the last pyramid levels, averaged over the batch.
pub fn content_loss<T: Real>(tape: &mut Tape<T>, content: &FeaturePyramid, stylized: &FeaturePyramid) -> Result<Var> {
    let (c, s) = (content.levels[3], stylized.levels[3]);
    let c = match_batch(tape, c, s)?;
    let d = tape.sub(c, s)?;
    let norms = tape.row_norms(d)?;
    tape.mean(norms)
}

fn lattice_geometry<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, 3, d0, d1, d2] if d0 == d1 && d1 == d2 && d0 >= 2 => Ok((b, d0)),
        ref s => Err(Error::shape(format!("regularizers need B x 3 x D x D x D, got {s:?}"))),
    }
}

/// Flat offset step along input axis `axis` (0 red, 1 green, 2 blue).
fn axis_stride(d: usize, axis: usize) -> usize {
    [d * d, d, 1][axis]
}

/// Calls `f(prev_index, next_index)` for every adjacent pair along `axis`
/// inside one `D x D x D` channel.
fn for_each_pair(d: usize, axis: usize, mut f: impl FnMut(usize, usize)) {
    let step = axis_stride(d, axis);
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                if [i, j, k][axis] + 1 < d {
                    let idx = (i * d + j) * d + k;
                    f(idx, idx + step);
                }
            }
        }
    }
}

fn smooth_value<T: Real>(e: &[T], d: usize) -> T {
    let n = d * d * d;
    let mut acc = T::zero();
    for c in 0..3 {
        let ch = &e[c * n..(c + 1) * n];
        for axis in 0..3 {
            for_each_pair(d, axis, |p, q| {
                let diff = ch[q] - ch[p];
                acc += diff * diff;
            });
        }
    }
    acc
}

fn smooth_grad<T: Real>(e: &[T], d: usize, scale: T, out: &mut [T]) {
    let n = d * d * d;
    let two = T::lit(2.0) * scale;
    for c in 0..3 {
        let ch = &e[c * n..(c + 1) * n];
        let g = &mut out[c * n..(c + 1) * n];
        for axis in 0..3 {
            for_each_pair(d, axis, |p, q| {
                let diff = two * (ch[q] - ch[p]);
                g[q] += diff;
                g[p] -= diff;
            });
        }
    }
}

fn mono_value<T: Real>(e: &[T], d: usize) -> T {
    let n = d * d * d;
    let mut acc = T::zero();
    for c in 0..3 {
        let ch = &e[c * n..(c + 1) * n];
        for_each_pair(d, c, |p, q| acc += (ch[p] - ch[q]).max(T::zero()));
    }
    acc
}

fn mono_grad<T: Real>(e: &[T], d: usize, scale: T, out: &mut [T]) {
    let n = d * d * d;
    for c in 0..3 {
        let ch = &e[c * n..(c + 1) * n];
        let g = &mut out[c * n..(c + 1) * n];
        for_each_pair(d, c, |p, q| {
            if ch[p] > ch[q] {
                g[p] += scale;
                g[q] -= scale;
            }
        });
    }
}

/// Sum of squared differences between neighboring lattice entries along
/// every axis of every channel.
pub fn smooth_reg<T: Real>(lut: &Lut3D<T>) -> T {
    smooth_value(lut.entries(), lut.dim())
}

/// Sum of decreases of each output channel along its own input axis.
pub fn mono_reg<T: Real>(lut: &Lut3D<T>) -> T {
    mono_value(lut.entries(), lut.dim())
}

#[derive(Clone, Copy)]
enum Reg {
    Smooth,
    Mono,
}

struct RegOp(Reg);

impl<T: Real> CustomOp<T> for RegOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Reg::Smooth => "smooth_reg",
            Reg::Mono => "mono_reg",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _wanted: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let lut = inputs[0];
        let (b, d) = lattice_geometry(lut)?;
        let len = 3 * d * d * d;
        let scale = grad.item() / T::of_usize(b);
        let mut out = vec![T::zero(); lut.numel()];
        for (e, g) in lut.data().chunks(len).zip(out.chunks_mut(len)) {
            match self.0 {
                Reg::Smooth => smooth_grad(e, d, scale, g),
                Reg::Mono => mono_grad(e, d, scale, g),
            }
        }
        Ok(vec![Some(Tensor::new(lut.shape().to_vec(), out)?)])
    }
}

fn reg_node<T: Real>(tape: &mut Tape<T>, lut: Var, reg: Reg) -> Result<Var> {
    let (b, d) = lattice_geometry(tape.value(lut))?;
    let len = 3 * d * d * d;
    let total: T = tape
        .value(lut)
        .data()
        .chunks(len)
        .map(|e| match reg {
            Reg::Smooth => smooth_value(e, d),
            Reg::Mono => mono_value(e, d),
        })
        .sum();
    let value = Tensor::scalar(total / T::of_usize(b));
    tape.custom(Box::new(RegOp(reg)), &[lut], value)
}

/// Batch mean of [`smooth_reg`] over a `B x 3 x D x D x D` lattice batch.
pub fn smooth_reg_node<T: Real>(tape: &mut Tape<T>, lut: Var) -> Result<Var> {
    reg_node(tape, lut, Reg::Smooth)
}

/// Batch mean of [`mono_reg`] over a `B x 3 x D x D x D` lattice batch.
pub fn mono_reg_node<T: Real>(tape: &mut Tape<T>, lut: Var) -> Result<Var> {
    reg_node(tape, lut, Reg::Mono)
}

/// Evaluates all terms for one forward pass.
pub fn loss_terms<T: Real>(
    tape: &mut Tape<T>,
    content: &FeaturePyramid,
    style: &FeaturePyramid,
    stylized: &FeaturePyramid,
    lut: Var,
) -> Result<LossTerms> {
    Ok(LossTerms {
        style: style_loss(tape, style, stylized)?,
        content: content_loss(tape, content, stylized)?,
        smooth: smooth_reg_node(tape, lut)?,
        mono: mono_reg_node(tape, lut)?,
    })
}

/// Weighted sum of the terms on the tape, plus a report of their values.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, weights: &LossWeights, terms: &LossTerms) -> Result<(Var, LossReport)> {
    let parts = [terms.style, terms.content, terms.smooth, terms.mono];
    let vals: Vec<f64> = parts
        .iter()
        .map(|&v| tape.value(v).item().to_f64().unwrap_or(f64::NAN))
        .collect();
    let lambdas = [weights.style, weights.content, weights.smooth, weights.mono];
    let report = weights.combine(vals[0], vals[1], vals[2], vals[3])?;
    let mut total: Option<Var> = None;
    for (&v, &l) in parts.iter().zip(&lambdas) {
        let scaled = tape.scale(v, T::lit(l))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok((total.expect("four terms"), report))
}
