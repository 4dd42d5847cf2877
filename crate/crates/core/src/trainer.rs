//! Optimization: Adam, corpus pretraining, per-video fine-tuning and the
//! checkpoint container.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::Profile;
use crate::losses::{loss_terms, total_loss, LossReport, LossWeights};
use crate::lut::{Image, Lut3D};
use crate::network::{ModelConfig, NlutModel, Param, BANK, M_S, M_W, TRAIN_SIZE};
use crate::tensor::{Tape, Tensor};
use crate::video::read_image;
use crate::{Error, Real, Result};

pub const DEFAULT_LR: f64 = 1e-4;
pub const PRETRAIN_BATCH: usize = 6;
pub const PRETRAIN_ITERS: usize = 2000;
/// Iteration count of a full-scale pretrain with the paper profile.
pub const FULL_PRETRAIN_ITERS: usize = 350_000;
pub const FINETUNE_BATCH: usize = 8;
pub const FINETUNE_ITERS: usize = 20;
/// Peak fine-tune rate, annealed by a half cosine. A lattice near identity
/// sits on a saddle; 1e-4 never leaves it in 20 steps, and 3e-3 or more
/// escapes, overshoots and falls back.
pub const FINETUNE_LR: f64 = 2e-3;
pub const CLIP_NORM: f64 = 5.0;
pub const DEFAULT_SEED: u64 = 7;

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

/// One parameter array handed to [`Adam::step`]. Arrays without a gradient
/// are left untouched.
pub struct Slot<'a, T> {
    pub name: &'a str,
    pub value: &'a mut [T],
    pub grad: Option<&'a [T]>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Slots must come in the same order every call.
    pub fn step(&mut self, slots: &mut [Slot<'_, T>]) -> Result<()> {
        for s in slots.iter() {
            if let Some(g) = s.grad {
                if g.len() != s.value.len() {
                    return Err(Error::shape(format!(
                        "gradient of {} has {} values, parameter has {}",
                        s.name,
                        g.len(),
                        s.value.len()
                    )));
                }
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient {} in {} at index {i} (step {})",
                        g[i],
                        s.name,
                        self.step + 1
                    )));
                }
            }
        }
        if self.m.len() != slots.len() {
            self.m = slots.iter().map(|s| vec![T::zero(); s.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::lit(1.0 - self.beta1.powi(t));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for ((s, m), v) in slots.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = s.grad else { continue };
            for (((p, &g), m), v) in s.value.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub iterations: usize,
    /// Side length of the square training images.
    pub resize: usize,
    pub seed: u64,
    pub lr: f64,
    /// Train the basis CLUTs.
    pub update_basis: bool,
    /// Train the expansion matrices.
    pub update_matrices: bool,
    /// Optimize one free weight row instead of the predictor (fine-tune only).
    pub direct_weights: bool,
    pub loss: LossWeights,
    pub clip_norm: f64,
    /// Anneal the learning rate from `lr` to zero along a half cosine.
    pub cosine_decay: bool,
    /// CSV file receiving one loss row per iteration.
    pub loss_log: Option<PathBuf>,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            batch_size: PRETRAIN_BATCH,
            iterations: PRETRAIN_ITERS,
            resize: TRAIN_SIZE,
            seed: DEFAULT_SEED,
            lr: DEFAULT_LR,
            update_basis: true,
            update_matrices: true,
            direct_weights: false,
            loss: LossWeights::default(),
            clip_norm: CLIP_NORM,
            cosine_decay: false,
            loss_log: None,
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            batch_size: FINETUNE_BATCH,
            iterations: FINETUNE_ITERS,
            lr: FINETUNE_LR,
            update_matrices: false,
            loss: LossWeights::finetune(),
            cosine_decay: true,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        if self.resize == 0 || self.resize % 8 != 0 {
            return Err(Error::InvalidInput(format!(
                "training size {} must be a positive multiple of 8",
                self.resize
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidInput(format!("learning rate {} must be positive", self.lr)));
        }
        self.loss.validate()
    }

    fn trainable(&self, name: &str) -> bool {
        match name {
            "bank" => self.update_basis,
            "m_s" | "m_w" => self.update_matrices,
            _ => !self.direct_weights,
        }
    }
}

const MAGIC: &[u8; 8] = b"NLUTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIRECT_WEIGHTS: &str = "direct_weights";

/// Everything needed to resume or deploy a model.
#[derive(Clone)]
pub struct Checkpoint {
    pub model: NlutModel<f32>,
    /// Free weight row left by a direct-weights fine-tune.
    pub direct_weights: Option<Vec<f32>>,
    /// Training notes. Architecture keys are written separately.
    pub meta: BTreeMap<String, String>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint")
            .field("config", self.model.config())
            .field("direct_weights", &self.direct_weights)
            .field("meta", &self.meta)
            .finish()
    }
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.model.config() == other.model.config()
            && self.model.params() == other.model.params()
            && self.direct_weights == other.direct_weights
            && self.meta == other.meta
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(Error::Checkpoint(format!(
                "file truncated: {what} needs {n} bytes, only {left} left"
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn meta_get<'m>(meta: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("metadata is missing {key:?}")))
}

fn meta_num<N: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<N> {
    let v = meta_get(meta, key)?;
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("metadata {key}={v:?} is not a number")))
}

impl Checkpoint {
    pub fn new(model: NlutModel<f32>) -> Self {
        Self {
            model,
            direct_weights: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    fn arrays(&self) -> Vec<(&str, Vec<usize>, &[f32])> {
        let mut out: Vec<(&str, Vec<usize>, &[f32])> = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.as_str(), p.value.shape().to_vec(), p.value.data()))
            .collect();
        if let Some(w) = &self.direct_weights {
            out.push((DIRECT_WEIGHTS, vec![1, w.len()], w));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.model.config();
        let mut meta = self.meta.clone();
        meta.insert("profile".into(), c.profile.name().into());
        meta.insert("feature_seed".into(), c.feature_seed.to_string());
        meta.insert("dim".into(), c.dim.to_string());
        meta.insert("n".into(), c.n.to_string());
        meta.insert("s".into(), c.s.to_string());
        meta.insert("w".into(), c.w.to_string());
        let meta_text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let arrays = self.arrays();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
        out.extend_from_slice(meta_text.as_bytes());
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, shape, _) in &arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for (_, _, data) in &arrays {
            for v in *data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let mut meta: BTreeMap<String, String> = meta_text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let profile: Profile = meta_get(&meta, "profile")?
            .parse()
            .map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
        let config = ModelConfig {
            profile,
            feature_seed: meta_num(&meta, "feature_seed")?,
            dim: meta_num(&meta, "dim")?,
            n: meta_num(&meta, "n")?,
            s: meta_num(&meta, "s")?,
            w: meta_num(&meta, "w")?,
        };
        for key in ["profile", "feature_seed", "dim", "n", "s", "w"] {
            meta.remove(key);
        }

        let count = r.u32("array count")? as usize;
        let mut manifest = Vec::with_capacity(count);
        for i in 0..count {
            let what = format!("manifest entry {i}");
            let name_len = r.u16(&what)? as usize;
            let name = String::from_utf8(r.take(name_len, &what)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{what} has a non-UTF-8 name")))?;
            let ndim = r.u8(&what)? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32(&format!("shape of {name}")).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut params = Vec::new();
        let mut direct_weights = None;
        for (name, shape) in manifest {
            let numel: usize = shape.iter().product();
            let raw = r.take(4 * numel, &format!("array {name}"))?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            if name == DIRECT_WEIGHTS {
                direct_weights = Some(data);
            } else {
                let value = Tensor::new(shape, data)
                    .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
                params.push(Param { name, value });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} unexpected trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let model = NlutModel::from_params(config, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(w) = &direct_weights {
            if w.len() != config.n {
                return Err(Error::Checkpoint(format!(
                    "direct weights have {} entries, model has N={}",
                    w.len(),
                    config.n
                )));
            }
        }
        Ok(Self {
            model,
            direct_weights,
            meta,
        })
    }

    /// Writes to a temporary file next to `path`, then renames it over.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut f = BufWriter::new(fs::File::create(&tmp)?);
            f.write_all(&self.to_bytes())?;
            f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a checkpoint. The stored profile wins over `requested`; a
    /// disagreement is logged.
    pub fn load(path: &Path, requested: Option<Profile>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ckpt = Self::from_bytes(&bytes)?;
        if let Some(p) = requested {
            if p != ckpt.config().profile {
                log::warn!(
                    "{} was trained with the {} profile; ignoring requested {p}",
                    path.display(),
                    ckpt.config().profile
                );
            }
        }
        Ok(ckpt)
    }

    /// The lattice this checkpoint produces for a pair without further
    /// training.
    pub fn predict_lut(&self, keyframe: &Image, style: &Image) -> Result<Lut3D> {
        let weights = match &self.direct_weights {
            Some(w) => w.clone(),
            None => self.model.predict_pair(keyframe, style)?,
        };
        self.model.lut_for_weights(&weights)
    }
}

/// Output of [`pretrain`].
#[derive(Debug)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    /// Loss of each iteration's batch before its update.
    pub history: Vec<LossReport>,
}

/// Output of [`finetune`].
#[derive(Debug)]
pub struct FineTuned {
    pub checkpoint: Checkpoint,
    pub lut: Lut3D,
    pub history: Vec<LossReport>,
}

struct LossLog(Option<BufWriter<fs::File>>);

impl LossLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self(None)) };
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "{}", LossReport::CSV_HEADER)?;
        Ok(Self(Some(w)))
    }

    fn row(&mut self, iter: usize, r: &LossReport) -> Result<()> {
        if let Some(w) = &mut self.0 {
            writeln!(w, "{}", r.csv_row(iter))?;
            w.flush()?;
        }
        Ok(())
    }
}

/// One optimization step on a batch. Returns the loss before the update.
fn train_step(
    model: &mut NlutModel<f32>,
    direct: Option<&mut Vec<f32>>,
    cfg: &TrainConfig,
    adam: &mut Adam<f32>,
    content: Tensor<f32>,
    style: Tensor<f32>,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |n| cfg.trainable(n));
    let dvar = direct
        .as_ref()
        .map(|w| Tensor::new(vec![1, w.len()], w.to_vec()).map(|t| tape.leaf(t)))
        .transpose()?;
    let c = tape.constant(content);
    let s = tape.constant(style);
    let fwd = model.forward(&mut tape, &b, c, s, dvar)?;
    let sed = model.extractor().extract(&mut tape, fwd.stylized)?;
    let terms = loss_terms(&mut tape, &fwd.content, &fwd.style, &sed, fwd.lut)?;
    let (total, report) = total_loss(&mut tape, &cfg.loss, &terms)?;
    let mut grads = tape.backward(total)?;

    let mut all: Vec<Option<Tensor<f32>>> = b.vars().iter().map(|&v| grads.take(v)).collect();
    if let Some(v) = dvar {
        all.push(grads.take(v));
    }
    drop(tape);
    let norm = clip_global_norm(&mut all, cfg.clip_norm);
    log::debug!("gradient norm {norm:.4e}");

    let mut slots: Vec<Slot<'_, f32>> = model
        .params_mut()
        .iter_mut()
        .zip(&all)
        .map(|(p, g)| Slot {
            name: p.name.as_str(),
            value: p.value.data_mut(),
            grad: g.as_ref().map(|t| t.data()),
        })
        .collect();
    if let Some(w) = direct {
        slots.push(Slot {
            name: DIRECT_WEIGHTS,
            value: w.as_mut_slice(),
            grad: all.last().and_then(|g| g.as_ref()).map(|t| t.data()),
        });
    }
    adam.step(&mut slots)?;
    Ok(report)
}

fn train_meta(cfg: &TrainConfig, history: &[LossReport]) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("train.stage".into(), cfg.stage.name().into());
    m.insert("train.iterations".into(), cfg.iterations.to_string());
    m.insert("train.batch_size".into(), cfg.batch_size.to_string());
    m.insert("train.seed".into(), cfg.seed.to_string());
    m.insert("train.lr".into(), cfg.lr.to_string());
    m.insert("train.resize".into(), cfg.resize.to_string());
    m.insert("train.update_basis".into(), cfg.update_basis.to_string());
    m.insert("train.update_matrices".into(), cfg.update_matrices.to_string());
    if let Some(last) = history.last() {
        m.insert("train.last_total".into(), format!("{:e}", last.total));
    }
    m
}

/// Decodable images of a directory in name order. Files that fail to decode
/// are skipped with a warning.
pub fn load_corpus(dir: &Path) -> Result<Vec<Image>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::InvalidInput(format!("cannot read corpus {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut images = Vec::new();
    for f in files {
        match read_image(&f) {
            Ok(img) => images.push(img),
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    Ok(images)
}

fn stack(images: &[&Image]) -> Result<Tensor<f32>> {
    let owned: Vec<Image> = images.iter().map(|&i| i.clone()).collect();
    Tensor::from_images(&owned)
}

/// Pretrains a fresh model on the images of `corpus_dir`.
pub fn pretrain(corpus_dir: &Path, model: ModelConfig, cfg: &TrainConfig) -> Result<Trained> {
    let images = load_corpus(corpus_dir)?;
    pretrain_images(&images, model, cfg)
}

/// Pretrains on in-memory images. Each iteration draws content and style
/// images independently and uniformly.
pub fn pretrain_images(images: &[Image], model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if images.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "pretraining needs at least 2 decodable images, found {}",
            images.len()
        )));
    }
    let resized: Vec<Image> = images
        .iter()
        .map(|i| i.resize_bilinear(cfg.resize, cfg.resize))
        .collect::<Result<_>>()?;
    let mut model = NlutModel::<f32>::new(model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.lr);
    let mut log = LossLog::open(cfg.loss_log.as_deref())?;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        adam.lr = scheduled_lr(cfg, it);
        let pick = |rng: &mut ChaCha8Rng| -> Vec<&Image> {
            (0..cfg.batch_size).map(|_| &resized[rng.gen_range(0..resized.len())]).collect()
        };
        let content = stack(&pick(&mut rng))?;
        let style = stack(&pick(&mut rng))?;
        let report = train_step(&mut model, None, cfg, &mut adam, content, style)?;
        log::info!("pretrain {it}: total {:.5} style {:.5} content {:.5}", report.total, report.style, report.content);
        log.row(it, &report)?;
        history.push(report);
    }
    let mut checkpoint = Checkpoint::new(model);
    checkpoint.meta = train_meta(cfg, &history);
    Ok(Trained { checkpoint, history })
}

/// A random crop covering 50 to 100 percent of each side, resized to
/// `size x size`.
fn random_crop(img: &Image, size: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let f: f64 = rng.gen_range(0.5..=1.0);
    let w = ((img.width() as f64 * f).round() as usize).clamp(1, img.width());
    let h = ((img.height() as f64 * f).round() as usize).clamp(1, img.height());
    let x = rng.gen_range(0..=img.width() - w);
    let y = rng.gen_range(0..=img.height() - h);
    img.crop(x, y, w, h)?.resize_bilinear(size, size)
}

/// Test-time training on one video's keyframes and a style image.
///
/// Batches cycle through the keyframes; when the batch is larger than the
/// number of keyframes, the extra slots hold random crops of them. Returns
/// the tuned checkpoint and the lattice it predicts for keyframe 0.
pub fn finetune(ckpt: &Checkpoint, keyframes: &[Image], style: &Image, cfg: &TrainConfig) -> Result<FineTuned> {
    cfg.validate()?;
    if keyframes.is_empty() {
        return Err(Error::InvalidInput("fine-tuning needs at least one keyframe".into()));
    }
    let size = cfg.resize;
    let full: Vec<Image> = keyframes
        .iter()
        .map(|k| k.resize_bilinear(size, size))
        .collect::<Result<_>>()?;
    let style_t = Tensor::from_images(&[style.resize_bilinear(size, size)?])?;
    let mut model = ckpt.model.clone();
    let mut direct = if cfg.direct_weights {
        Some(match &ckpt.direct_weights {
            Some(w) => w.clone(),
            None => model.predict_pair(&keyframes[0], style)?,
        })
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut adam = Adam::new(cfg.lr);
    let mut log = LossLog::open(cfg.loss_log.as_deref())?;
    let mut history = Vec::with_capacity(cfg.iterations);
    let k = keyframes.len();
    for it in 0..cfg.iterations {
        adam.lr = scheduled_lr(cfg, it);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            if cfg.batch_size <= k {
                batch.push(full[(it * cfg.batch_size + slot) % k].clone());
            } else if slot < k {
                batch.push(full[slot].clone());
            } else {
                batch.push(random_crop(&keyframes[slot % k], size, &mut rng)?);
            }
        }
        let content = Tensor::from_images(&batch)?;
        let report = train_step(&mut model, direct.as_mut(), cfg, &mut adam, content, style_t.clone())?;
        log::info!("finetune {it}: total {:.5} style {:.5} content {:.5}", report.total, report.style, report.content);
        log.row(it, &report)?;
        history.push(report);
    }
    let mut checkpoint = Checkpoint::new(model);
    // Predictor-trained checkpoints drop any stale free weights.
    checkpoint.direct_weights = direct;
    checkpoint.meta = train_meta(cfg, &history);
    let lut = checkpoint.predict_lut(&keyframes[0], style)?;
    Ok(FineTuned {
        checkpoint,
        lut,
        history,
    })
}

fn scheduled_lr(cfg: &TrainConfig, it: usize) -> f64 {
    if cfg.cosine_decay {
        let t = it as f64 / cfg.iterations as f64;
        cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    } else {
        cfg.lr
    }
}

/// Loss terms of recoloring `content` with a fixed lattice, evaluated at
/// `size x size` against `style`.
pub fn evaluate_lut(
    model: &NlutModel<f32>,
    lut: &Lut3D,
    content: &Image,
    style: &Image,
    weights: &LossWeights,
    size: usize,
) -> Result<LossReport> {
    let c = content.resize_bilinear(size, size)?;
    let s = style.resize_bilinear(size, size)?;
    let mut tape = Tape::<f32>::new();
    let d = lut.dim();
    let lv = tape.constant(Tensor::new(vec![1, 3, d, d, d], lut.entries().to_vec())?);
    let cv = tape.constant(Tensor::from_images(&[c])?);
    let sv = tape.constant(Tensor::from_images(&[s])?);
    let sed = tape.lut_apply(lv, cv)?;
    let fx = model.extractor();
    let pc = fx.extract(&mut tape, cv)?;
    let ps = fx.extract(&mut tape, sv)?;
    let psed = fx.extract(&mut tape, sed)?;
    let terms = loss_terms(&mut tape, &pc, &ps, &psed, lv)?;
    Ok(total_loss(&mut tape, weights, &terms)?.1)
}

/// Indices of the arrays a configuration leaves frozen.
pub fn frozen_arrays(cfg: &TrainConfig) -> Vec<usize> {
    let mut out = Vec::new();
    if !cfg.update_basis {
        out.push(BANK);
    }
    if !cfg.update_matrices {
        out.extend([M_S, M_W]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lut::Rgb;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            profile: Profile::Desk,
            feature_seed: 1,
            dim: 5,
            n: 3,
            s: 4,
            w: 4,
        }
    }

    fn scalar_param(v: f64) -> Vec<f64> {
        vec![v]
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = scalar_param(0.0);
        let mut adam = Adam::<f64>::new(1e-4);
        adam.step(&mut [Slot { name: "x", value: &mut p, grad: Some(&[1.0]) }]).unwrap();
        assert!((p[0] + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = scalar_param(0.7);
        let mut adam = Adam::<f64>::new(1e-2);
        for _ in 0..5 {
            adam.step(&mut [Slot { name: "x", value: &mut p, grad: Some(&[0.0]) }]).unwrap();
        }
        assert_eq!(p[0], 0.7);
    }

    #[test]
    fn adam_shrinks_quadratic() {
        let mut p = scalar_param(1.0);
        let mut adam = Adam::<f64>::new(1e-2);
        for _ in 0..10 {
            let g = [2.0 * p[0]];
            adam.step(&mut [Slot { name: "x", value: &mut p, grad: Some(&g) }]).unwrap();
        }
        assert!(p[0].abs() < 1.0);
    }

    #[test]
    fn adam_rejects_nan_with_name() {
        let mut p = vec![0.0f32, 0.0];
        let mut adam = Adam::<f32>::new(1e-2);
        let err = adam
            .step(&mut [Slot { name: "classifier.head", value: &mut p, grad: Some(&[0.0, f32::NAN]) }])
            .unwrap_err()
            .to_string();
        assert!(err.contains("classifier.head") && err.contains("index 1"), "{err}");
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![
            Some(Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap()),
            None,
            Some(Tensor::new(vec![1], vec![12.0]).unwrap()),
        ];
        let n = clip_global_norm(&mut g, 5.0);
        assert!((n - 13.0).abs() < 1e-12);
        let after: f64 = g.iter().flatten().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let model = NlutModel::<f32>::new(tiny_model(), 3).unwrap();
        let mut ckpt = Checkpoint::new(model);
        ckpt.meta.insert("train.seed".into(), "3".into());
        ckpt.direct_weights = Some(vec![0.1, -0.2, 0.3]);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);

        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).unwrap_err().to_string();
        assert!(err.contains("direct_weights"), "{err}");
        // Cut inside the classifier head data.
        let head_end: usize = {
            let mut total = 0;
            let mut cut = 0;
            for p in back.model.params() {
                total += 4 * p.value.numel();
                if p.name == "classifier.head" {
                    cut = total;
                }
            }
            bytes.len() - 4 * 3 - (total - cut) - 4
        };
        let err = Checkpoint::from_bytes(&bytes[..head_end]).unwrap_err().to_string();
        assert!(err.contains("classifier.head"), "{err}");

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version 9"));
    }

    #[test]
    fn checkpoint_profile_comes_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint::new(NlutModel::<f32>::new(tiny_model(), 3).unwrap());
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path, Some(Profile::Paper)).unwrap();
        assert_eq!(back.config().profile, Profile::Desk);
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }

    fn small_cfg(stage: Stage) -> TrainConfig {
        let base = match stage {
            Stage::Pretrain => TrainConfig::pretrain(),
            Stage::Finetune => TrainConfig::finetune(),
        };
        TrainConfig {
            resize: 32,
            batch_size: 2,
            iterations: 3,
            ..base
        }
    }

    #[test]
    fn cosine_schedule_starts_at_peak_and_halves_midway() {
        let cfg = TrainConfig { iterations: 10, ..TrainConfig::finetune() };
        assert_eq!(scheduled_lr(&cfg, 0), cfg.lr);
        assert!((scheduled_lr(&cfg, 5) - cfg.lr / 2.0).abs() < 1e-12);
        assert!(scheduled_lr(&cfg, 9) < 0.03 * cfg.lr);
        let flat = TrainConfig { cosine_decay: false, ..cfg.clone() };
        assert_eq!(scheduled_lr(&flat, 9), flat.lr);
    }

    fn gradient_image(shift: f32) -> Image {
        Image::from_fn(40, 24, |x, y| Rgb::new(x as f32 / 40.0, y as f32 / 24.0, shift)).unwrap()
    }

    #[test]
    fn pretrain_is_deterministic() {
        let imgs = vec![gradient_image(0.2), gradient_image(0.8)];
        let cfg = small_cfg(Stage::Pretrain);
        let a = pretrain_images(&imgs, tiny_model(), &cfg).unwrap();
        let b = pretrain_images(&imgs, tiny_model(), &cfg).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.history.len(), 3);
        assert!(pretrain_images(&imgs[..1], tiny_model(), &cfg).is_err());
    }

    #[test]
    fn finetune_freezes_matrices_and_zero_iterations_is_prediction() {
        let ckpt = Checkpoint::new(NlutModel::<f32>::new(tiny_model(), 4).unwrap());
        let key = gradient_image(0.4);
        let style = Image::filled(16, 16, Rgb::new(0.8, 0.1, 0.1)).unwrap();
        let cfg = small_cfg(Stage::Finetune);
        let out = finetune(&ckpt, &[key.clone()], &style, &cfg).unwrap();
        for idx in frozen_arrays(&cfg) {
            assert_eq!(out.checkpoint.model.params()[idx], ckpt.model.params()[idx]);
        }
        assert_ne!(out.checkpoint.model.params()[BANK], ckpt.model.params()[BANK]);

        let zero = TrainConfig { iterations: 0, ..cfg.clone() };
        let out = finetune(&ckpt, &[key.clone()], &style, &zero).unwrap();
        assert_eq!(out.lut, ckpt.predict_lut(&key, &style).unwrap());

        let frozen = TrainConfig { update_basis: false, ..cfg };
        let out = finetune(&ckpt, &[key], &style, &frozen).unwrap();
        assert_eq!(out.checkpoint.model.params()[BANK], ckpt.model.params()[BANK]);
    }

    #[test]
    fn direct_weights_are_stored() {
        let ckpt = Checkpoint::new(NlutModel::<f32>::new(tiny_model(), 4).unwrap());
        let key = gradient_image(0.4);
        let style = Image::filled(16, 16, Rgb::new(0.1, 0.1, 0.8)).unwrap();
        let cfg = TrainConfig { direct_weights: true, ..small_cfg(Stage::Finetune) };
        let out = finetune(&ckpt, &[key.clone()], &style, &cfg).unwrap();
        let w = out.checkpoint.direct_weights.clone().unwrap();
        assert_ne!(w, ckpt.model.predict_pair(&key, &style).unwrap());
        assert_eq!(out.lut, out.checkpoint.model.lut_for_weights(&w).unwrap());
        // Network kernels are untouched in this mode.
        assert_eq!(out.checkpoint.model.params()[0], ckpt.model.params()[0]);
    }

    #[test]
    fn loss_log_has_one_row_per_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("loss.csv");
        let imgs = vec![gradient_image(0.2), gradient_image(0.8)];
        let cfg = TrainConfig { loss_log: Some(log.clone()), ..small_cfg(Stage::Pretrain) };
        pretrain_images(&imgs, tiny_model(), &cfg).unwrap();
        let text = fs::read_to_string(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LossReport::CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("2,"));
    }
}
