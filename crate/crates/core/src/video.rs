//! Frame sequences, LUT application over video, temporal consistency and
//! throughput benchmarking.
//!
//! Frames come from a directory of PNG/PPM files (lexicographic order) or a
//! raw interleaved 8-bit RGB file whose name carries its size, for example
//! `clip_1920x1080.rgb24`. Other containers can be converted with ffmpeg:
//!
//! ```text
//! ffmpeg -i in.mp4 frames/%06d.png                      # demux
//! ffmpeg -i in.mp4 -f rawvideo -pix_fmt rgb24 clip_1920x1080.rgb24
//! ffmpeg -framerate 30 -i out/%06d.png -pix_fmt yuv420p out.mp4  # remux
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageEncoder, RgbImage};

use crate::lut::{Image, Lut3D, Rgb};
use crate::{Error, Result};

/// Published GPU time for one 8K frame, kept as context for CPU numbers.
pub const REFERENCE_8K_GPU_MS: f64 = 1.72;

/// Maps a normalized value to 8 bits with `round(v * 255)`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

fn frame_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Frame {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn from_rgb8(img: &RgbImage) -> Result<Image> {
    let pixels = img
        .pixels()
        .map(|p| Rgb::new(dequantize(p[0]), dequantize(p[1]), dequantize(p[2])))
        .collect();
    Image::new(img.width() as usize, img.height() as usize, pixels)
}

fn to_rgb8(img: &Image) -> Vec<u8> {
    img.pixels()
        .iter()
        .flat_map(|p| [quantize(p.r), quantize(p.g), quantize(p.b)])
        .collect()
}

/// Reads a PNG or PPM file as a normalized image.
pub fn read_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| frame_err(path, e.to_string()))?;
    from_rgb8(&decoded.to_rgb8())
}

/// Writes an image as 8-bit PNG, or binary PPM when the extension is `ppm`.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let bytes = to_rgb8(img);
    let (w, h) = (img.width() as u32, img.height() as u32);
    let file = fs::File::create(path).map_err(|e| frame_err(path, e.to_string()))?;
    let out = BufWriter::new(file);
    let result = if has_ext(path, "ppm") {
        PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&bytes, w, h, image::ExtendedColorType::Rgb8)
    } else {
        image::codecs::png::PngEncoder::new(out).write_image(&bytes, w, h, image::ExtendedColorType::Rgb8)
    };
    result.map_err(|e| frame_err(path, e.to_string()))
}

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Parses `WIDTHxHEIGHT` from the last `_`-separated part of a file stem.
pub fn raw_dimensions(path: &Path) -> Result<(usize, usize)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| frame_err(path, "file name is not valid UTF-8"))?;
    let tail = stem.rsplit('_').next().unwrap_or(stem);
    let parsed = tail
        .split_once('x')
        .and_then(|(w, h)| Some((w.parse::<usize>().ok()?, h.parse::<usize>().ok()?)));
    match parsed {
        Some((w, h)) if w > 0 && h > 0 => Ok((w, h)),
        _ => Err(frame_err(
            path,
            "raw frames need the size in the name, e.g. clip_1920x1080.rgb24",
        )),
    }
}

/// An ordered run of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Image>,
    names: Vec<String>,
    /// Informational only; nothing here depends on it.
    pub fps: Option<f64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        let names = (0..frames.len()).map(|i| format!("{i:06}.png")).collect();
        Self::with_names(frames, names)
    }

    /// Frames with the file names used when writing them to a directory.
    pub fn with_names(frames: Vec<Image>, names: Vec<String>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput("frame sequence is empty".into()))?;
        let size = (first.width(), first.height());
        if let Some(bad) = frames.iter().position(|f| (f.width(), f.height()) != size) {
            return Err(Error::InvalidInput(format!(
                "frame {} ({}) is {}x{}, expected {}x{}",
                bad,
                names.get(bad).map(String::as_str).unwrap_or("?"),
                frames[bad].width(),
                frames[bad].height(),
                size.0,
                size.1
            )));
        }
        if names.len() != frames.len() {
            return Err(Error::InvalidInput(format!(
                "{} names for {} frames",
                names.len(),
                frames.len()
            )));
        }
        Ok(Self { frames, names, fps: None })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && (has_ext(p, "png") || has_ext(p, "ppm")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_raw(path: &Path) -> Result<FrameSequence> {
    let (w, h) = raw_dimensions(path)?;
    let bytes = fs::read(path).map_err(|e| frame_err(path, e.to_string()))?;
    let frame_len = 3 * w * h;
    if bytes.is_empty() || bytes.len() % frame_len != 0 {
        return Err(frame_err(
            path,
            format!(
                "{} bytes is not a whole number of {w}x{h} frames (expected a multiple of {frame_len} bytes per frame)",
                bytes.len()
            ),
        ));
    }
    let frames = bytes
        .chunks(frame_len)
        .map(|chunk| {
            let pixels = chunk
                .chunks(3)
                .map(|p| Rgb::new(dequantize(p[0]), dequantize(p[1]), dequantize(p[2])))
                .collect();
            Image::new(w, h, pixels)
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames)
}

/// Loads a frame directory or a raw `.rgb24` file.
pub fn load_frames(path: &Path) -> Result<FrameSequence> {
    if path.is_dir() {
        let files = list_frame_files(path)?;
        if files.is_empty() {
            return Err(frame_err(path, "no .png or .ppm frames found"));
        }
        let mut frames = Vec::with_capacity(files.len());
        let mut names = Vec::with_capacity(files.len());
        for file in &files {
            let img = read_image(file)?;
            if let Some(first) = frames.first() {
                let first: &Image = first;
                if (img.width(), img.height()) != (first.width(), first.height()) {
                    return Err(frame_err(
                        file,
                        format!(
                            "frame is {}x{} but the sequence is {}x{}",
                            img.width(),
                            img.height(),
                            first.width(),
                            first.height()
                        ),
                    ));
                }
            }
            frames.push(img);
            names.push(file.file_name().unwrap().to_string_lossy().into_owned());
        }
        FrameSequence::with_names(frames, names)
    } else if has_ext(path, "rgb24") {
        load_raw(path)
    } else if path.is_file() {
        let img = read_image(path)?;
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        FrameSequence::with_names(vec![img], vec![name])
    } else {
        Err(frame_err(path, "not a frame directory, image or .rgb24 file"))
    }
}

/// Writes frames to a directory (one file per frame, keeping the source
/// names) or to a single raw file when `out` ends in `.rgb24`.
pub fn save_frames(seq: &FrameSequence, out: &Path) -> Result<()> {
    if has_ext(out, "rgb24") {
        let file = fs::File::create(out).map_err(|e| frame_err(out, e.to_string()))?;
        let mut w = BufWriter::new(file);
        for f in &seq.frames {
            w.write_all(&to_rgb8(f))?;
        }
        w.flush()?;
        return Ok(());
    }
    fs::create_dir_all(out)?;
    for (f, name) in seq.frames.iter().zip(&seq.names) {
        write_image(&out.join(name), f)?;
    }
    Ok(())
}

/// Applies the LUT to every frame, preserving order and names.
pub fn stylize_video(lut: &Lut3D, seq: &FrameSequence) -> FrameSequence {
    FrameSequence {
        frames: seq.frames.iter().map(|f| lut.apply_image(f)).collect(),
        names: seq.names.clone(),
        fps: seq.fps,
    }
}

/// Result of [`consistency_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub frames: usize,
    /// Distinct 8-bit input colors seen.
    pub colors: usize,
    /// Largest per-channel range, in 8-bit steps, of the outputs one input
    /// color was mapped to.
    pub max_spread: u8,
    /// Input colors whose outputs were not all equal, up to 16.
    pub inconsistent_colors: Vec<[u8; 3]>,
    /// Total number of inconsistent input colors.
    pub inconsistent_count: usize,
    /// Mean absolute difference between the stylized inter-frame change and
    /// the change predicted by the mean color map, in normalized units.
    pub flicker: f64,
}

fn key(c: [u8; 3]) -> u32 {
    (c[0] as u32) << 16 | (c[1] as u32) << 8 | c[2] as u32
}

struct ColorStats {
    min: [u8; 3],
    max: [u8; 3],
    sum: [u64; 3],
    count: u64,
}

/// Checks that equal input colors received equal output colors in every
/// frame, and measures flicker against the empirical color map.
pub fn consistency_check(content: &FrameSequence, stylized: &FrameSequence) -> Result<ConsistencyReport> {
    if content.len() != stylized.len() {
        return Err(Error::InvalidInput(format!(
            "content has {} frames, stylized has {}",
            content.len(),
            stylized.len()
        )));
    }
    if (content.width(), content.height()) != (stylized.width(), stylized.height()) {
        return Err(Error::InvalidInput(format!(
            "content is {}x{}, stylized is {}x{}",
            content.width(),
            content.height(),
            stylized.width(),
            stylized.height()
        )));
    }
    let quant = |p: &Rgb| [quantize(p.r), quantize(p.g), quantize(p.b)];
    let inputs: Vec<Vec<[u8; 3]>> = content.frames.iter().map(|f| f.pixels().iter().map(quant).collect()).collect();
    let outputs: Vec<Vec<[u8; 3]>> = stylized.frames.iter().map(|f| f.pixels().iter().map(quant).collect()).collect();

    let mut map: HashMap<u32, ColorStats> = HashMap::new();
    for (fin, fout) in inputs.iter().zip(&outputs) {
        for (i, o) in fin.iter().zip(fout) {
            let e = map.entry(key(*i)).or_insert(ColorStats {
                min: *o,
                max: *o,
                sum: [0; 3],
                count: 0,
            });
            for c in 0..3 {
                e.min[c] = e.min[c].min(o[c]);
                e.max[c] = e.max[c].max(o[c]);
                e.sum[c] += o[c] as u64;
            }
            e.count += 1;
        }
    }

    let mut max_spread = 0u8;
    let mut bad: Vec<(u32, u8)> = Vec::new();
    for (&k, s) in &map {
        let spread = (0..3).map(|c| s.max[c] - s.min[c]).max().unwrap();
        max_spread = max_spread.max(spread);
        if spread > 0 {
            bad.push((k, spread));
        }
    }
    bad.sort_unstable();
    let inconsistent_count = bad.len();
    let inconsistent_colors = bad
        .iter()
        .take(16)
        .map(|&(k, _)| [(k >> 16) as u8, (k >> 8) as u8, k as u8])
        .collect();

    let mean_of = |c: [u8; 3]| -> [f64; 3] {
        let s = &map[&key(c)];
        std::array::from_fn(|ch| s.sum[ch] as f64 / s.count as f64)
    };
    let mut flicker = 0.0f64;
    let mut terms = 0usize;
    for t in 1..inputs.len() {
        for p in 0..inputs[t].len() {
            let (a, b) = (mean_of(inputs[t - 1][p]), mean_of(inputs[t][p]));
            for c in 0..3 {
                let observed = outputs[t][p][c] as f64 - outputs[t - 1][p][c] as f64;
                flicker += (observed - (b[c] - a[c])).abs();
            }
            terms += 3;
        }
    }
    Ok(ConsistencyReport {
        frames: content.len(),
        colors: map.len(),
        max_spread,
        inconsistent_colors,
        inconsistent_count,
        flicker: if terms == 0 { 0.0 } else { flicker / 255.0 / terms as f64 },
    })
}

/// A benchmark resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub label: String,
    pub width: usize,
    pub height: usize,
}

impl Resolution {
    pub fn new(label: &str, width: usize, height: usize) -> Self {
        Self {
            label: label.into(),
            width,
            height,
        }
    }

    /// The standard list: 512, HD, FHD, QHD, 2000, 4K, 5K, 8K.
    pub fn standard() -> Vec<Resolution> {
        ["512", "HD", "FHD", "QHD", "2000", "4K", "5K", "8K"]
            .iter()
            .map(|l| Self::parse(l).unwrap())
            .collect()
    }

    /// A standard label or a custom `WIDTHxHEIGHT`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (w, h) = match s.to_ascii_uppercase().as_str() {
            "512" => (512, 512),
            "HD" => (1280, 720),
            "FHD" => (1920, 1080),
            "QHD" => (2560, 1440),
            "2000" => (2000, 2000),
            "4K" => (3840, 2160),
            "5K" => (5120, 2880),
            "8K" => (7680, 4320),
            _ => {
                let dims = s
                    .split_once(['x', 'X'])
                    .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)));
                match dims {
                    Some((w, h)) if w > 0 && h > 0 => return Ok(Self::new(s, w, h)),
                    _ => {
                        return Err(Error::InvalidInput(format!(
                            "unknown resolution {s:?}; use 512, HD, FHD, QHD, 2000, 4K, 5K, 8K or WxH"
                        )))
                    }
                }
            }
        };
        Ok(Self::new(s, w, h))
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(Self::parse).collect()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Deterministic test frame: horizontal red ramp, vertical green ramp and a
/// diagonal blue ramp.
pub fn test_pattern(width: usize, height: usize) -> Result<Image> {
    let (wf, hf) = ((width.max(2) - 1) as f32, (height.max(2) - 1) as f32);
    Image::from_fn(width, height, |x, y| {
        Rgb::new(
            x as f32 / wf,
            y as f32 / hf,
            ((x as f32 / wf) + (y as f32 / hf)) * 0.5,
        )
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub width: usize,
    pub height: usize,
    pub ms_mean: f64,
    pub ms_std: f64,
    pub ns_per_pixel: f64,
    pub runs: usize,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Resolutions that could not be run, with the reason.
    pub skipped: Vec<(String, String)>,
}

pub const BENCH_CSV_HEADER: &str = "label,width,height,ms_mean,ms_std,ns_per_pixel,workers";

impl BenchReport {
    pub fn header() -> String {
        format!(
            "# reference: {REFERENCE_8K_GPU_MS} ms per 8K frame published for a single GPU; \
             not reproducible on CPU, shown for context only"
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n{BENCH_CSV_HEADER}\n", Self::header());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.4},{:.4},{}",
                r.label, r.width, r.height, r.ms_mean, r.ms_std, r.ns_per_pixel, r.workers
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{}\n", Self::header());
        let _ = writeln!(
            s,
            "{:<10} {:>11} {:>10} {:>9} {:>9} {:>5} {:>7}",
            "label", "size", "ms/frame", "std", "ns/px", "runs", "workers"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>11} {:>10.3} {:>9.3} {:>9.3} {:>5} {:>7}",
                r.label,
                format!("{}x{}", r.width, r.height),
                r.ms_mean,
                r.ms_std,
                r.ns_per_pixel,
                r.runs,
                r.workers
            );
        }
        for (label, why) in &self.skipped {
            let _ = writeln!(s, "{label:<10} skipped: {why}");
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Largest over smallest ns/pixel across rows; 1.0 means perfectly
    /// linear scaling in pixel count.
    pub fn ns_per_pixel_ratio(&self) -> f64 {
        let vals = self.rows.iter().map(|r| r.ns_per_pixel);
        let max = vals.clone().fold(f64::MIN, f64::max);
        let min = vals.fold(f64::MAX, f64::min);
        if self.rows.is_empty() {
            1.0
        } else {
            max / min
        }
    }
}

pub const BENCH_WARMUP: usize = 3;
pub const BENCH_RUNS: usize = 30;

fn try_frame(res: &Resolution) -> std::result::Result<Image, String> {
    let mut probe: Vec<Rgb> = Vec::new();
    // Input and output frame.
    probe
        .try_reserve_exact(2 * res.pixels())
        .map_err(|e| format!("cannot allocate {}x{} frames: {e}", res.width, res.height))?;
    drop(probe);
    test_pattern(res.width, res.height).map_err(|e| e.to_string())
}

/// Times `lut.apply_image` on a test frame per resolution inside a pool of
/// `workers` threads. `runs` is raised to at least 30 and `warmup` to 3.
pub fn bench(lut: &Lut3D, resolutions: &[Resolution], workers: usize, warmup: usize, runs: usize) -> Result<BenchReport> {
    let workers = workers.max(1);
    let (warmup, runs) = (warmup.max(BENCH_WARMUP), runs.max(BENCH_RUNS));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start {workers} workers: {e}")))?;
    let mut report = BenchReport::default();
    for res in resolutions {
        let frame = match try_frame(res) {
            Ok(f) => f,
            Err(why) => {
                log::warn!("skipping {}: {why}", res.label);
                report.skipped.push((res.label.clone(), why));
                continue;
            }
        };
        let times: Vec<f64> = pool.install(|| {
            for _ in 0..warmup {
                std::hint::black_box(lut.apply_image(&frame));
            }
            (0..runs)
                .map(|_| {
                    let t = Instant::now();
                    std::hint::black_box(lut.apply_image(&frame));
                    t.elapsed().as_secs_f64() * 1e3
                })
                .collect()
        });
        let mean = times.iter().sum::<f64>() / runs as f64;
        let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / runs as f64;
        report.rows.push(BenchRow {
            label: res.label.clone(),
            width: res.width,
            height: res.height,
            ms_mean: mean,
            ms_std: var.sqrt(),
            ns_per_pixel: mean * 1e6 / res.pixels() as f64,
            runs,
            workers,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::from_fn(w, h, |_, _| {
            Rgb::new(
                dequantize(rng.gen()),
                dequantize(rng.gen()),
                dequantize(rng.gen()),
            )
        })
        .unwrap()
    }

    fn random_lut(dim: usize, seed: u64) -> Lut3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Lut3D::from_entries(dim, (0..3 * dim * dim * dim).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn ppm_directory_loads_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["b.ppm", "a.ppm", "c.ppm"].iter().enumerate() {
            let v = i as f32 / 4.0;
            write_image(&dir.path().join(name), &Image::filled(4, 3, Rgb::splat(v)).unwrap()).unwrap();
        }
        let seq = load_frames(dir.path()).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.names(), &["a.ppm", "b.ppm", "c.ppm"]);
        assert_eq!(seq.frames()[0].get(0, 0).r, dequantize(quantize(0.25)));
        let header = fs::read(dir.path().join("a.ppm")).unwrap();
        assert!(header.starts_with(b"P6"));
    }

    #[test]
    fn ppm_value_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend([128, 0, 255]);
        fs::write(&path, bytes).unwrap();
        let img = read_image(&path).unwrap();
        assert!((img.get(0, 0).r - 0.50196).abs() < 1e-5);
        assert_eq!(img.get(0, 0).b, 1.0);
    }

    #[test]
    fn mixed_resolutions_name_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        write_image(&dir.path().join("0.png"), &Image::filled(4, 4, Rgb::splat(0.5)).unwrap()).unwrap();
        write_image(&dir.path().join("1.png"), &Image::filled(5, 4, Rgb::splat(0.5)).unwrap()).unwrap();
        let err = load_frames(dir.path()).unwrap_err().to_string();
        assert!(err.contains("1.png"), "{err}");
    }

    #[test]
    fn raw_frames_round_trip_and_size_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip_4x2.rgb24");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = FrameSequence::new(vec![random_frame(4, 2, &mut rng), random_frame(4, 2, &mut rng)]).unwrap();
        save_frames(&seq, &path).unwrap();
        let back = load_frames(&path).unwrap();
        assert_eq!(back.frames(), seq.frames());

        let bad = dir.path().join("clip_4x2b.rgb24");
        fs::write(&bad, vec![0u8; 10]).unwrap();
        assert!(load_frames(&bad).is_err());
        let short = dir.path().join("short_4x2.rgb24");
        fs::write(&short, vec![0u8; 30]).unwrap();
        let err = load_frames(&short).unwrap_err().to_string();
        assert!(err.contains("24 bytes per frame"), "{err}");
    }

    #[test]
    fn identity_lut_round_trips_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = FrameSequence::new(vec![random_frame(8, 8, &mut rng), random_frame(8, 8, &mut rng)]).unwrap();
        let out = stylize_video(&Lut3D::identity(17).unwrap(), &seq);
        for (a, b) in out.frames().iter().zip(seq.frames()) {
            assert_eq!(to_rgb8(a), to_rgb8(b));
        }
    }

    #[test]
    fn random_lut_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<Image> = (0..5).map(|_| random_frame(9, 7, &mut rng)).collect();
        let seq = FrameSequence::new(frames).unwrap();
        let lut = random_lut(5, 4);
        let out = stylize_video(&lut, &seq);
        assert_eq!(out.len(), 5);
        for (o, f) in out.frames().iter().zip(seq.frames()) {
            for (po, pf) in o.pixels().iter().zip(f.pixels()) {
                assert_eq!(*po, lut.apply(*pf));
            }
        }
    }

    #[test]
    fn equal_colors_map_equally_across_frames() {
        let lut = random_lut(9, 5);
        let c = Rgb::new(0.3, 0.6, 0.9);
        let mut a = Image::filled(3, 3, Rgb::splat(0.1)).unwrap();
        let mut b = Image::filled(3, 3, Rgb::splat(0.7)).unwrap();
        a.pixels_mut()[0] = c;
        b.pixels_mut()[8] = c;
        let out = stylize_video(&lut, &FrameSequence::new(vec![a, b]).unwrap());
        assert_eq!(out.frames()[0].pixels()[0], out.frames()[1].pixels()[8]);
    }

    #[test]
    fn consistency_spread_and_flicker() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames: Vec<Image> = (0..4).map(|_| random_frame(16, 16, &mut rng)).collect();
        let seq = FrameSequence::new(frames).unwrap();
        let stylized = stylize_video(&random_lut(9, 7), &seq);
        let r = consistency_check(&seq, &stylized).unwrap();
        assert_eq!(r.max_spread, 0);
        assert_eq!(r.flicker, 0.0);

        let id = consistency_check(&seq, &stylize_video(&Lut3D::identity(9).unwrap(), &seq)).unwrap();
        assert_eq!(id.flicker, 0.0);

        // Repeat one input color in another frame, then nudge one of its
        // two outputs by a single 8-bit step.
        let mut content = seq.frames().to_vec();
        let mut frames = stylized.frames().to_vec();
        let color = content[2].pixels()[5];
        content[1].pixels_mut()[0] = color;
        frames[1].pixels_mut()[0] = frames[2].pixels()[5];
        let q = quantize(frames[2].pixels()[5].g);
        frames[2].pixels_mut()[5].g = dequantize(if q == 255 { 254 } else { q + 1 });
        let r = consistency_check(
            &FrameSequence::new(content).unwrap(),
            &FrameSequence::new(frames).unwrap(),
        )
        .unwrap();
        assert_eq!(r.max_spread, 1);
        assert_eq!(r.inconsistent_count, 1);
        assert_eq!(r.inconsistent_colors[0], [quantize(color.r), quantize(color.g), quantize(color.b)]);
    }

    #[test]
    fn consistency_length_mismatch() {
        let f = Image::filled(2, 2, Rgb::splat(0.5)).unwrap();
        let a = FrameSequence::new(vec![f.clone(), f.clone()]).unwrap();
        let b = FrameSequence::new(vec![f]).unwrap();
        assert!(consistency_check(&a, &b).is_err());
    }

    #[test]
    fn resolution_parsing() {
        let list = Resolution::parse_list("FHD,4K,640x480").unwrap();
        assert_eq!(list[0], Resolution::new("FHD", 1920, 1080));
        assert_eq!(list[1], Resolution::new("4K", 3840, 2160));
        assert_eq!(list[2], Resolution::new("640x480", 640, 480));
        assert!(Resolution::parse("huge").is_err());
        assert_eq!(Resolution::standard().len(), 8);
        assert_eq!(Resolution::standard()[7].pixels(), 7680 * 4320);
    }

    #[test]
    fn bench_small_rows_and_csv() {
        let lut = Lut3D::identity(17).unwrap();
        let res = Resolution::parse_list("64x64,32x16").unwrap();
        let report = bench(&lut, &res, 2, 0, 1).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.runs == 30 && r.workers == 2 && r.ms_mean > 0.0));
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].contains("1.72"));
        assert_eq!(lines[1], BENCH_CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(report.to_table().contains("32x16"));
        assert_eq!(test_pattern(8, 8).unwrap(), test_pattern(8, 8).unwrap());
    }
}
