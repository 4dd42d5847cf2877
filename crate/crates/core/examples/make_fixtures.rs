//! Regenerates the bundled test fixtures.
//!
//! `cargo run --release --example make_fixtures` writes the image corpus and
//! the gray/red pair. Add `--golden` to also rebuild the fine-tune golden
//! `.cube` (pretrain 200 iterations, then fine-tune, both with seed 7).

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use nlut::cube::write_cube;
use nlut::lut::{Image, Rgb};
use nlut::network::ModelConfig;
use nlut::trainer::{finetune, pretrain, TrainConfig};
use nlut::video::{read_image, write_image};

const W: usize = 96;
const H: usize = 72;

fn corpus() -> Vec<(&'static str, Image)> {
    let f = |g: &dyn Fn(f32, f32) -> Rgb<f32>| Image::from_fn(W, H, |x, y| g(x as f32 / W as f32, y as f32 / H as f32)).unwrap();
    vec![
        ("00_sunset.png", f(&|_, v| Rgb::new(0.95 - 0.3 * v, 0.55 - 0.4 * v, 0.2 + 0.4 * v))),
        ("01_forest.png", f(&|u, v| Rgb::new(0.1 + 0.2 * u, 0.35 + 0.4 * (1.0 - v), 0.12 + 0.1 * (8.0 * u).sin().abs()))),
        ("02_ocean.png", f(&|u, v| Rgb::new(0.05 + 0.1 * v, 0.3 + 0.2 * (6.0 * PI * u).sin() * 0.5, 0.55 + 0.35 * v))),
        ("03_checker.png", f(&|u, v| {
            let on = ((u * 8.0) as u32 + (v * 6.0) as u32) % 2 == 0;
            if on { Rgb::new(0.9, 0.85, 0.8) } else { Rgb::new(0.15, 0.1, 0.2) }
        })),
        ("04_rings.png", f(&|u, v| {
            let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            let t = 0.5 + 0.5 * (r * 30.0).cos();
            Rgb::new(0.8 * t, 0.3 + 0.4 * (1.0 - t), 0.5)
        })),
        ("05_desert.png", f(&|u, v| Rgb::new(0.85 - 0.2 * v, 0.65 - 0.25 * v + 0.05 * (20.0 * u).sin(), 0.35 - 0.2 * v))),
        ("06_night.png", f(&|u, v| {
            let star = (((u * 97.0).sin() * (v * 89.0).cos()) * 43758.5).fract().abs() > 0.97;
            if star { Rgb::new(0.95, 0.95, 0.8) } else { Rgb::new(0.03, 0.04, 0.12 + 0.1 * v) }
        })),
        ("07_stripes.png", f(&|u, _| {
            let band = (u * 5.0) as u32;
            [Rgb::new(0.9, 0.2, 0.2), Rgb::new(0.2, 0.8, 0.3), Rgb::new(0.2, 0.3, 0.9), Rgb::new(0.9, 0.9, 0.2), Rgb::new(0.6, 0.2, 0.7)][band.min(4) as usize]
        })),
    ]
}

fn main() -> nlut::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let dir = root.join("corpus");
    fs::create_dir_all(&dir)?;
    for (name, img) in corpus() {
        write_image(&dir.join(name), &img)?;
    }
    let pair = root.join("pair");
    fs::create_dir_all(&pair)?;
    write_image(&pair.join("content.png"), &Image::filled(64, 64, Rgb::new(0.5, 0.5, 0.5))?)?;
    write_image(&pair.join("style.png"), &Image::filled(64, 64, Rgb::new(0.8, 0.1, 0.1))?)?;

    if std::env::args().any(|a| a == "--golden") {
        let cfg = TrainConfig { iterations: 200, ..TrainConfig::pretrain() };
        let trained = pretrain(&dir, ModelConfig::default(), &cfg)?;
        let content = read_image(&pair.join("content.png"))?;
        let style = read_image(&pair.join("style.png"))?;
        let tuned = finetune(&trained.checkpoint, &[content], &style, &TrainConfig::finetune())?;
        fs::create_dir_all(root.join("golden"))?;
        write_cube(fs::File::create(root.join("golden/finetune_seed7.cube"))?, &tuned.lut, "nlut finetune")?;
    }
    Ok(())
}
