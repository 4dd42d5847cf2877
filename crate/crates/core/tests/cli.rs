use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nlut::cube::{cube_string, read_cube};
use nlut::lut::{Image, Lut3D, Rgb};
use nlut::network::{ModelConfig, NlutModel};
use nlut::trainer::Checkpoint;
use nlut::video::{self, load_frames, read_image, write_image};

fn nlut(args: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlut"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn pair() -> (PathBuf, PathBuf) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/pair");
    (dir.join("content.png"), dir.join("style.png"))
}

fn frames_dir(dir: &Path) -> PathBuf {
    let out = dir.join("frames");
    fs::create_dir_all(&out).unwrap();
    for t in 0..3 {
        let img = Image::from_fn(24, 16, |x, y| {
            Rgb::new(video::dequantize((x * 10 + t) as u8), video::dequantize((y * 15) as u8), 0.5)
        })
        .unwrap();
        write_image(&out.join(format!("{t:03}.png")), &img).unwrap();
    }
    out
}

#[test]
fn finetune_with_zero_iterations_writes_the_zero_shot_lut() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("fresh.ckpt");
    let ckpt = Checkpoint::new(NlutModel::<f32>::new(ModelConfig::default(), 7).unwrap());
    ckpt.save(&ckpt_path).unwrap();
    let (content, style) = pair();
    let out = dir.path().join("zero.cube");
    let o = nlut(&[
        Path::new("finetune"),
        &ckpt_path,
        &content,
        &style,
        &out,
        Path::new("--iterations"),
        Path::new("0"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let expected = ckpt.predict_lut(&read_image(&content).unwrap(), &read_image(&style).unwrap()).unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap(), cube_string(&expected, "nlut finetune"));
    assert!(out.with_extension("ckpt").exists());
}

#[test]
fn identity_apply_leaves_frames_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let input = frames_dir(dir.path());
    let lut = dir.path().join("id.cube");
    let o = nlut(&[Path::new("export"), &lut, Path::new("--identity"), Path::new("17")]);
    assert!(o.status.success());
    assert_eq!(read_cube(fs::read(&lut).unwrap().as_slice()).unwrap(), Lut3D::identity(17).unwrap());

    let output = dir.path().join("out");
    let o = nlut(&[Path::new("apply"), &lut, &input, &output]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["000.png", "001.png", "002.png"] {
        let a = read_image(&input.join(name)).unwrap();
        let b = read_image(&output.join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }

    let o = nlut(&[Path::new("metrics"), &input, &output, Path::new("--csv")]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "3");
    assert_eq!(row[2], "0");
    assert_eq!(load_frames(&output).unwrap().len(), 3);
}

#[test]
fn bench_csv_has_one_row_per_resolution() {
    let o = nlut(&[
        Path::new("bench"),
        Path::new("--res"),
        Path::new("FHD,4K"),
        Path::new("--warmup"),
        Path::new("0"),
        Path::new("--runs"),
        Path::new("1"),
        Path::new("--csv"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 2, "{text}");
    assert!(text.contains("1.72"));
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = nlut(&[
        Path::new("apply"),
        &dir.path().join("nope.cube"),
        &dir.path().join("nope.png"),
        &dir.path().join("out.png"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.cube"));
}

#[test]
fn malformed_cube_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let lut = dir.path().join("bad.cube");
    fs::write(&lut, "LUT_3D_SIZE 2\n0 0 0\n").unwrap();
    let (content, _) = pair();
    let o = nlut(&[Path::new("apply"), &lut, &content, &dir.path().join("out.png")]);
    assert_eq!(o.status.code(), Some(3));
}
