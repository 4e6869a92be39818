use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMOKE: &str = "\
[network]
hidden_layers = 2
hidden_units = 16
[train]
k_max = 8
eval_every = 4
checkpoint_every = 4
[eval]
samples = 80
";

fn dudgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dudgan")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    path
}

fn train_smoke(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, SMOKE);
    let out = dir.join("run");
    let o = dudgan(&["train", "--config", s(&cfg), "--out", s(&out), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn missing_config_exits_1_naming_path() {
    let o = dudgan(&["train", "--config", "/no/such/file.toml", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/file.toml"));
}

#[test]
fn unknown_key_exits_1_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nbogus_key = 3\n");
    let o = dudgan(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus_key"));
}

#[test]
fn smoke_train_outputs_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_smoke(dir.path());
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus two rows:\n{csv}");
    assert!(out.join("best.ckpt").exists());
    assert!(out.join("ckpt-0000004.ckpt").exists());
    assert!(out.join("final.ckpt").exists());

    let effective = fs::read_to_string(out.join("effective-config.txt")).unwrap();
    let reparsed = dudgan_core::config::ExperimentConfig::parse(&effective).unwrap();
    assert_eq!(reparsed, dudgan_core::config::ExperimentConfig::parse(SMOKE).unwrap());

    let again = dir.path().join("again");
    let cfg = dir.path().join("cfg.toml");
    let o = dudgan(&["train", "--config", s(&cfg), "--out", s(&again), "--quiet"]);
    assert!(o.status.success());
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), fs::read(again.join("metrics.csv")).unwrap());
}

#[test]
fn generate_and_interpolate() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_smoke(dir.path());
    let ckpt = run.join("final.ckpt");

    let bad = dudgan(&["generate", "--ckpt", s(&ckpt), "--class", "7", "--n", "4", "--out", s(&dir.path().join("g.csv"))]);
    assert_eq!(bad.status.code(), Some(1));

    let empty = dir.path().join("empty.csv");
    let o = dudgan(&["generate", "--ckpt", s(&ckpt), "--class", "1", "--n", "0", "--out", s(&empty)]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&empty).unwrap().lines().count(), 1);

    let five = dir.path().join("five.csv");
    let o = dudgan(&["generate", "--ckpt", s(&ckpt), "--class", "2", "--n", "5", "--out", s(&five)]);
    assert!(o.status.success());
    let text = fs::read_to_string(&five).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",2")));

    let same = dir.path().join("same.csv");
    let o = dudgan(&["interpolate", "--ckpt", s(&ckpt), "--class-a", "1", "--class-b", "1", "--steps", "4", "--out", s(&same)]);
    assert!(o.status.success());
    let rows: Vec<String> = fs::read_to_string(&same)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.splitn(3, ',').nth(2).unwrap().to_string())
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r == &rows[0]));

    let o = dudgan(&["interpolate", "--ckpt", s(&ckpt), "--class-a", "0", "--class-b", "1", "--steps", "1", "--out", s(&same)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_reports_and_names_failing_metric() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_smoke(dir.path());
    let cfg = dir.path().join("cfg.toml");
    let ckpt = run.join("final.ckpt");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = dudgan(&["eval", "--ckpt", s(&ckpt), "--config", s(&cfg), "--out", s(out), "--quiet"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let tiny = write_config(dir.path(), &SMOKE.replace("samples = 80", "samples = 8"));
    let o = dudgan(&["eval", "--ckpt", s(&ckpt), "--config", s(&tiny)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("frechet_distance"));
}

#[test]
fn noise_demo_writes_ten_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let out = dir.path().join("demo");
    let o = dudgan(&["noise-demo", "--config", s(&cfg), "--n", "64", "--out", s(&out), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 10, "{names:?}");

    let read = |name: &str| -> Vec<f64> {
        let text = fs::read_to_string(out.join(name)).unwrap();
        text.lines()
            .skip(1)
            .flat_map(|l| l.split(',').take(2).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect()
    };
    let msd = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    let d_files: Vec<&String> = names.iter().filter(|n| n.starts_with("noise-d-")).collect();
    let c_files: Vec<&String> = names.iter().filter(|n| n.starts_with("noise-c-")).collect();
    assert_eq!((d_files.len(), c_files.len()), (5, 5));

    // Two independent t = 1 draws of the same samples: both nearly clean.
    let d1 = read(d_files[0]);
    assert!(msd(&d1, &read(c_files[0])) < 1e-3);

    // Spread around the nearly clean samples grows along the t axis.
    let spread: Vec<f64> = d_files[1..].iter().map(|n| msd(&read(n), &d1)).collect();
    assert!(spread.windows(2).all(|w| w[0] < w[1]), "{spread:?}");
}

#[test]
fn glyph_outputs_are_graymaps() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("[dataset]\nkind = \"glyphs\"\nnum_classes = 3\nsamples_per_class = 40\n{SMOKE}")
        .replace("samples = 80", "samples = 120");
    let cfg = write_config(dir.path(), &text);
    let run = dir.path().join("run");
    let o = dudgan(&["train", "--config", s(&cfg), "--out", s(&run), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let imgs = dir.path().join("imgs");
    let o = dudgan(&["generate", "--ckpt", s(&run.join("final.ckpt")), "--class", "0", "--n", "3", "--out", s(&imgs)]);
    assert!(o.status.success());
    let bytes = fs::read(imgs.join("sample-00000.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(bytes.len(), 11 + 64);
}
