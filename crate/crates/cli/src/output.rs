//! File writers: labeled CSV for vector data, binary graymaps for glyphs.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use dudgan_core::autodiff::Tensor;
use dudgan_core::datasets::{write_labeled_csv, DataKind};
use dudgan_core::training::CheckpointMeta;

fn create(path: &Path) -> io::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn annotate(path: &Path, e: impl std::fmt::Display) -> String {
    format!("{}: {e}", path.display())
}

pub fn write_points_csv(path: &Path, x: &Tensor, labels: &[usize]) -> Result<(), String> {
    let out = create(path).map_err(|e| annotate(path, e))?;
    write_labeled_csv(out, x, labels).map_err(|e| annotate(path, e))
}

/// Maps `[-1, 1]` onto `0..=255`.
fn gray(v: f64) -> u8 {
    (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P5 graymap.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| gray(v)));
    out
}

fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<(), String> {
    let mut out = create(path).map_err(|e| annotate(path, e))?;
    out.write_all(&pgm_bytes(width, height, pixels)).and_then(|_| out.flush()).map_err(|e| annotate(path, e))
}

/// One image per row of `x`, named `{stem}-{i:05}.pgm` inside `dir`.
pub fn write_pgm_dir(dir: &Path, stem: &str, x: &Tensor, side: usize) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| annotate(dir, e))?;
    for i in 0..x.rows() {
        write_pgm(&dir.join(format!("{stem}-{i:05}.pgm")), side, side, x.row(i))?;
    }
    Ok(())
}

/// All rows tiled left to right, top to bottom, in a near-square grid.
pub fn write_pgm_grid(path: &Path, x: &Tensor, side: usize) -> Result<(), String> {
    let n = x.rows();
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    let (w, h) = (cols * side, rows * side);
    let mut pixels = vec![-1.0; w * h];
    for i in 0..n {
        let (gr, gc) = (i / cols, i % cols);
        for y in 0..side {
            for xx in 0..side {
                pixels[(gr * side + y) * w + gc * side + xx] = x.row(i)[y * side + xx];
            }
        }
    }
    write_pgm(path, w, h, &pixels)
}

/// Interpolation output: a CSV with `trajectory,alpha,x0..` for vector
/// data, or `traj{i}-step{s}.pgm` images for glyphs.
pub fn write_trajectory(
    out: &Path,
    meta: &CheckpointMeta,
    x: &Tensor,
    trajectories: &[usize],
    alphas: &[f64],
) -> Result<(), String> {
    if let DataKind::Glyphs { side } = meta.kind {
        fs::create_dir_all(out).map_err(|e| annotate(out, e))?;
        let steps = alphas.iter().filter(|&&a| a == 0.0).count().max(1);
        let per = alphas.len() / steps;
        for i in 0..x.rows() {
            let name = format!("traj{}-step{:03}.pgm", trajectories[i], i % per.max(1));
            write_pgm(&out.join(name), side, side, x.row(i))?;
        }
        return Ok(());
    }
    let x = meta.denormalize(x);
    let mut w = create(out).map_err(|e| annotate(out, e))?;
    let mut header = vec!["trajectory".to_string(), "alpha".to_string()];
    header.extend((0..meta.data_dim).map(|j| format!("x{j}")));
    let mut text = header.join(",");
    text.push('\n');
    for i in 0..x.rows() {
        let mut fields = vec![trajectories[i].to_string(), format!("{:?}", alphas[i])];
        fields.extend(x.row(i).iter().map(|v| format!("{v:?}")));
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| annotate(out, e))
}
