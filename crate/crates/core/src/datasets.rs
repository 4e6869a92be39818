//! Labeled data sources and class-balanced batching.
//!
//! Three sources share one [`Dataset`] type: a procedural 2-D Gaussian
//! mixture with several modes per class, procedural glyph images, and
//! user-supplied CSV tables. All features live in `[-1, 1]`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("mode centers {a} and {b} are {distance:.4} apart, below 6 sigma = {min:.4}")]
    Separation { a: usize, b: usize, distance: f64, min: f64 },
    #[error("invalid dataset parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("line {line}: expected {expected} columns, found {found}")]
    Ragged { line: usize, expected: usize, found: usize },
    #[error("line {line}, column {column}: `{cell}` is not a number")]
    NonNumeric { line: usize, column: usize, cell: String },
    #[error("label column: {0}")]
    Labels(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which generator produced a dataset; decides how samples are rendered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Points,
    Glyphs { side: usize },
    Table,
}

/// Per-column min-max map onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaling {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for row in rows {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }

    /// Constant columns map to the midpoint 0.
    pub fn normalize(&self, j: usize, v: f64) -> f64 {
        let range = self.max[j] - self.min[j];
        if range == 0.0 {
            0.0
        } else {
            2.0 * (v - self.min[j]) / range - 1.0
        }
    }

    pub fn inverse(&self, j: usize, v: f64) -> f64 {
        let range = self.max[j] - self.min[j];
        self.min[j] + (v + 1.0) * 0.5 * range
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    kind: DataKind,
    scaling: Option<Scaling>,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>, num_classes: usize, kind: DataKind) -> Result<Self, DatasetError> {
        if x.rank() != 2 || x.rows() != labels.len() {
            return Err(DatasetError::InvalidParameter {
                name: "x",
                reason: format!("shape {:?} does not match {} labels", x.shape(), labels.len()),
            });
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(DatasetError::Labels(format!("label {c} outside 0..{num_classes}")));
        }
        if !x.all_finite() {
            return Err(DatasetError::InvalidParameter { name: "x", reason: "non-finite value".into() });
        }
        Ok(Self { x, labels, num_classes, kind, scaling: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn data_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn features(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn scaling(&self) -> Option<&Scaling> {
        self.scaling.as_ref()
    }

    /// Row indices of every sample with label `c`.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect()
    }

    pub fn gather(&self, idx: &[usize]) -> LabeledBatch {
        let d = self.data_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        LabeledBatch {
            x: Tensor::new(vec![idx.len(), d], data).expect("gather shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Maps normalized features back to the source units; identity when
    /// the dataset was not rescaled.
    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        let Some(s) = &self.scaling else { return x.clone() };
        let cols = x.cols();
        let data = x.data().iter().enumerate().map(|(i, &v)| s.inverse(i % cols, v)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    /// Writes `x0,…,x{d-1},label` rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        write_labeled_csv(out, &self.x, &self.labels)
    }
}

pub fn write_labeled_csv<W: Write>(out: W, x: &Tensor, labels: &[usize]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(out);
    let d = x.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (i, &c) in labels.iter().enumerate() {
        let mut rec: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(c.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// A batch of samples with their integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Layout of the procedural Gaussian mixture.
///
/// Mode `m` of class `c` sits on ring `m` (radius `radius·(m+1)/modes`)
/// at angle `2πc / num_classes`, so each class owns a radial spoke.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Gmm2dSpec {
    pub num_classes: usize,
    pub modes_per_class: usize,
    pub radius: f64,
    pub mode_std: f64,
    pub samples_per_class: usize,
}

impl Default for Gmm2dSpec {
    fn default() -> Self {
        Self { num_classes: 4, modes_per_class: 2, radius: 1.0, mode_std: 0.05, samples_per_class: 1000 }
    }
}

impl Gmm2dSpec {
    /// Map from source units into `[-1, 1]²`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.radius + 4.0 * self.mode_std)
    }

    fn raw_centers(&self) -> Vec<(usize, [f64; 2])> {
        let mut out = Vec::with_capacity(self.num_classes * self.modes_per_class);
        for c in 0..self.num_classes {
            let angle = 2.0 * PI * c as f64 / self.num_classes as f64;
            for m in 0..self.modes_per_class {
                let r = self.radius * (m + 1) as f64 / self.modes_per_class as f64;
                out.push((c, [r * angle.cos(), r * angle.sin()]));
            }
        }
        out
    }

    /// `(class, center)` of every mode in normalized coordinates.
    pub fn centers(&self) -> Vec<(usize, [f64; 2])> {
        let s = self.scale();
        self.raw_centers().into_iter().map(|(c, [x, y])| (c, [s * x, s * y])).collect()
    }

    /// Mode standard deviation in normalized coordinates.
    pub fn scaled_std(&self) -> f64 {
        self.mode_std * self.scale()
    }

    pub fn num_modes(&self) -> usize {
        self.num_classes * self.modes_per_class
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |name, reason: &str| Err(DatasetError::InvalidParameter { name, reason: reason.into() });
        if self.num_classes == 0 {
            return bad("num_classes", "must be positive");
        }
        if self.modes_per_class == 0 {
            return bad("modes_per_class", "must be positive");
        }
        if !(self.mode_std > 0.0) {
            return bad("mode_std", "must be positive");
        }
        if !(self.radius >= 0.0) {
            return bad("radius", "must be non-negative");
        }
        let centers = self.raw_centers();
        let min = 6.0 * self.mode_std;
        for a in 0..centers.len() {
            for b in a + 1..centers.len() {
                let (p, q) = (centers[a].1, centers[b].1);
                let distance = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                if distance < min {
                    return Err(DatasetError::Separation { a, b, distance, min });
                }
            }
        }
        Ok(())
    }

    /// Draws `samples_per_class` points per class, modes chosen uniformly.
    pub fn generate(&self, seed: u64) -> Result<Dataset, DatasetError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = self.centers();
        let std = self.scaled_std();
        let n = self.num_classes * self.samples_per_class;
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for c in 0..self.num_classes {
            for _ in 0..self.samples_per_class {
                let m = rng.random_range(0..self.modes_per_class);
                let [cx, cy] = centers[c * self.modes_per_class + m].1;
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                data.push((cx + std * dx).clamp(-1.0, 1.0));
                data.push((cy + std * dy).clamp(-1.0, 1.0));
                labels.push(c);
            }
        }
        Dataset::new(Tensor::new(vec![n, 2], data).expect("shape"), labels, self.num_classes, DataKind::Points)
    }
}

/// Shapes drawn by the glyph generator, one per class.
pub const GLYPH_SHAPES: [&str; 8] = ["disk", "cross", "bar", "ring", "triangle", "checker", "diagonal", "frame"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlyphSpec {
    pub num_classes: usize,
    pub side: usize,
    pub samples_per_class: usize,
    /// Scales both the positional offset (fraction of the image) and the
    /// intensity dimming; 0 renders every sample of a class identically.
    pub jitter: f64,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        Self { num_classes: 8, side: 8, samples_per_class: 500, jitter: 0.1 }
    }
}

fn glyph_mask(shape: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match shape {
        0 => r < 0.3,
        1 => (u.abs() < 0.1 || v.abs() < 0.1) && u.abs() < 0.4 && v.abs() < 0.4,
        2 => u.abs() < 0.12 && v.abs() < 0.4,
        3 => r > 0.2 && r < 0.38,
        4 => v > -0.35 && v < 0.35 && u.abs() < 0.5 * (v + 0.35) * 0.9,
        5 => {
            let a = ((u + 0.5) * 4.0).floor() as i64;
            let b = ((v + 0.5) * 4.0).floor() as i64;
            (a + b).rem_euclid(2) == 0
        }
        6 => (u - v).abs() < 0.15,
        _ => {
            let m = u.abs().max(v.abs());
            m > 0.3 && m < 0.45
        }
    }
}

impl GlyphSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.side != 8 && self.side != 16 {
            return Err(DatasetError::InvalidParameter { name: "side", reason: format!("{} not in {{8, 16}}", self.side) });
        }
        if self.num_classes == 0 || self.num_classes > GLYPH_SHAPES.len() {
            return Err(DatasetError::InvalidParameter {
                name: "num_classes",
                reason: format!("{} not in 1..=8", self.num_classes),
            });
        }
        if !(0.0..=0.5).contains(&self.jitter) {
            return Err(DatasetError::InvalidParameter { name: "jitter", reason: "must lie in [0, 0.5]".into() });
        }
        Ok(())
    }

    pub fn render(&self, class: usize, dx: f64, dy: f64, intensity: f64) -> Vec<f64> {
        let side = self.side;
        let mut out = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                let u = (col as f64 + 0.5) / side as f64 - 0.5 - dx;
                let v = 0.5 - (row as f64 + 0.5) / side as f64 - dy;
                let on = glyph_mask(class, u, v);
                out.push(if on { 2.0 * intensity - 1.0 } else { -1.0 });
            }
        }
        out
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset, DatasetError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.side * self.side;
        let n = self.num_classes * self.samples_per_class;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for c in 0..self.num_classes {
            for _ in 0..self.samples_per_class {
                let (dx, dy, dim) = if self.jitter > 0.0 {
                    (
                        rng.random_range(-self.jitter..self.jitter),
                        rng.random_range(-self.jitter..self.jitter),
                        rng.random_range(0.0..self.jitter),
                    )
                } else {
                    (0.0, 0.0, 0.0)
                };
                data.extend(self.render(c, dx, dy, 1.0 - dim));
                labels.push(c);
            }
        }
        let kind = DataKind::Glyphs { side: self.side };
        Dataset::new(Tensor::new(vec![n, d], data).expect("shape"), labels, self.num_classes, kind)
    }
}

/// Reads `features…,label` rows. A first row containing any non-numeric
/// cell is treated as a header. Features are min-max rescaled to `[-1, 1]`
/// and the scaling is kept for [`Dataset::denormalize`].
pub fn load_csv(path: &Path) -> Result<Dataset, DatasetError> {
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

pub fn read_csv<R: Read>(input: R) -> Result<Dataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<f64> = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 1;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let parsed: Vec<Result<f64, _>> = rec.iter().map(str::parse::<f64>).collect();
        if i == 0 && parsed.iter().any(Result::is_err) {
            continue;
        }
        let expected = *width.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(DatasetError::Ragged { line, expected, found: rec.len() });
        }
        if expected < 2 {
            return Err(DatasetError::Labels("missing: rows need at least one feature and a label".into()));
        }
        let mut values = Vec::with_capacity(expected);
        for (column, (p, cell)) in parsed.into_iter().zip(rec.iter()).enumerate() {
            match p {
                Ok(v) if v.is_finite() => values.push(v),
                _ => return Err(DatasetError::NonNumeric { line, column: column + 1, cell: cell.to_string() }),
            }
        }
        raw_labels.push(values.pop().expect("at least two columns"));
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(DatasetError::InvalidParameter { name: "csv", reason: "no data rows".into() });
    }
    let mut labels = Vec::with_capacity(raw_labels.len());
    for (i, &l) in raw_labels.iter().enumerate() {
        if l < 0.0 || l.fract() != 0.0 {
            return Err(DatasetError::Labels(format!("row {} has non-integer label {l}", i + 1)));
        }
        labels.push(l as usize);
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; num_classes];
    labels.iter().for_each(|&l| present[l] = true);
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(DatasetError::Labels(format!(
            "labels must be 0-based and contiguous; class {missing} is missing"
        )));
    }
    let scaling = Scaling::fit(&rows);
    let d = scaling.min.len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for row in &rows {
        data.extend(row.iter().enumerate().map(|(j, &v)| scaling.normalize(j, v)));
    }
    let x = Tensor::new(vec![rows.len(), d], data).expect("shape");
    let mut ds = Dataset::new(x, labels, num_classes, DataKind::Table)?;
    ds.scaling = Some(scaling);
    Ok(ds)
}

/// Class-balanced batch draws over a [`Dataset`].
///
/// Each class is visited through seeded permutations, one per pass over
/// that class; the sampler state is just the per-class draw counters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSampler {
    seed: u64,
    class_indices: Vec<Vec<usize>>,
    draws: Vec<u64>,
    /// Batches drawn so far; rotates which classes get the remainder slots.
    batches: u64,
    cache: Vec<Option<(u64, Vec<usize>)>>,
}

impl BatchSampler {
    pub fn new(dataset: &Dataset, seed: u64) -> Result<Self, DatasetError> {
        let class_indices: Vec<Vec<usize>> = (0..dataset.num_classes()).map(|c| dataset.class_indices(c)).collect();
        if let Some(c) = class_indices.iter().position(Vec::is_empty) {
            return Err(DatasetError::Labels(format!("class {c} has no samples")));
        }
        let draws = vec![0; class_indices.len()];
        let cache = vec![None; class_indices.len()];
        Ok(Self { seed, class_indices, draws, batches: 0, cache })
    }

    pub fn draws(&self) -> &[u64] {
        &self.draws
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    pub fn restore(&mut self, draws: &[u64], batches: u64) {
        self.draws.copy_from_slice(draws);
        self.batches = batches;
    }

    /// Full passes over the dataset completed so far.
    pub fn epoch(&self) -> u64 {
        let total: u64 = self.draws.iter().sum();
        let len: u64 = self.class_indices.iter().map(|v| v.len() as u64).sum();
        total / len
    }

    fn permutation(&self, class: usize, pass: u64) -> Vec<usize> {
        let mut idx = self.class_indices[class].clone();
        let mix = self.seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ pass.wrapping_mul(0xD1B5_4A32_D192_ED03);
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
        idx
    }

    fn next_index(&mut self, class: usize) -> usize {
        let n = self.class_indices[class].len() as u64;
        let k = self.draws[class];
        self.draws[class] += 1;
        let pass = k / n;
        if !matches!(&self.cache[class], Some((p, _)) if *p == pass) {
            self.cache[class] = Some((pass, self.permutation(class, pass)));
        }
        let (_, perm) = self.cache[class].as_ref().expect("cached above");
        perm[(k % n) as usize]
    }

    /// Draws `batch_size` samples with per-class counts differing by at
    /// most one.
    pub fn next_batch(&mut self, dataset: &Dataset, batch_size: usize) -> LabeledBatch {
        let classes = self.class_indices.len();
        let base = batch_size / classes;
        let extra = batch_size % classes;
        let offset = (self.batches % classes as u64) as usize;
        let mut idx = Vec::with_capacity(batch_size);
        for c in 0..classes {
            let bonus = usize::from((c + classes - offset) % classes < extra);
            for _ in 0..base + bonus {
                idx.push(self.next_index(c));
            }
        }
        self.batches += 1;
        dataset.gather(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_classes_on_a_circle() {
        let spec = Gmm2dSpec { num_classes: 5, modes_per_class: 1, samples_per_class: 20, ..Default::default() };
        let ds = spec.generate(1).unwrap();
        let mut seen = ds.labels().to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert!(ds.features().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn separation_violation_rejected() {
        let spec = Gmm2dSpec { num_classes: 40, modes_per_class: 1, mode_std: 0.05, ..Default::default() };
        assert!(matches!(spec.generate(0), Err(DatasetError::Separation { .. })));
    }

    #[test]
    fn unsupported_glyph_side() {
        let spec = GlyphSpec { side: 12, ..Default::default() };
        assert!(matches!(spec.generate(0), Err(DatasetError::InvalidParameter { name: "side", .. })));
    }

    #[test]
    fn constant_column_maps_to_midpoint() {
        let csv = "1.0,5.0,0\n2.0,5.0,1\n3.0,5.0,0\n4.0,5.0,1\n";
        let ds = read_csv(csv.as_bytes()).unwrap();
        assert_eq!(ds.data_dim(), 2);
        assert_eq!(ds.len(), 4);
        assert!((0..4).all(|i| ds.features().row(i)[1] == 0.0));
        assert_eq!(ds.features().row(0)[0], -1.0);
        assert_eq!(ds.features().row(3)[0], 1.0);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(read_csv("1,2,0\n1,0\n".as_bytes()), Err(DatasetError::Ragged { line: 2, .. })));
        assert!(matches!(read_csv("1,2,0\n1,x,1\n".as_bytes()), Err(DatasetError::NonNumeric { line: 2, .. })));
        assert!(matches!(read_csv("1,2,0.5\n".as_bytes()), Err(DatasetError::Labels(_))));
        assert!(matches!(read_csv("1,2,0\n1,2,2\n".as_bytes()), Err(DatasetError::Labels(_))));
        assert!(matches!(read_csv("0.1\n0.2\n".as_bytes()), Err(DatasetError::Labels(_))));
        let with_header = read_csv("a,b,label\n1,2,0\n3,4,1\n".as_bytes()).unwrap();
        assert_eq!(with_header.len(), 2);
    }

    #[test]
    fn batches_are_class_balanced() {
        let spec = Gmm2dSpec { samples_per_class: 30, ..Default::default() };
        let ds = spec.generate(0).unwrap();
        let mut sampler = BatchSampler::new(&ds, 9).unwrap();
        for _ in 0..20 {
            let b = sampler.next_batch(&ds, 10);
            let mut counts = vec![0; 4];
            b.labels.iter().for_each(|&c| counts[c] += 1);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
        assert_eq!(sampler.epoch(), 1);
    }
}
