//! Synthetic fundus-like lesion images and manifest-based datasets.
//!
//! Class `c` draws `3c..=3c+1` microaneurysms (small dark dots), exactly `c`
//! hemorrhages (larger dark patches) and `2c..=2c+1` exudates (bright yellow
//! blobs), so count ranges never overlap between adjacent classes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm::{self, RgbImage};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: Vec<usize>,
    pub image_size: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            samples_per_class: vec![100; 3],
            image_size: 64,
            val_fraction: 0.2,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Seven imbalanced classes shaped like a 757-image retinal dataset,
    /// scaled by 0.2 with a floor of 2.
    pub fn seven_class() -> Self {
        let full = [187.0, 4.0, 80.0, 176.0, 108.0, 88.0, 114.0];
        Self {
            num_classes: 7,
            samples_per_class: full.iter().map(|n: &f64| ((n * 0.2).round() as usize).max(2)).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.samples_per_class.len() != self.num_classes {
            return Err(Error::Config(format!(
                "samples_per_class has {} entries for {} classes",
                self.samples_per_class.len(),
                self.num_classes
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size must be at least 16, got {}", self.image_size)));
        }
        let (v, t) = (self.val_fraction, self.test_fraction);
        if !(0.0..1.0).contains(&v) || !(0.0..1.0).contains(&t) || v + t >= 1.0 {
            return Err(Error::Config(format!("split fractions val={v} test={t} must be in [0,1) with sum < 1")));
        }
        if self.samples_per_class.iter().all(|&n| n == 0) {
            return Err(Error::Config("samples_per_class is all zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

/// Lesion counts drawn for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LesionCounts {
    pub microaneurysms: usize,
    pub hemorrhages: usize,
    pub exudates: usize,
}

impl LesionCounts {
    pub fn sample(class: usize, rng: &mut Rng) -> Self {
        Self {
            microaneurysms: rng.int_range(3 * class, 3 * class + 1),
            hemorrhages: class,
            exudates: rng.int_range(2 * class, 2 * class + 1),
        }
    }
}

fn blend(px: &mut [f64], color: [f64; 3], a: f64) {
    for c in 0..3 {
        px[c] = (1.0 - a) * px[c] + a * color[c];
    }
}

fn disc(buf: &mut [f64], size: usize, cx: f64, cy: f64, r: f64, color: [f64; 3], soft: bool) {
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil() as usize).min(size - 1);
    let y1 = ((cy + r + 1.0).ceil() as usize).min(size - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            let a = if soft {
                (1.0 - d / r).clamp(0.0, 1.0).sqrt()
            } else {
                (r + 0.5 - d).clamp(0.0, 1.0)
            };
            if a > 0.0 {
                let i = (y * size + x) * 3;
                blend(&mut buf[i..i + 3], color, a);
            }
        }
    }
}

/// Renders one image of `class`.
pub fn render_image(class: usize, size: usize, rng: &mut Rng) -> RgbImage {
    let s = size as f64;
    let (c0, radius) = (s / 2.0, 0.46 * s);
    let mut buf = vec![0.0; size * size * 3];

    // low-frequency texture
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let f = rng.uniform_range(2.0, 5.0) / s;
            (f, rng.uniform_range(0.0, std::f64::consts::TAU), rng.uniform_range(-1.0, 1.0))
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - c0, y as f64 + 0.5 - c0);
            let d = (dx * dx + dy * dy).sqrt() / radius;
            if d > 1.0 {
                continue;
            }
            let t: f64 = waves
                .iter()
                .map(|&(f, ph, dir)| (std::f64::consts::TAU * f * (x as f64 * dir + y as f64 * (1.0 - dir.abs())) + ph).sin())
                .sum::<f64>()
                / 3.0;
            let shade = 1.0 - 0.35 * d * d + 0.06 * t + rng.uniform_range(-0.03, 0.03);
            let i = (y * size + x) * 3;
            buf[i] = 205.0 * shade;
            buf[i + 1] = 95.0 * shade;
            buf[i + 2] = 45.0 * shade;
        }
    }

    // optic disc on a random side
    let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    let od = (c0 + side * 0.27 * s, c0 + rng.uniform_range(-0.05, 0.05) * s);
    disc(&mut buf, size, od.0, od.1, 0.085 * s, [250.0, 215.0, 150.0], true);

    let counts = LesionCounts::sample(class, rng);
    let spot = |rng: &mut Rng| {
        loop {
            let a = rng.uniform_range(0.0, std::f64::consts::TAU);
            let r = 0.36 * s * rng.uniform().sqrt();
            let p = (c0 + r * a.cos(), c0 + r * a.sin());
            if ((p.0 - od.0).powi(2) + (p.1 - od.1).powi(2)).sqrt() > 0.12 * s {
                return p;
            }
        }
    };
    let scale = s / 64.0;
    for _ in 0..counts.hemorrhages {
        let (x, y) = spot(rng);
        let r = rng.uniform_range(2.5, 4.0) * scale;
        disc(&mut buf, size, x, y, r, [90.0, 15.0, 10.0], false);
    }
    for _ in 0..counts.microaneurysms {
        let (x, y) = spot(rng);
        let r = rng.uniform_range(0.9, 1.4) * scale;
        disc(&mut buf, size, x, y, r, [110.0, 10.0, 15.0], false);
    }
    for _ in 0..counts.exudates {
        let (x, y) = spot(rng);
        let r = rng.uniform_range(1.4, 2.4) * scale;
        disc(&mut buf, size, x, y, r, [255.0, 240.0, 110.0], false);
    }

    RgbImage {
        width: size,
        height: size,
        pixels: buf.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    }
}

/// Assigns splits per class: `round(n * val)` to val, `round(n * test)` to
/// test, the rest to train, after a seeded shuffle.
pub fn stratified_splits(labels: &[usize], val: f64, test: f64, rng: &mut Rng) -> Vec<Split> {
    let mut splits = vec![Split::Train; labels.len()];
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let n = idx.len() as f64;
        let n_val = (n * val).round() as usize;
        let n_test = ((n * test).round() as usize).min(idx.len() - n_val.min(idx.len()));
        for (j, &i) in idx.iter().enumerate() {
            splits[i] = if j < n_val {
                Split::Val
            } else if j < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    splits
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let headers = r.headers().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
        return Err(Error::Data(format!(
            "{}: header must be `path,label,split`",
            path.display()
        )));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| Error::Data(format!("{} row {}: {e}", path.display(), i + 2))))
        .collect()
}

/// Writes `img_0001.ppm`, ... and `manifest.csv` into `dir`.
pub fn generate_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<Vec<ManifestRecord>> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (c, &n) in spec.samples_per_class.iter().enumerate() {
        if n == 0 {
            log::warn!("class {c} has zero samples and will be absent from the manifest");
        }
    }
    let labels: Vec<usize> = spec
        .samples_per_class
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let splits = stratified_splits(
        &labels,
        spec.val_fraction,
        spec.test_fraction,
        &mut Rng::new(Rng::derive(spec.seed, u64::MAX)),
    );
    let mut records = Vec::with_capacity(labels.len());
    for (i, (&label, &split)) in labels.iter().zip(&splits).enumerate() {
        let name = format!("img_{:04}.ppm", i + 1);
        let mut rng = Rng::new(Rng::derive(spec.seed, i as u64));
        let img = render_image(label, spec.image_size, &mut rng);
        pnm::write_ppm(&dir.join(&name), &img)?;
        records.push(ManifestRecord { path: name, label, split });
    }
    write_manifest(&dir.join(MANIFEST_NAME), &records)?;
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
    pub image: RgbImage,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a manifest (or a directory containing `manifest.csv`) and decodes
/// every image. Paths are relative to the manifest's directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let root = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(&manifest)?;
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let p = root.join(&r.path);
        if !p.exists() {
            return Err(Error::Data(format!("manifest entry `{}` does not exist", p.display())));
        }
        samples.push(Sample {
            image: pnm::read_ppm(&p)?,
            path: p,
            label: r.label,
            split: r.split,
        });
    }
    Ok(Dataset { samples })
}

/// Stacks images into `[N, height, width, 3]` in `[0, 1]`, resizing by
/// nearest neighbour where needed.
pub fn to_batch(images: &[&RgbImage], height: usize, width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * height * width * 3);
    for img in images {
        data.extend(img.resized(width, height).to_unit());
    }
    Tensor::new(vec![images.len(), height, width, 3], data)
}
